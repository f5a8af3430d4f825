"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy buffers (float32 or float64, never mixed within
one graph). Operations executed inside an active ``Tape`` record backward
closures; outside a tape they are plain numpy computations, which keeps
evaluation and finite-difference probing cheap.

Broadcasting is restricted to leading-batch expansion: a lower-rank operand
may be missing leading axes, nothing else. Structured broadcasts (positional
tables over a batch, a [CLS] key shared across frames) are expressed with the
explicit ``expand_axis`` op so every gradient reduction is visible.

Reductions use numpy's sequential/pairwise kernels, so a forward pass is
bit-deterministic for fixed inputs and shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DeterminismError, NumericError, ShapeError, TapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Probability floor applied before any log inside KL computations.
PROB_EPS = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense n-d array with optional participation in an autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_track")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype] if isinstance(dtype, str) else dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; scalars are contiguous already.
        self.data = np.ascontiguousarray(arr) if arr.ndim > 0 else arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # True once this tensor lies on a differentiable path of the active tape.
        self._track = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable ops; one backward pass per forward.

    Nodes are appended in execution order, which is a topological order of
    the graph, so the backward walk is a simple reverse iteration.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name} in one graph")


def _leading_compatible(big, small):
    """True if `small` equals the trailing axes of `big` (leading-batch expansion)."""
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t._track for t in inputs):
        out._track = True
        tape.record(out, inputs, backward_fn)
    return out


def _reduce_leading(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that were added by leading-batch expansion."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a_is = isinstance(a, Tensor)
    if not a_is:
        a, b = b, a
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "add")
    if not (_leading_compatible(a.shape, b.shape) or _leading_compatible(b.shape, a.shape)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ beyond leading-batch expansion")
    out = Tensor(a.data + b.data)

    def backward(g):
        return _reduce_leading(g, a.shape), _reduce_leading(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g):
        return (-g,)

    return _record(out, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, (int, float)):
        c = a.dtype.type(b)
        out = Tensor(a.data * c)

        def backward_scalar(g):
            return (g * c,)

        return _record(out, (a,), backward_scalar)

    _check_same_dtype(a, b, "mul")
    if not (_leading_compatible(a.shape, b.shape) or _leading_compatible(b.shape, a.shape)):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ beyond leading-batch expansion")
    out = Tensor(a.data * b.data)

    def backward(g):
        return _reduce_leading(g * b.data, a.shape), _reduce_leading(g * a.data, b.shape)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes must match exactly or be absent from one operand (which is
    then expanded); gradients sum back over expanded axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if not (_leading_compatible(la, lb) or _leading_compatible(lb, la)):
        raise ShapeError(f"matmul: leading axes {la} and {lb} differ beyond leading-batch expansion")
    _check_same_dtype(a, b, "matmul")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # Right operand is a plain weight matrix: ga already has a's
            # shape, and the weight gradient collapses to one large product
            # over all leading rows instead of a batched product plus sum.
            gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T,
                           g.reshape(-1, g.shape[-1]))
            return ga, gb
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_leading(ga, a.shape), _reduce_leading(gb, b.shape)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def backward(g):
        # A strided view is fine here: gradients flowing between backward
        # closures are internal buffers, not tensor records.
        return (g.transpose(inv),)

    return _record(out, (a,), backward)


def index(a: Tensor, key) -> Tensor:
    """Basic slicing (slices, ints, ellipsis); gradient scatters back."""
    out = Tensor(np.ascontiguousarray(a.data[key]))

    def backward(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        target = ga[key]
        target[...] = g.reshape(target.shape)
        return (ga,)

    return _record(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        key = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(tensors)):
            key[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(key)])
        return tuple(pieces)

    return _record(out, tuple(tensors), backward)


def expand_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at `axis` and tile it n times; gradient sums it away."""
    expanded = np.broadcast_to(np.expand_dims(a.data, axis), a.shape[:axis] + (n,) + a.shape[axis:])
    out = Tensor(np.ascontiguousarray(expanded))

    def backward(g):
        return (g.sum(axis=axis),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g, dtype=a.dtype),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False).copy(),)

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rejects non-finite inputs."""
    x = a.data
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise ShapeError("softmax: empty axis")
    m = x.max(axis=axis, keepdims=True)
    # NaN and +inf surface in the per-slice max; -inf only in the global min.
    # Two plain reductions beat a full isfinite scan on the hot path.
    if not (np.isfinite(m).all() and np.isfinite(x.min())):
        raise NumericError("softmax: non-finite input")
    z = x - m
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return ((phi + x * pdf).astype(a.dtype, copy=False) * g,)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    _check_same_dtype(a, gamma, "layer_norm")
    _check_same_dtype(a, beta, "layer_norm")
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(a.dtype, copy=False), dgamma, dbeta

    del d
    return _record(out, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _flatten_logits(logits: Tensor):
    x = logits.data
    k = x.shape[-1]
    return x.reshape(-1, k), k


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood with a fused, stabilized log-softmax.

    `logits` has class scores along the last axis; `labels` is an integer or
    an integer array matching the leading axes.
    """
    x2, k = _flatten_logits(logits)
    if not np.isfinite(x2).all():
        raise NumericError("cross_entropy: non-finite logits")
    lab = np.asarray(labels)
    if lab.ndim == 0:
        lab = lab.reshape(1)
    lab = lab.reshape(-1)
    if not np.issubdtype(lab.dtype, np.integer):
        raise TypeError("cross_entropy: labels must be integers")
    if lab.shape[0] != x2.shape[0]:
        raise ShapeError(f"cross_entropy: {x2.shape[0]} rows vs {lab.shape[0]} labels")
    if lab.size == 0:
        raise ShapeError("cross_entropy: empty batch")
    if lab.min() < 0 or lab.max() >= k:
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    n = x2.shape[0]
    z = x2 - x2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, lab]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        grad = (p * (g / n)).astype(logits.dtype, copy=False)
        return (grad.reshape(logits.shape),)

    return _record(out, (logits,), backward)


def kl_uniform(logits: Tensor) -> Tensor:
    """KL(U || softmax(logits)) along the last axis, averaged over rows.

    Per row: (1/K) sum_c [ln(1/K) - ln p_c], with p floored at PROB_EPS
    before the log. Zero iff the predicted distribution is uniform.
    """
    x2, k = _flatten_logits(logits)
    if k < 2:
        raise ShapeError("kl_uniform: needs at least 2 classes")
    if not np.isfinite(x2).all():
        raise NumericError("kl_uniform: non-finite logits")
    n = x2.shape[0]
    z = x2 - x2.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    mask = p >= PROB_EPS
    logp = np.log(np.maximum(p, PROB_EPS))
    per_row = -math.log(k) - logp.mean(axis=1)
    out = Tensor(np.asarray(per_row.mean(), dtype=logits.dtype))

    def backward(g):
        # d/dz_j of -(1/K) sum_{c active} ln p_c  =  -(1/K) (m_j - p_j * sum_c m_c)
        msum = mask.sum(axis=1, keepdims=True)
        grad = -(mask.astype(p.dtype) - p * msum) / k
        grad = (grad * (g / n)).astype(logits.dtype, copy=False)
        return (grad.reshape(logits.shape),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape):
    """Propagate d(loss)/d(tensor) through the tape; accumulate into .grad."""
    if loss.ndim != 0:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("backward: tape already consumed; rerun the forward pass")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for t, gi in zip(inputs, input_grads):
            if gi is None or not t._track:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
    for out, inputs, _ in tape._nodes:
        for t in inputs:
            if t.requires_grad and id(t) in grads:
                g = grads.pop(id(t))
                t.grad = g if t.grad is None else t.grad + g


@dataclass
class GradCheckResult:
    """Worst-coordinate summary from a finite-difference gradient check."""

    max_rel_error: float
    worst_param: int
    worst_index: tuple
    analytic: float
    numeric: float


def grad_check_detailed(f, params, h: float = 1e-3, dtype: str = "f64",
                        coord_stride: int = 1) -> GradCheckResult:
    """Compare reverse-mode gradients of f(params) against central differences.

    `f` must be deterministic (verified by two forward evaluations) and is
    evaluated without a tape during probing, so only the analytic pass
    records a graph. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    coord_stride > 1 probes every stride-th coordinate of each parameter
    (always including coordinate 0), trading coverage for speed on large
    parameter sets.
    """
    params = list(params)
    want = DTYPES[dtype]
    for p in params:
        if p.dtype != want:
            raise TypeError(f"grad_check: param dtype {p.dtype.name}, expected {dtype}")

    def eval_scalar():
        out = f(params)
        return float(out.data if isinstance(out, Tensor) else out)

    y1, y2 = eval_scalar(), eval_scalar()
    if y1 != y2:
        raise DeterminismError(f"grad_check: f is not deterministic ({y1!r} vs {y2!r})")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)

    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
        flat = p.data.reshape(-1)
        for i in range(0, flat.size, coord_stride):
            orig = flat[i]
            flat[i] = orig + h
            yp = eval_scalar()
            flat[i] = orig - h
            ym = eval_scalar()
            flat[i] = orig
            num = (yp - ym) / (2.0 * h)
            ana = float(analytic.reshape(-1)[i])
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if rel > worst.max_rel_error:
                worst = GradCheckResult(
                    rel, pi, np.unravel_index(i, p.shape if p.ndim else (1,)), ana, num
                )
    return worst


def grad_check(f, params, h: float = 1e-3, dtype: str = "f64",
               coord_stride: int = 1) -> float:
    return grad_check_detailed(f, params, h=h, dtype=dtype,
                               coord_stride=coord_stride).max_rel_error
