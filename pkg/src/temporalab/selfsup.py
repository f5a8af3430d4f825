"""Temporal self-supervision losses and their image-domain adaptation.

Four training signals share the encoder: supervised cross-entropy on the
original clip, frame-order prediction on the original clip, a
confidence-flattening KL term on a frame-shuffled clip, and token-level
flow-direction prediction.  One encoder pass serves ce/order/flow; a
second pass on the shuffled clip serves the debias term; nothing else
touches the encoder during a step.

Order labels are 0-based frame indices.  The flow head consumes pairs of
consecutive final-block frame grids and emits 9-way logits per token.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, InputError
from .model import ModelConfig
from .tensor import Tensor

FLOW_CLASSES = 9


@dataclass(frozen=True)
class LossWeights:
    order: float = 1.0
    debias: float = 1.0
    flow: float = 1.0

    def __post_init__(self):
        if min(self.order, self.debias, self.flow) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossBundle:
    ce: Tensor
    order: Tensor
    debias: Tensor
    flow: Tensor
    total: Tensor
    logits: np.ndarray = None  # (B, K) detached copy, for accuracy bookkeeping

    def values(self):
        """Scalar floats in (ce, order, debias, flow, total) order."""
        return tuple(x.item() for x in (self.ce, self.order, self.debias, self.flow, self.total))


def shuffle_frames(video, rng):
    """Uniform non-identity permutation of the leading (frame) axis."""
    video = np.asarray(video)
    t = video.shape[0]
    if t < 2:
        raise InputError(f"shuffle_frames: need at least 2 frames, got {t}")
    perm = rng.permutation(t)
    while (perm == np.arange(t)).all():
        perm = rng.permutation(t)
    return video[perm], perm


def shuffle_patches(tokens, rng):
    """Move patch content across fixed positional slots: row k of the
    output is row p(k) of the input, p uniform non-identity."""
    tokens = np.asarray(tokens)
    s = tokens.shape[0]
    if s < 2:
        raise InputError(f"shuffle_patches: need at least 2 patches, got {s}")
    perm = rng.permutation(s)
    while (perm == np.arange(s)).all():
        perm = rng.permutation(s)
    return tokens[perm], perm


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def init_selfsup_heads(cfg: ModelConfig, seed=0, dtype="f32", image_mode=False):
    """Parameters for the order head and (video mode) the flow head.

    In image mode the encoder runs with one frame and the order head
    predicts the spatial patch index, so its width is s instead of t.
    """
    rng = np.random.default_rng(seed)
    std = 0.02
    d = cfg.embed_dim
    width = cfg.s if image_mode else cfg.t
    p = {
        "order_head.weight": Tensor(M._trunc_normal(rng, (d, width), std), dtype=dtype, requires_grad=True),
        "order_head.bias": Tensor(np.zeros(width), dtype=dtype, requires_grad=True),
    }
    if image_mode:
        return p
    for name in ("q", "k", "v", "out"):
        p[f"flow_head.{name}_proj"] = Tensor(M._trunc_normal(rng, (d, d), std), dtype=dtype, requires_grad=True)
        p[f"flow_head.{name}_bias"] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)
    hidden = 4 * d
    p["flow_head.fc1"] = Tensor(M._trunc_normal(rng, (d, hidden), std), dtype=dtype, requires_grad=True)
    p["flow_head.fc1_bias"] = Tensor(np.zeros(hidden), dtype=dtype, requires_grad=True)
    p["flow_head.fc2"] = Tensor(M._trunc_normal(rng, (hidden, d), std), dtype=dtype, requires_grad=True)
    p["flow_head.fc2_bias"] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)
    p["flow_head.cls9"] = Tensor(M._trunc_normal(rng, (d, FLOW_CLASSES), std), dtype=dtype, requires_grad=True)
    p["flow_head.cls9_bias"] = Tensor(np.zeros(FLOW_CLASSES), dtype=dtype, requires_grad=True)
    return p


def _cross_mha(queries, keys_values, params, prefix, heads):
    """Multi-head attention with distinct query and key/value sequences."""
    b, lq, d = queries.shape
    lk = keys_values.shape[1]
    dh = d // heads

    def project(x, name, length):
        y = T.add(T.matmul(x, params[f"{prefix}.{name}_proj"]), params[f"{prefix}.{name}_bias"])
        return T.transpose(T.reshape(y, (b, length, heads, dh)), (0, 2, 1, 3))

    q = project(queries, "q", lq)
    k = project(keys_values, "k", lk)
    v = project(keys_values, "v", lk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mixed = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, lq, d))
    return T.add(T.matmul(merged, params[f"{prefix}.out_proj"]), params[f"{prefix}.out_bias"])


def flow_head_logits(frame_j, frame_j1, params, heads):
    """hθ on one consecutive pair: queries are frame-j tokens, keys and
    values the concatenated pair; returns (B, s, 9) logits."""
    kv = T.concat([frame_j, frame_j1], axis=1)
    attended = T.add(frame_j, _cross_mha(frame_j, kv, params, "flow_head", heads))
    h = T.gelu(T.add(T.matmul(attended, params["flow_head.fc1"]), params["flow_head.fc1_bias"]))
    h = T.add(T.matmul(h, params["flow_head.fc2"]), params["flow_head.fc2_bias"])
    return T.add(T.matmul(h, params["flow_head.cls9"]), params["flow_head.cls9_bias"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _frames_of(enc: M.EncoderOutput):
    """(B, t, s, D) view of the final block's token grid."""
    tokens = enc.final_tokens
    b, _, d = tokens.shape
    return T.reshape(tokens, (b, enc.t, enc.s, d))


def loss_order(enc: M.EncoderOutput, params, cfg: ModelConfig):
    """Mean CE of predicting each frame's index from its spatial mean."""
    if params["order_head.weight"].shape[1] != cfg.t:
        raise ConfigError(
            f"order head width {params['order_head.weight'].shape[1]} != t={cfg.t}")
    frames = _frames_of(enc)
    b = frames.shape[0]
    means = T.tmean(frames, axis=2)  # (B, t, D)
    flat = T.reshape(means, (b * cfg.t, cfg.embed_dim))
    logits = T.add(T.matmul(flat, params["order_head.weight"]), params["order_head.bias"])
    labels = np.tile(np.arange(cfg.t), b)
    return T.cross_entropy(logits, labels)


def loss_debias(enc_shuffled: M.EncoderOutput, params):
    """KL from uniform to the classifier's prediction on a shuffled clip."""
    logits = M.classify(enc_shuffled.final_cls, params)
    if logits.shape[-1] < 2:
        raise ConfigError("loss_debias: need at least 2 classes")
    return T.kl_uniform(logits)


def loss_flow(enc: M.EncoderOutput, params, labels, cfg: ModelConfig):
    """Mean CE over all (token, frame-pair) cells of 9-way direction."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    frames = _frames_of(enc)
    b = frames.shape[0]
    if labels.shape != (b, cfg.s, cfg.t - 1):
        raise ConfigError(
            f"flow labels shape {labels.shape} != expected {(b, cfg.s, cfg.t - 1)}")
    terms = []
    for j in range(cfg.t - 1):
        fj = T.index(frames, (slice(None), j))
        fj1 = T.index(frames, (slice(None), j + 1))
        logits = flow_head_logits(fj, fj1, params, cfg.heads)
        flat = T.reshape(logits, (b * cfg.s, FLOW_CLASSES))
        terms.append(T.cross_entropy(flat, labels[:, :, j].reshape(-1)))
    acc = terms[0]
    for term in terms[1:]:
        acc = T.add(acc, term)
    return T.mul(acc, 1.0 / (cfg.t - 1))


def total_loss(video, video_shuffled, class_labels, flow_labels, params, cfg, weights=LossWeights()):
    """One training step's objective.  The full objective runs exactly two
    encoder passes: the original clip feeds ce/order/flow, the shuffled
    clip feeds debias.  A zero-weighted term is skipped outright (no
    second pass, no head evaluation) and reported as 0."""
    enc = M.encode(video, cfg, params)

    class_logits = M.classify(enc.final_cls, params)
    ce = T.cross_entropy(class_logits, np.asarray(class_labels))
    zero = Tensor(np.zeros((), dtype=class_logits.dtype))
    order = loss_order(enc, params, cfg) if weights.order != 0.0 else zero
    if weights.debias != 0.0:
        enc_shuf = M.encode(video_shuffled, cfg, params)
        debias = loss_debias(enc_shuf, params)
    else:
        debias = zero
    flow = loss_flow(enc, params, flow_labels, cfg) if weights.flow != 0.0 else zero

    total = ce
    for weight, term in ((weights.order, order), (weights.debias, debias), (weights.flow, flow)):
        if weight != 0.0:
            total = T.add(total, T.mul(term, weight))
    return LossBundle(ce=ce, order=order, debias=debias, flow=flow, total=total,
                      logits=class_logits.data.copy())


# ---------------------------------------------------------------------------
# image-domain adaptation
# ---------------------------------------------------------------------------


def loss_image_order(enc: M.EncoderOutput, params, cfg: ModelConfig):
    """Patch-index prediction: mean CE of g(f^(i)) against label i."""
    if cfg.t != 1:
        raise ConfigError("image order loss expects a single-frame model")
    if params["order_head.weight"].shape[1] != cfg.s:
        raise ConfigError(
            f"order head width {params['order_head.weight'].shape[1]} != s={cfg.s}")
    tokens = enc.final_tokens  # (B, s, D)
    b = tokens.shape[0]
    flat = T.reshape(tokens, (b * cfg.s, cfg.embed_dim))
    logits = T.add(T.matmul(flat, params["order_head.weight"]), params["order_head.bias"])
    labels = np.tile(np.arange(cfg.s), b)
    return T.cross_entropy(logits, labels)


def loss_image_debias(enc_shuffled: M.EncoderOutput, params):
    """Identical to the video debias term; input is a patch-shuffled image."""
    return loss_debias(enc_shuffled, params)


def total_loss_image(tokens, tokens_shuffled, class_labels, params, cfg, weights=LossWeights()):
    """Image-mode objective: ce + order on the intact image, debias on the
    patch-shuffled one.  No flow term exists for single images.  As in
    ``total_loss``, zero-weighted terms are skipped and reported as 0."""
    enc = M.encode(tokens, cfg, params)
    class_logits = M.classify(enc.final_cls, params)
    ce = T.cross_entropy(class_logits, np.asarray(class_labels))
    zero = Tensor(np.zeros((), dtype=ce.dtype))
    order = loss_image_order(enc, params, cfg) if weights.order != 0.0 else zero
    if weights.debias != 0.0:
        enc_shuf = M.encode(tokens_shuffled, cfg, params)
        debias = loss_image_debias(enc_shuf, params)
    else:
        debias = zero
    total = ce
    if weights.order != 0.0:
        total = T.add(total, T.mul(order, weights.order))
    if weights.debias != 0.0:
        total = T.add(total, T.mul(debias, weights.debias))
    return LossBundle(ce=ce, order=order, debias=debias, flow=zero, total=total,
                      logits=class_logits.data.copy())
