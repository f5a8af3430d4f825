"""Video transformer encoder with joint and divided space-time attention.

Token order is space-major within a frame with frames outermost, so token
(i, j) for spatial index i and frame index j sits at position j*s + i.
Positional information is factorized: a spatial table with s rows plus a
temporal table with t rows, summed per token.  The cls token carries its
own content vector and its own positional vector.

Parameter dictionaries are flat, checkpoint-ready mappings with
hierarchical names such as ``block.3.time_attn.q_proj``.  Projections are
stored output-major, i.e. applied as ``x @ W`` with W of shape (in, out),
except the patch projection which keeps the (D, patch_width) orientation
of the defining linear map.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ATTENTION_KINDS = ("joint", "divided")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: tuple = (1, 8, 8)
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    attention_kind: str = "divided"
    readd_temporal_pos: bool = False
    num_classes: int = 16

    def __post_init__(self):
        t_p, h_p, w_p = self.patch
        if self.frames % t_p or self.height % h_p or self.width % w_p:
            raise ConfigError(
                f"patch {self.patch} does not tile video {self.frames}x{self.height}x{self.width}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.depth < 0 or self.num_classes < 1:
            raise ConfigError("depth must be >= 0 and num_classes >= 1")

    @property
    def t(self):
        return self.frames // self.patch[0]

    @property
    def grid_h(self):
        return self.height // self.patch[1]

    @property
    def grid_w(self):
        return self.width // self.patch[2]

    @property
    def s(self):
        return self.grid_h * self.grid_w

    @property
    def patch_width(self):
        t_p, h_p, w_p = self.patch
        return t_p * h_p * w_p * self.channels

    @property
    def seq_len(self):
        return 1 + self.s * self.t


def _trunc_normal(rng, shape, std):
    """Normal(0, std) truncated to two standard deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def _attn_params(rng, d, std, dtype):
    out = {}
    for name in ("q", "k", "v", "out"):
        out[f"{name}_proj"] = Tensor(_trunc_normal(rng, (d, d), std), dtype=dtype, requires_grad=True)
        out[f"{name}_bias"] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)
    return out


def _norm_params(d, dtype):
    return {
        "gamma": Tensor(np.ones(d), dtype=dtype, requires_grad=True),
        "beta": Tensor(np.zeros(d), dtype=dtype, requires_grad=True),
    }


def init_weights(cfg: ModelConfig, seed=0, dtype="f32"):
    """Fresh parameter dict: truncated-normal(0.02) projections, zero biases
    and positional tables, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    std = 0.02
    d = cfg.embed_dim
    p = {}

    p["embed.proj"] = Tensor(_trunc_normal(rng, (d, cfg.patch_width), std), dtype=dtype, requires_grad=True)
    p["embed.spatial_pos"] = Tensor(np.zeros((cfg.s, d)), dtype=dtype, requires_grad=True)
    p["embed.temporal_pos"] = Tensor(np.zeros((cfg.t, d)), dtype=dtype, requires_grad=True)
    p["embed.cls"] = Tensor(_trunc_normal(rng, (d,), std), dtype=dtype, requires_grad=True)
    p["embed.cls_pos"] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)

    for b in range(cfg.depth):
        if cfg.attention_kind == "joint":
            groups = [("attn", "norm1")]
        else:
            groups = [("time_attn", "time_norm"), ("space_attn", "space_norm")]
        for attn_name, norm_name in groups:
            for k, v in _attn_params(rng, d, std, dtype).items():
                p[f"block.{b}.{attn_name}.{k}"] = v
            for k, v in _norm_params(d, dtype).items():
                p[f"block.{b}.{norm_name}.{k}"] = v
        hidden = 4 * d
        p[f"block.{b}.mlp.fc1"] = Tensor(_trunc_normal(rng, (d, hidden), std), dtype=dtype, requires_grad=True)
        p[f"block.{b}.mlp.fc1_bias"] = Tensor(np.zeros(hidden), dtype=dtype, requires_grad=True)
        p[f"block.{b}.mlp.fc2"] = Tensor(_trunc_normal(rng, (hidden, d), std), dtype=dtype, requires_grad=True)
        p[f"block.{b}.mlp.fc2_bias"] = Tensor(np.zeros(d), dtype=dtype, requires_grad=True)
        for k, v in _norm_params(d, dtype).items():
            p[f"block.{b}.norm2.{k}"] = v

    p["head.weight"] = Tensor(_trunc_normal(rng, (d, cfg.num_classes), std), dtype=dtype, requires_grad=True)
    p["head.bias"] = Tensor(np.zeros(cfg.num_classes), dtype=dtype, requires_grad=True)
    return p


def check_weights(params, cfg: ModelConfig):
    """Raise ConfigError when the parameter dict does not match the config."""
    probe = init_weights(cfg, seed=0)
    missing = sorted(set(probe) - set(params))
    if missing:
        raise ConfigError(f"weights missing {len(missing)} entries, first: {missing[0]}")
    for name, ref in probe.items():
        got = params[name]
        shape = getattr(got, "shape", np.shape(got))
        if tuple(shape) != tuple(ref.shape):
            raise ConfigError(f"weight {name}: shape {tuple(shape)} != expected {tuple(ref.shape)}")


# ---------------------------------------------------------------------------
# tokenization and embedding
# ---------------------------------------------------------------------------


def tokenize(video, cfg: ModelConfig):
    """Cut a video (T, H, W, C) or batch (B, T, H, W, C) into flat patch
    tokens ordered space-major within frame, frames outer."""
    arr = np.asarray(video)
    squeeze = arr.ndim == 4
    if squeeze:
        arr = arr[None]
    expect = (cfg.frames, cfg.height, cfg.width, cfg.channels)
    if arr.ndim != 5 or arr.shape[1:] != expect:
        raise ConfigError(f"video shape {arr.shape} does not match configured {expect}")
    t_p, h_p, w_p = cfg.patch
    b = arr.shape[0]
    arr = arr.reshape(b, cfg.t, t_p, cfg.grid_h, h_p, cfg.grid_w, w_p, cfg.channels)
    arr = arr.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    tokens = np.ascontiguousarray(arr).reshape(b, cfg.t * cfg.s, cfg.patch_width)
    return tokens[0] if squeeze else tokens


def _positional_grid(params, cfg):
    """(s*t, D) tensor with row j*s+i = spatial[i] + temporal[j]."""
    spatial = T.expand_axis(params["embed.spatial_pos"], 0, cfg.t)
    temporal = T.expand_axis(params["embed.temporal_pos"], 1, cfg.s)
    return T.reshape(T.add(spatial, temporal), (cfg.s * cfg.t, cfg.embed_dim))


def embed(tokens, params, cfg: ModelConfig):
    """Project tokens and add factorized positions; prepend the cls row."""
    if not isinstance(tokens, Tensor):
        tokens = Tensor(np.asarray(tokens), dtype=params["embed.proj"].dtype)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    if tokens.shape[-1] != cfg.patch_width:
        raise ConfigError(f"token width {tokens.shape[-1]} != configured {cfg.patch_width}")
    if tokens.shape[-2] != cfg.s * cfg.t:
        raise ConfigError(f"token count {tokens.shape[-2]} != configured {cfg.s * cfg.t}")

    projected = T.matmul(tokens, T.transpose(params["embed.proj"], (1, 0)))
    seq = T.add(projected, _positional_grid(params, cfg))

    cls_row = T.add(params["embed.cls"], params["embed.cls_pos"])
    cls_seq = T.expand_axis(T.reshape(cls_row, (1, cfg.embed_dim)), 0, tokens.shape[0])
    out = T.concat([cls_seq, seq], axis=1)
    return T.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _mha(x, params, prefix, cfg):
    """Multi-head softmax attention over the last two axes of x (B, L, D)."""
    b, l, d = x.shape
    h = cfg.heads
    dh = d // h

    def heads(name):
        y = T.add(T.matmul(x, params[f"{prefix}.{name}_proj"]), params[f"{prefix}.{name}_bias"])
        return T.transpose(T.reshape(y, (b, l, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    mixed = T.matmul(weights, v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, l, d))
    return T.add(T.matmul(merged, params[f"{prefix}.out_proj"]), params[f"{prefix}.out_bias"])


def _layer_norm(x, params, prefix):
    return T.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def _mlp(x, params, prefix):
    h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.fc1"]), params[f"{prefix}.fc1_bias"]))
    return T.add(T.matmul(h, params[f"{prefix}.fc2"]), params[f"{prefix}.fc2_bias"])


def _split_cls(x):
    cls = T.index(x, (slice(None), slice(0, 1)))
    tokens = T.index(x, (slice(None), slice(1, None)))
    return cls, tokens


def _time_pass(x, params, cfg, block):
    """Time-only attention: each spatial index attends across frames.

    The cls row is carried through untouched.  With a single frame the
    sublayer is skipped outright: softmax attention over a one-element
    sequence returns its input, so the only effect would be the residual
    projection noise, and skipping keeps the single-frame pipeline equal
    to joint attention by construction.
    """
    if cfg.t == 1:
        return x
    cls, tokens = _split_cls(x)
    b = x.shape[0]
    d = cfg.embed_dim
    normed = _layer_norm(tokens, params, f"block.{block}.time_norm")
    # (b, t, s, d) -> (b, s, t, d) -> fold spatial into batch
    grouped = T.transpose(T.reshape(normed, (b, cfg.t, cfg.s, d)), (0, 2, 1, 3))
    folded = T.reshape(grouped, (b * cfg.s, cfg.t, d))
    attended = _mha(folded, params, f"block.{block}.time_attn", cfg)
    regrouped = T.transpose(T.reshape(attended, (b, cfg.s, cfg.t, d)), (0, 2, 1, 3))
    delta = T.reshape(regrouped, (b, cfg.t * cfg.s, d))
    return T.concat([cls, T.add(tokens, delta)], axis=1)


def _space_pass(x, params, cfg, block):
    """Space-only attention within each frame; cls joins every frame's pass
    and its per-frame outputs are averaged before the residual."""
    cls, tokens = _split_cls(x)
    b = x.shape[0]
    d = cfg.embed_dim
    normed = _layer_norm(x, params, f"block.{block}.space_norm")
    cls_n, tokens_n = _split_cls(normed)

    frames = T.reshape(tokens_n, (b, cfg.t, cfg.s, d))
    cls_rep = T.expand_axis(cls_n, 1, cfg.t)  # (b, t, 1, d)
    seqs = T.reshape(T.concat([cls_rep, frames], axis=2), (b * cfg.t, 1 + cfg.s, d))
    attended = _mha(seqs, params, f"block.{block}.space_attn", cfg)
    attended = T.reshape(attended, (b, cfg.t, 1 + cfg.s, d))

    cls_delta = T.tmean(T.index(attended, (slice(None), slice(None), 0)), axis=1, keepdims=True)
    token_delta = T.reshape(T.index(attended, (slice(None), slice(None), slice(1, None))), (b, cfg.t * cfg.s, d))
    return T.concat([T.add(cls, cls_delta), T.add(tokens, token_delta)], axis=1)


def _ensure_batched(e):
    if e.ndim == 2:
        return T.reshape(e, (1,) + e.shape), True
    return e, False


def attend_joint(e, params, cfg: ModelConfig, block=0):
    """One pre-norm block: full-sequence attention, then the MLP sublayer."""
    x, squeeze = _ensure_batched(e)
    x = T.add(x, _mha(_layer_norm(x, params, f"block.{block}.norm1"), params, f"block.{block}.attn", cfg))
    x = T.add(x, _mlp(_layer_norm(x, params, f"block.{block}.norm2"), params, f"block.{block}.mlp"))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def attend_divided(e, params, cfg: ModelConfig, block=0):
    """One pre-norm block: time-only pass, space-only pass, MLP sublayer."""
    x, squeeze = _ensure_batched(e)
    x = _time_pass(x, params, cfg, block)
    x = _space_pass(x, params, cfg, block)
    x = T.add(x, _mlp(_layer_norm(x, params, f"block.{block}.norm2"), params, f"block.{block}.mlp"))
    return T.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    """Per-block sequences.  levels[0] is the embedding output; levels[k]
    for k >= 1 is the output of block k.  All entries are (B, 1+s*t, D)."""

    levels: list
    s: int
    t: int

    @property
    def depth(self):
        return len(self.levels) - 1

    def cls_at(self, block):
        return T.index(self.levels[block], (slice(None), 0))

    def tokens_at(self, block):
        return T.index(self.levels[block], (slice(None), slice(1, None)))

    def grid_at(self, block):
        """(B, s, t, D) view with axes ordered space, time."""
        x = self.tokens_at(block)
        b = x.shape[0]
        return T.transpose(T.reshape(x, (b, self.t, self.s, x.shape[-1])), (0, 2, 1, 3))

    @property
    def final_cls(self):
        return self.cls_at(self.depth)

    @property
    def final_tokens(self):
        return self.tokens_at(self.depth)


def _readd_temporal(x, params, cfg):
    temporal = T.expand_axis(params["embed.temporal_pos"], 1, cfg.s)
    flat = T.reshape(temporal, (cfg.s * cfg.t, cfg.embed_dim))
    cls, tokens = _split_cls(x)
    return T.concat([cls, T.add(tokens, flat)], axis=1)


def encode(video, cfg: ModelConfig, params) -> EncoderOutput:
    """Run the full encoder, recording the sequence after every block.

    ``video`` may be raw frames (optionally batched) or a pre-tokenized
    array of shape (..., s*t, patch_width).
    """
    arr = video.data if isinstance(video, Tensor) else np.asarray(video)
    tokens = tokenize(arr, cfg) if arr.ndim >= 4 else arr
    if tokens.ndim == 2:
        tokens = tokens[None]

    block_fn = attend_joint if cfg.attention_kind == "joint" else attend_divided
    x = embed(Tensor(tokens, dtype=params["embed.proj"].dtype), params, cfg)
    levels = [x]
    for b in range(cfg.depth):
        if cfg.readd_temporal_pos:
            x = _readd_temporal(x, params, cfg)
        x = block_fn(x, params, cfg, block=b)
        levels.append(x)
    return EncoderOutput(levels=levels, s=cfg.s, t=cfg.t)


def classify(cls, params):
    """Affine head on the cls vector(s): (B, D) or (D,) -> logits."""
    w, b = params["head.weight"], params["head.bias"]
    if cls.shape[-1] != w.shape[0]:
        raise ConfigError(f"cls width {cls.shape[-1]} != head input {w.shape[0]}")
    if cls.ndim == 1:
        out = T.add(T.matmul(T.reshape(cls, (1,) + cls.shape), w), b)
        return T.reshape(out, (out.shape[-1],))
    return T.add(T.matmul(cls, w), b)


def aggregate_frame(grid, j):
    """Mean over the spatial axis of frame j.  grid is (s, t, D) or
    (B, s, t, D); returns (D,) or (B, D)."""
    t_extent = grid.shape[-2]
    if not 0 <= j < t_extent:
        raise IndexError(f"frame index {j} out of range for t={t_extent}")
    if grid.ndim == 3:
        return T.tmean(T.index(grid, (slice(None), j)), axis=0)
    return T.tmean(T.index(grid, (slice(None), slice(None), j)), axis=1)
