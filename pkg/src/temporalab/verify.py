"""End-to-end gradient verification of the four losses.

Each loss is composed through a 2-block, 16-dim encoder (4 frames, 4
spatial tokens) in float64 and its reverse-mode gradients are compared
against central finite differences for every parameter in the chain.
This is the programmatic backend of the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import selfsup as S
from . import tensor as T

TOLERANCE = 1e-4


def check_config() -> M.ModelConfig:
    """2 blocks, embed dim 16, t = 4 frames, s = 4 spatial tokens."""
    return M.ModelConfig(frames=4, height=8, width=8, channels=3,
                         patch=(1, 4, 4), embed_dim=16, heads=2, depth=2,
                         attention_kind="divided", num_classes=4)


@dataclass
class LossCheckResult:
    name: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    coords_checked: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _setup(seed=0):
    cfg = check_config()
    params = M.init_weights(cfg, seed=seed, dtype="f64")
    params.update(S.init_selfsup_heads(cfg, seed=seed + 1, dtype="f64"))
    rng = np.random.default_rng(seed + 2)
    video = rng.uniform(0.0, 1.0, (1, cfg.frames, cfg.height, cfg.width, cfg.channels))
    shuffled = video[:, rng.permutation(cfg.frames)].copy()
    class_labels = np.array([2])
    flow_labels = rng.integers(0, S.FLOW_CLASSES, size=(1, cfg.s, cfg.t - 1))
    return cfg, params, video, shuffled, class_labels, flow_labels


def _loss_fns(cfg, video, shuffled, class_labels, flow_labels):
    def ce(local):
        enc = M.encode(video, cfg, local)
        return T.cross_entropy(M.classify(enc.final_cls, local), class_labels)

    def order(local):
        return S.loss_order(M.encode(video, cfg, local), local, cfg)

    def debias(local):
        return S.loss_debias(M.encode(shuffled, cfg, local), local)

    def flow(local):
        return S.loss_flow(M.encode(video, cfg, local), local, flow_labels, cfg)

    return {"ce": ce, "order": order, "debias": debias, "flow": flow}


def gradcheck_losses(seed=0, coord_stride=5):
    """Finite-difference check of each loss through the small encoder.

    Returns a list of LossCheckResult, one per loss, each reporting the
    worst coordinate found.  The default stride probes every fifth
    coordinate of every parameter, keeping the whole sweep respectably
    under the two-minute budget while touching all parameters.
    """
    cfg, params, video, shuffled, class_labels, flow_labels = _setup(seed)
    names = sorted(params)
    plist = [params[n] for n in names]
    results = []
    for name, fn in _loss_fns(cfg, video, shuffled, class_labels, flow_labels).items():
        def wrapped(ps, fn=fn):
            return fn(dict(zip(names, ps)))

        t0 = time.perf_counter()
        detail = T.grad_check_detailed(wrapped, plist, coord_stride=coord_stride)
        seconds = time.perf_counter() - t0
        coords = sum((p.size + coord_stride - 1) // coord_stride for p in plist)
        results.append(LossCheckResult(
            name=name,
            max_rel_error=detail.max_rel_error,
            worst_param=names[detail.worst_param] if detail.worst_param >= 0 else "",
            worst_index=detail.worst_index,
            coords_checked=coords,
            seconds=seconds,
        ))
    return results


def format_report(results):
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(
            f"{status}  {r.name:<6s} max_rel_error={r.max_rel_error:.3e} "
            f"worst={r.worst_param}{[int(i) for i in r.worst_index]} "
            f"coords={r.coords_checked} ({r.seconds:.1f}s)")
    return "\n".join(lines)
