"""Diagnostics over a frozen encoder.

Three protocols: top-1/top-5 accuracy on original versus frame-shuffled
inputs together with their gap, linear order probes on the per-frame
space-averaged embeddings of every block, and the histogram of per-sample
confidence gaps between original and shuffled passes.  All are pure reads
of the weights; nothing here mutates the encoder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import InputError
from .optim import AdamW

HISTOGRAM_BINS = 20


def sample_permutation(seed, index, t):
    """Non-identity frame permutation for the sample at position `index`.

    The (seed, index) keying makes the permutation reproducible and shared
    across accuracy and histogram passes, so per-sample comparisons are
    paired.
    """
    if t < 2:
        raise InputError(f"cannot shuffle {t} frame(s)")
    rng = np.random.default_rng((seed, index))
    identity = np.arange(t)
    perm = rng.permutation(t)
    while np.array_equal(perm, identity):
        perm = rng.permutation(t)
    return perm


def batched_logits(params, cfg, frames, batch_size=64):
    """Classifier logits for (N, T, H, W, C) frames, (N, K) f32."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise InputError("empty dataset")
    outs = []
    for i in range(0, len(frames), batch_size):
        enc = M.encode(frames[i:i + batch_size], cfg, params)
        outs.append(M.classify(enc.final_cls, params).data.copy())
    return np.concatenate(outs, axis=0)


def shuffle_dataset_frames(frames, seed):
    """Apply the per-sample evaluation permutation to every video."""
    frames = np.asarray(frames)
    out = np.empty_like(frames)
    t = frames.shape[1]
    for k in range(len(frames)):
        out[k] = frames[k][sample_permutation(seed, k, t)]
    return out


def _topk_hits(logits, labels, k):
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def _confidences(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p.max(axis=1)


@dataclass
class EvalReport:
    """Accuracy summary; gap = top1_original - top1_shuffled in points."""

    top1_original: float
    top1_shuffled: float
    top5_original: float | None
    top5_shuffled: float | None
    gap: float
    seed: int
    per_class: dict = field(default_factory=dict)

    def subset_accuracy(self, classes, shuffled=False):
        """Sample-weighted top-1 over a class subset, in percent."""
        key = "top1_shuffled" if shuffled else "top1_original"
        total = sum(self.per_class[c]["n"] for c in classes)
        if total == 0:
            raise InputError("subset has no samples")
        hits = sum(self.per_class[c]["n"] * self.per_class[c][key] for c in classes)
        return hits / total


def eval_accuracy(params, cfg, frames, labels, shuffled, seed, batch_size=64):
    """(top1, top5) percentages; top5 is None when there are 5 or fewer classes."""
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    if shuffled:
        frames = shuffle_dataset_frames(frames, seed)
    logits = batched_logits(params, cfg, frames, batch_size)
    k_classes = logits.shape[1]
    top1 = 100.0 * _topk_hits(logits, labels, 1).mean()
    top5 = 100.0 * _topk_hits(logits, labels, 5).mean() if k_classes > 5 else None
    return top1, top5


def evaluate(params, cfg, frames, labels, seed, batch_size=64) -> EvalReport:
    """Original and shuffled accuracy from two passes over the dataset."""
    frames = np.asarray(frames)
    labels = np.asarray(labels)
    logits_orig = batched_logits(params, cfg, frames, batch_size)
    logits_shuf = batched_logits(
        params, cfg, shuffle_dataset_frames(frames, seed), batch_size)
    k_classes = logits_orig.shape[1]

    hit1_o = _topk_hits(logits_orig, labels, 1)
    hit1_s = _topk_hits(logits_shuf, labels, 1)
    per_class = {}
    for c in np.unique(labels):
        m = labels == c
        per_class[int(c)] = {
            "n": int(m.sum()),
            "top1_original": 100.0 * hit1_o[m].mean(),
            "top1_shuffled": 100.0 * hit1_s[m].mean(),
        }
    top1_o = 100.0 * hit1_o.mean()
    top1_s = 100.0 * hit1_s.mean()
    return EvalReport(
        top1_original=top1_o,
        top1_shuffled=top1_s,
        top5_original=100.0 * _topk_hits(logits_orig, labels, 5).mean() if k_classes > 5 else None,
        top5_shuffled=100.0 * _topk_hits(logits_shuf, labels, 5).mean() if k_classes > 5 else None,
        gap=top1_o - top1_s,
        seed=int(seed),
        per_class=per_class,
    )


def eval_gap(report):
    """Original minus shuffled top-1, in points.  Accepts an EvalReport or
    an (original, shuffled) pair."""
    if isinstance(report, EvalReport):
        return report.top1_original - report.top1_shuffled
    original, shuffled = report
    return original - shuffled


# ---------------------------------------------------------------------------
# per-block order probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    """Held-out order accuracy per encoder block (1..depth), percent."""

    accuracies: list
    epochs: int
    lr: float

    @property
    def depth(self):
        return len(self.accuracies)


def collect_frame_features(params, cfg, frames, batch_size=32):
    """Per-frame space-averaged embeddings at every level.

    Returns (N, depth+1, t, D) f32 where level 0 is the embedding output
    and level k >= 1 the output of block k.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise InputError("empty dataset")
    out = np.empty((len(frames), cfg.depth + 1, cfg.t, cfg.embed_dim), dtype=np.float32)
    for i in range(0, len(frames), batch_size):
        enc = M.encode(frames[i:i + batch_size], cfg, params)
        for level in range(cfg.depth + 1):
            grid = enc.grid_at(level).data  # (B, s, t, D)
            out[i:i + batch_size, level] = grid.mean(axis=1)
    return out


def train_order_probe(train_features, test_features, epochs=20, lr=1e-2, seed=0):
    """Fit a fresh linear head to predict the frame index; return held-out
    top-1 percent.

    Features are (N, t, D); each frame is one training point with label
    equal to its temporal position.  Training is full-batch.
    """
    n, t, dim = train_features.shape
    x_train = T.Tensor(np.ascontiguousarray(train_features.reshape(n * t, dim)))
    y_train = np.tile(np.arange(t), n)
    rng = np.random.default_rng(seed)
    weight = T.Tensor(rng.normal(0.0, 0.02, (dim, t)).astype(np.float32),
                      requires_grad=True)
    bias = T.Tensor(np.zeros(t, dtype=np.float32), requires_grad=True)
    opt = AdamW({"probe.weight": weight, "probe.bias_": bias}, lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        with T.Tape() as tape:
            logits = T.add(T.matmul(x_train, weight), bias)
            loss = T.cross_entropy(logits, y_train)
        T.backward(loss, tape)
        opt.step()

    m = test_features.shape[0]
    test_logits = test_features.reshape(m * t, dim) @ weight.data + bias.data
    y_test = np.tile(np.arange(t), m)
    return 100.0 * (test_logits.argmax(axis=1) == y_test).mean()


def probe_blocks(params, cfg, train_frames, test_frames, epochs=20, lr=1e-2,
                 seed=0, batch_size=32) -> ProbeReport:
    """Independent linear order probes per block over a frozen encoder."""
    feats_train = collect_frame_features(params, cfg, train_frames, batch_size)
    feats_test = collect_frame_features(params, cfg, test_frames, batch_size)
    accs = []
    for block in range(1, cfg.depth + 1):
        accs.append(train_order_probe(
            feats_train[:, block], feats_test[:, block],
            epochs=epochs, lr=lr, seed=(seed, block)))
    return ProbeReport(accuracies=accs, epochs=epochs, lr=lr)


# ---------------------------------------------------------------------------
# confidence-gap histogram
# ---------------------------------------------------------------------------


@dataclass
class ConfidenceHistogram:
    """Probabilistic mass over 20 equal bins of conf(original) - conf(shuffled).

    Bin k covers [-1 + k/10, -1 + (k+1)/10); the last bin also includes
    the right endpoint so a gap of exactly +1 is counted.
    """

    masses: np.ndarray
    mean_gap: float
    seed: int

    @staticmethod
    def edges():
        return np.linspace(-1.0, 1.0, HISTOGRAM_BINS + 1)


def histogram_from_gaps(gaps, seed=0) -> ConfidenceHistogram:
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size == 0:
        raise InputError("empty dataset")
    bins = np.clip(np.floor((gaps + 1.0) * 10.0).astype(np.int64), 0, HISTOGRAM_BINS - 1)
    masses = np.bincount(bins, minlength=HISTOGRAM_BINS) / gaps.size
    return ConfidenceHistogram(masses=masses, mean_gap=float(gaps.mean()), seed=int(seed))


def confidence_gaps(params, cfg, frames, seed, batch_size=64):
    """Per-sample conf(original) - conf(shuffled), using the same
    permutations as eval_accuracy at this seed."""
    frames = np.asarray(frames)
    conf_orig = _confidences(batched_logits(params, cfg, frames, batch_size))
    conf_shuf = _confidences(batched_logits(
        params, cfg, shuffle_dataset_frames(frames, seed), batch_size))
    return conf_orig - conf_shuf


def confidence_histogram(params, cfg, frames, seed, batch_size=64) -> ConfidenceHistogram:
    return histogram_from_gaps(confidence_gaps(params, cfg, frames, seed, batch_size), seed)


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def _fmt(v):
    return "%.10g" % v


def write_report_csv(path, run_id, report: EvalReport, split="test"):
    """One row per metric: run_id, metric, split, value, seed."""
    rows = [("top1_original", report.top1_original),
            ("top1_shuffled", report.top1_shuffled)]
    if report.top5_original is not None:
        rows.append(("top5_original", report.top5_original))
        rows.append(("top5_shuffled", report.top5_shuffled))
    rows.append(("gap", report.gap))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "metric", "split", "value", "seed"])
        for name, value in rows:
            writer.writerow([run_id, name, split, _fmt(value), report.seed])


def write_histogram_csv(path, hist: ConfidenceHistogram):
    edges = ConfidenceHistogram.edges()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "mass"])
        for k in range(HISTOGRAM_BINS):
            writer.writerow(["%.2f" % edges[k], "%.2f" % edges[k + 1],
                             _fmt(hist.masses[k])])


def write_probe_csv(path, run_id, report: ProbeReport, seed):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "metric", "split", "value", "seed"])
        for block, acc in enumerate(report.accuracies, start=1):
            writer.writerow([run_id, f"probe_block_{block}", "probe", _fmt(acc), seed])
