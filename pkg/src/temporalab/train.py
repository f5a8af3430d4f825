"""Training loop: datasets, flow labels, optimizer steps, per-epoch metrics.

A run is a pure function of its RunConfig; all randomness flows from the
four named seed streams (data, init, shuffle, eval).  Per-epoch metrics
are flushed to ``metrics.csv`` as they are produced so an interrupted run
still leaves a usable log; wall-clock times go to a separate
``timing.csv`` so the metrics file stays byte-reproducible.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import flow as F
from . import model as M
from . import selfsup as S
from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig, write_config
from .errors import ConfigError, NumericError
from .optim import AdamW, schedule_lr

METRICS_COLUMNS = ("epoch", "ce", "order", "debias", "flow", "total",
                   "train_acc", "test_acc_original", "test_acc_shuffled", "gap")


@dataclass
class TrainResult:
    params: dict
    rows: list
    checkpoint_path: Path
    metrics_path: Path


def _fmt(v):
    return "" if v is None else "%.10g" % v


def data_config(cfg: RunConfig) -> D.DataConfig:
    m = cfg.model
    if m.height != m.width:
        raise ConfigError("video dataset requires square frames")
    return D.DataConfig(frames=m.frames, size=m.height,
                        train_per_class=cfg.train_per_class,
                        test_per_class=cfg.test_per_class)


def image_config(cfg: RunConfig) -> D.ImageConfig:
    m = cfg.model
    if m.height != m.width:
        raise ConfigError("image dataset requires square frames")
    return D.ImageConfig(size=m.height, train_per_class=cfg.train_per_class,
                         test_per_class=cfg.test_per_class)


def init_run_params(cfg: RunConfig) -> dict:
    """Encoder plus classifier head plus self-supervision heads, one dict."""
    params = M.init_weights(cfg.model, seed=cfg.seed_init)
    params.update(S.init_selfsup_heads(cfg.model, seed=cfg.seed_init + 1,
                                       image_mode=(cfg.mode == "image")))
    return params


def compute_flow_labels(frames, cfg: RunConfig, log=None):
    """(N, s, t-1) uint8 flow-direction labels for every training video."""
    m = cfg.model
    patch_grid = (m.patch[1], m.patch[2])
    n = len(frames)
    labels = np.empty((n, m.s, m.t - 1), dtype=np.uint8)
    t_start = time.perf_counter()
    for i in range(n):
        labels[i] = F.make_flow_labels(frames[i], cfg.flow_params, cfg.tau, patch_grid)
        if log and (i + 1) % 200 == 0:
            log(f"flow labels {i + 1}/{n} ({time.perf_counter() - t_start:.1f}s)")
    return labels


def resolve_flow_labels(out_dir, frames, cfg: RunConfig, log=None):
    """Load the label cache when its parameter hash matches, else recompute
    (and write the cache for the next run)."""
    m = cfg.model
    patch_grid = (m.patch[1], m.patch[2])
    cache = Path(out_dir) / "flow_labels.bin"
    cache.parent.mkdir(parents=True, exist_ok=True)
    if cache.exists():
        stored = F.load_label_cache(cache, cfg.tau, cfg.flow_params, patch_grid)
        if stored is not None and stored.shape == (len(frames), m.s, m.t - 1):
            if log:
                log(f"flow labels: cache hit ({cache})")
            return stored
        if log:
            log("flow labels: stale cache, recomputing")
    labels = compute_flow_labels(frames, cfg, log)
    F.save_label_cache(cache, labels, cfg.tau, cfg.flow_params, patch_grid)
    return labels


def _shuffled_video_batch(batch, rng):
    return np.stack([S.shuffle_frames(v, rng)[0] for v in batch])


def _shuffled_token_batch(tokens, rng):
    return np.stack([S.shuffle_patches(tok, rng)[0] for tok in tokens])


def train(cfg: RunConfig, out_dir, flow_labels=None, log=None) -> TrainResult:
    """Run the full loop and leave checkpoint.bin, metrics.csv, timing.csv,
    and a config echo in out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)
    m = cfg.model
    video_mode = cfg.mode == "video"

    t_setup = time.perf_counter()
    if video_mode:
        dcfg = data_config(cfg)
        train_ds, test_ds = D.make_splits(dcfg, cfg.seed_data)
        train_frames, train_labels = train_ds.materialize()
        test_frames, test_labels = test_ds.materialize()
        # Flow labels are only required when the flow term is active; a
        # caller may still hand in a precomputed set either way.
        if flow_labels is None and cfg.loss_weights.flow != 0.0:
            flow_labels = resolve_flow_labels(out, train_frames, cfg, say)
        if flow_labels is not None:
            flow_labels = np.asarray(flow_labels)
            if flow_labels.shape != (len(train_frames), m.s, m.t - 1):
                raise ConfigError(
                    f"flow labels shape {flow_labels.shape} != "
                    f"{(len(train_frames), m.s, m.t - 1)}")
    else:
        icfg = image_config(cfg)
        train_ds, test_ds = D.make_image_splits(icfg, cfg.seed_data)
        train_images, train_labels = train_ds.materialize()
        test_images, test_labels = test_ds.materialize()
        train_tokens = M.tokenize(train_images[:, None], m)
        test_frames = test_images[:, None]
    say(f"data ready in {time.perf_counter() - t_setup:.1f}s "
        f"({len(train_labels)} train / {len(test_labels)} test)")

    params = init_run_params(cfg)
    opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed_shuffle)

    n = len(train_labels)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    global_step = 0
    rows = []
    metrics_path = out / "metrics.csv"
    timing_path = out / "timing.csv"

    with open(metrics_path, "w", newline="") as mfh, \
            open(timing_path, "w", newline="") as tfh:
        mwriter = csv.writer(mfh)
        mwriter.writerow(METRICS_COLUMNS)
        twriter = csv.writer(tfh)
        twriter.writerow(["epoch", "wall_time"])

        for epoch in range(cfg.epochs):
            t_epoch = time.perf_counter()
            order = rng.permutation(n)
            loss_sums = np.zeros(5, dtype=np.float64)
            hits = 0
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                labels = train_labels[idx]
                opt.lr = schedule_lr(cfg.schedule, cfg.lr, global_step, total_steps)
                opt.zero_grad()
                if video_mode:
                    batch = train_frames[idx]
                    shuffled = _shuffled_video_batch(batch, rng)
                    batch_flow = None if flow_labels is None else flow_labels[idx]
                    with T.Tape() as tape:
                        bundle = S.total_loss(batch, shuffled, labels,
                                              batch_flow, params, m,
                                              cfg.loss_weights)
                else:
                    tokens = train_tokens[idx]
                    shuffled = _shuffled_token_batch(tokens, rng)
                    with T.Tape() as tape:
                        bundle = S.total_loss_image(tokens, shuffled, labels,
                                                    params, m, cfg.loss_weights)
                vals = np.asarray(bundle.values())
                if not np.all(np.isfinite(vals)):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {global_step}: "
                        f"ce={vals[0]:.4g} order={vals[1]:.4g} "
                        f"debias={vals[2]:.4g} flow={vals[3]:.4g}")
                T.backward(bundle.total, tape)
                opt.step()
                loss_sums += vals * len(idx)
                hits += int((bundle.logits.argmax(axis=1) == labels).sum())
                global_step += 1

            means = loss_sums / n
            train_acc = 100.0 * hits / n
            if video_mode:
                report = E.evaluate(params, m, test_frames, test_labels, cfg.seed_eval)
                acc_orig, acc_shuf, gap = (report.top1_original,
                                           report.top1_shuffled, report.gap)
            else:
                acc_orig, _ = E.eval_accuracy(params, m, test_frames, test_labels,
                                              shuffled=False, seed=cfg.seed_eval)
                acc_shuf = gap = None

            row = dict(zip(METRICS_COLUMNS,
                           (epoch, *means, train_acc, acc_orig, acc_shuf, gap)))
            rows.append(row)
            mwriter.writerow([epoch] + [_fmt(v) for v in
                                        (*means, train_acc, acc_orig, acc_shuf, gap)])
            mfh.flush()
            wall = time.perf_counter() - t_epoch
            twriter.writerow([epoch, "%.3f" % wall])
            tfh.flush()
            say(f"epoch {epoch}: total={means[4]:.4f} train={train_acc:.1f}% "
                f"test={acc_orig:.1f}%"
                + (f" shuffled={acc_shuf:.1f}% gap={gap:+.1f}" if video_mode else "")
                + f" ({wall:.1f}s)")

    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, params)
    write_config(cfg, out / "config.ini")
    return TrainResult(params=params, rows=rows,
                       checkpoint_path=ckpt_path, metrics_path=metrics_path)
