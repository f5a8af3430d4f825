"""Command-line front end.

Commands: train, eval, probe, flow-labels, gen-data, gradcheck.  Exit
codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import secrets
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import flow as F
from . import model as M
from . import report as R
from . import train as TR
from . import verify
from .checkpoint import load_checkpoint
from .config import load_config
from .errors import (ConfigError, DeterminismError, InputError, NumericError,
                     ShapeError, TapeError)
from .tensor import Tensor


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so usage mistakes map to exit code 1."""

    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="temporalab",
                     description="temporal self-supervision laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, config=True, checkpoint=False, out=True, seed=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=True, help="INI run configuration")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="trained weights")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="rebase all seed streams on this value")
        p.add_argument("--deterministic", choices=("on", "off"), default="on",
                       help="'off' draws fresh entropy when --seed is absent")
        return p

    add("train", "train a model from a config")
    add("eval", "accuracy, gap, and confidence histogram for a checkpoint",
        checkpoint=True)
    add("probe", "per-block order probes over a frozen checkpoint",
        checkpoint=True)
    add("flow-labels", "precompute the flow-direction label cache", seed=False)
    add("gen-data", "materialize the configured dataset to containers", seed=False)
    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--out", required=False, default=None)
    p.add_argument("--deterministic", choices=("on", "off"), default="on")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config)
    seed = getattr(args, "seed", None)
    if seed is None and args.deterministic == "off":
        seed = secrets.randbits(30)
        print(f"deterministic off: drew seed {seed}")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _load_params(path):
    return {name: Tensor(arr) for name, arr in load_checkpoint(path).items()}


def _video_test_split(cfg):
    dcfg = TR.data_config(cfg)
    _, test_ds = D.make_splits(dcfg, cfg.seed_data)
    return test_ds.materialize()


def cmd_train(args):
    cfg = _resolve_config(args)
    result = TR.train(cfg, args.out, log=print)
    R.plot_metrics(result.rows, Path(args.out) / "metrics.png")
    last = result.rows[-1]
    print(f"done: checkpoint {result.checkpoint_path}, "
          f"final test accuracy {last['test_acc_original']:.1f}%")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_params(args.checkpoint)

    if cfg.mode == "video":
        frames, labels = _video_test_split(cfg)
        report = E.evaluate(params, cfg.model, frames, labels, cfg.seed_eval)
        hist = E.confidence_histogram(params, cfg.model, frames, cfg.seed_eval)
        E.write_report_csv(out / "report.csv", cfg.run_id, report)
        E.write_histogram_csv(out / "histogram.csv", hist)
        R.plot_histogram(hist, out / "histogram.png")
        print(f"top1 original {report.top1_original:.2f}% | "
              f"shuffled {report.top1_shuffled:.2f}% | gap {report.gap:+.2f}")
    else:
        icfg = TR.image_config(cfg)
        accs = {}
        for mode in D.MIX_MODES:
            _, test_ds = D.make_image_splits(icfg, cfg.seed_data, test_mode=mode)
            images, labels = test_ds.materialize()
            top1, _ = E.eval_accuracy(params, cfg.model, images[:, None], labels,
                                      shuffled=False, seed=cfg.seed_eval)
            accs[mode] = top1
        with open(out / "report.csv", "w", newline="") as fh:
            import csv
            writer = csv.writer(fh)
            writer.writerow(["run_id", "metric", "split", "value", "seed"])
            for mode, value in accs.items():
                writer.writerow([cfg.run_id, f"top1_{mode.lower()}", "test",
                                 "%.10g" % value, cfg.seed_eval])
        R.plot_mode_accuracies(accs, out / "modes.png")
        for mode, value in accs.items():
            print(f"top1 {mode}: {value:.2f}%")
    return 0


def cmd_probe(args):
    cfg = _resolve_config(args)
    if cfg.mode != "video":
        raise ConfigError("probe requires a video-mode config (frame order)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_params(args.checkpoint)

    dcfg = TR.data_config(cfg)
    temporal = [c for c in range(cfg.model.num_classes) if c < 8]
    if not temporal:
        raise ConfigError("no temporal classes in this taxonomy")
    train_ds, test_ds = D.make_splits(dcfg, cfg.seed_data, classes=temporal)
    train_frames, _ = train_ds.materialize()
    test_frames, _ = test_ds.materialize()
    train_frames = train_frames[:1000]

    probe = E.probe_blocks(params, cfg.model, train_frames, test_frames,
                           seed=cfg.seed_eval)
    E.write_probe_csv(out / "probe.csv", cfg.run_id, probe, cfg.seed_eval)
    R.plot_probe(probe, out / "probe.png", chance=100.0 / cfg.model.t)
    print("probe accuracy by block: "
          + ", ".join(f"{a:.1f}%" for a in probe.accuracies))
    return 0


def cmd_flow_labels(args):
    cfg = _resolve_config(args)
    if cfg.mode != "video":
        raise ConfigError("flow labels are only defined for video mode")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dcfg = TR.data_config(cfg)
    train_ds, _ = D.make_splits(dcfg, cfg.seed_data)
    frames, _ = train_ds.materialize()
    labels = TR.compute_flow_labels(frames, cfg, log=print)
    patch_grid = (cfg.model.patch[1], cfg.model.patch[2])
    F.save_label_cache(out / "flow_labels.bin", labels, cfg.tau,
                       cfg.flow_params, patch_grid)
    zero_frac = 100.0 * (labels == 0).mean()
    print(f"wrote {out / 'flow_labels.bin'} "
          f"({len(labels)} videos, {zero_frac:.1f}% below-threshold labels)")
    return 0


def cmd_gen_data(args):
    cfg = _resolve_config(args)
    if cfg.mode != "video":
        raise InputError("gen-data materializes video datasets; "
                         "image datasets are regenerated on the fly")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dcfg = TR.data_config(cfg)
    train_ds, test_ds = D.make_splits(dcfg, cfg.seed_data)
    for name, ds in (("train", train_ds), ("test", test_ds)):
        D.save_manifest(out / f"{name}_manifest.bin", ds, cfg.seed_data)
        frames, _ = ds.materialize()
        D.save_frames(out / f"{name}_frames.bin", frames)
        print(f"{name}: {len(ds)} samples -> {out}/{name}_frames.bin")
    return 0


def cmd_gradcheck(args):
    results = verify.gradcheck_losses()
    text = verify.format_report(results)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text + "\n")
    if all(r.passed for r in results):
        return 0
    raise NumericError("gradient check failed; see report above")


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "flow-labels": cmd_flow_labels,
    "gen-data": cmd_gen_data,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, DeterminismError, TapeError, ShapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
