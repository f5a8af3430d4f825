"""Run configuration: a flat INI file fully determines a training run.

Sections are [run], [model], [loss], [optim], [data], [flow], [seeds];
every key is validated against a schema, and unknown keys are an error
so typos cannot silently fall back to defaults.  Environment variables
are deliberately ignored.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError
from .flow import FarnebackParams
from .model import ModelConfig
from .selfsup import LossWeights

MODES = ("video", "image")
SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class RunConfig:
    run_id: str = "run"
    mode: str = "video"
    epochs: int = 30
    batch_size: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    schedule: str = "cosine"
    train_per_class: int = 250
    test_per_class: int = 60
    flow_params: FarnebackParams = field(default_factory=FarnebackParams)
    tau: float = 0.5
    seed_data: int = 0
    seed_init: int = 1
    seed_shuffle: int = 2
    seed_eval: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"optim.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("run.epochs and run.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        if self.tau <= 0:
            raise ConfigError(f"flow.tau must be positive, got {self.tau}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("data sizes must be >= 1")
        if self.mode == "image" and self.model.frames != 1:
            raise ConfigError("image mode requires a single-frame model (model.frames = 1)")

    def with_seed(self, seed):
        """Rebase all four seed streams on one integer."""
        return replace_seeds(self, seed, seed + 1, seed + 2, seed + 3)


def replace_seeds(cfg: RunConfig, data, init, shuffle, eval_):
    import dataclasses
    return dataclasses.replace(cfg, seed_data=data, seed_init=init,
                               seed_shuffle=shuffle, seed_eval=eval_)


def default_video_config(**overrides) -> RunConfig:
    return RunConfig(**overrides)


def default_image_config(**overrides) -> RunConfig:
    model = ModelConfig(frames=1, height=64, width=64, channels=3,
                        patch=(1, 16, 16), embed_dim=64, heads=4, depth=4,
                        attention_kind="divided", num_classes=9)
    base = dict(mode="image", model=model, train_per_class=100,
                test_per_class=40, loss_weights=LossWeights(flow=0.0))
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# INI <-> RunConfig
# ---------------------------------------------------------------------------

_SCHEMA = {
    "run": ("id", "mode", "epochs", "batch_size"),
    "model": ("frames", "height", "width", "channels", "patch_time",
              "patch_height", "patch_width", "embed_dim", "heads", "depth",
              "attention", "num_classes"),
    "loss": ("order", "debias", "flow"),
    "optim": ("lr", "beta1", "beta2", "weight_decay", "schedule"),
    "data": ("train_per_class", "test_per_class"),
    "flow": ("pyramid_scale", "levels", "window_size", "iterations",
             "poly_n", "poly_sigma", "tau"),
    "seeds": ("data", "init", "shuffle", "eval"),
}


def _parse(kind, section, key, raw):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}")


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")

    def get(section, key, kind, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            if kind is str:
                return raw
            return _parse(kind, section, key, raw)
        return default

    defaults = RunConfig()
    mode = get("run", "mode", str, defaults.mode)
    model_defaults = ModelConfig() if mode == "video" else default_image_config().model
    patch = (get("model", "patch_time", int, model_defaults.patch[0]),
             get("model", "patch_height", int, model_defaults.patch[1]),
             get("model", "patch_width", int, model_defaults.patch[2]))
    model = ModelConfig(
        frames=get("model", "frames", int, model_defaults.frames),
        height=get("model", "height", int, model_defaults.height),
        width=get("model", "width", int, model_defaults.width),
        channels=get("model", "channels", int, model_defaults.channels),
        patch=patch,
        embed_dim=get("model", "embed_dim", int, model_defaults.embed_dim),
        heads=get("model", "heads", int, model_defaults.heads),
        depth=get("model", "depth", int, model_defaults.depth),
        attention_kind=get("model", "attention", str, model_defaults.attention_kind),
        num_classes=get("model", "num_classes", int, model_defaults.num_classes),
    )
    weights = LossWeights(
        order=get("loss", "order", float, 1.0),
        debias=get("loss", "debias", float, 1.0),
        flow=get("loss", "flow", float, 0.0 if mode == "image" else 1.0),
    )
    fdefaults = FarnebackParams()
    flow_params = FarnebackParams(
        pyramid_scale=get("flow", "pyramid_scale", float, fdefaults.pyramid_scale),
        levels=get("flow", "levels", int, fdefaults.levels),
        window_size=get("flow", "window_size", int, fdefaults.window_size),
        iterations=get("flow", "iterations", int, fdefaults.iterations),
        poly_n=get("flow", "poly_n", int, fdefaults.poly_n),
        poly_sigma=get("flow", "poly_sigma", float, fdefaults.poly_sigma),
    )
    data_defaults = (defaults if mode == "video" else default_image_config())
    return RunConfig(
        run_id=get("run", "id", str, defaults.run_id),
        mode=mode,
        epochs=get("run", "epochs", int, defaults.epochs),
        batch_size=get("run", "batch_size", int, defaults.batch_size),
        model=model,
        loss_weights=weights,
        lr=get("optim", "lr", float, defaults.lr),
        beta1=get("optim", "beta1", float, defaults.beta1),
        beta2=get("optim", "beta2", float, defaults.beta2),
        weight_decay=get("optim", "weight_decay", float, defaults.weight_decay),
        schedule=get("optim", "schedule", str, defaults.schedule),
        train_per_class=get("data", "train_per_class", int, data_defaults.train_per_class),
        test_per_class=get("data", "test_per_class", int, data_defaults.test_per_class),
        flow_params=flow_params,
        tau=get("flow", "tau", float, defaults.tau),
        seed_data=get("seeds", "data", int, defaults.seed_data),
        seed_init=get("seeds", "init", int, defaults.seed_init),
        seed_shuffle=get("seeds", "shuffle", int, defaults.seed_shuffle),
        seed_eval=get("seeds", "eval", int, defaults.seed_eval),
    )


def write_config(cfg: RunConfig, path):
    """Serialize so that load_config(write_config(cfg)) == cfg."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"id": cfg.run_id, "mode": cfg.mode,
                     "epochs": str(cfg.epochs), "batch_size": str(cfg.batch_size)}
    m = cfg.model
    parser["model"] = {
        "frames": str(m.frames), "height": str(m.height), "width": str(m.width),
        "channels": str(m.channels), "patch_time": str(m.patch[0]),
        "patch_height": str(m.patch[1]), "patch_width": str(m.patch[2]),
        "embed_dim": str(m.embed_dim), "heads": str(m.heads),
        "depth": str(m.depth), "attention": m.attention_kind,
        "num_classes": str(m.num_classes),
    }
    parser["loss"] = {"order": repr(cfg.loss_weights.order),
                      "debias": repr(cfg.loss_weights.debias),
                      "flow": repr(cfg.loss_weights.flow)}
    parser["optim"] = {"lr": repr(cfg.lr), "beta1": repr(cfg.beta1),
                       "beta2": repr(cfg.beta2),
                       "weight_decay": repr(cfg.weight_decay),
                       "schedule": cfg.schedule}
    parser["data"] = {"train_per_class": str(cfg.train_per_class),
                      "test_per_class": str(cfg.test_per_class)}
    f = cfg.flow_params
    parser["flow"] = {"pyramid_scale": repr(f.pyramid_scale),
                      "levels": str(f.levels), "window_size": str(f.window_size),
                      "iterations": str(f.iterations), "poly_n": str(f.poly_n),
                      "poly_sigma": repr(f.poly_sigma), "tau": repr(cfg.tau)}
    parser["seeds"] = {"data": str(cfg.seed_data), "init": str(cfg.seed_init),
                       "shuffle": str(cfg.seed_shuffle), "eval": str(cfg.seed_eval)}
    with open(path, "w") as fh:
        parser.write(fh)
