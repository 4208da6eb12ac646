"""Experiment configuration files.

A config is a TOML file with up to five tables. Every key has a default, so
an empty file is valid; unknown tables or keys are rejected::

    [dataset]   name, root, subset, val_subset, val_fraction, seed,
                n, n_val, d, k_true, separation, sigma,
                transform, target_fraction, target_labeled_fraction
    [model]     kind, widths, pool_after, hidden, input_norm
    [norm]      kind, k, epsilon, uan_mode, momentum, bn_momentum, affine, groups
    [optimizer] kind, lr, weight_decay, betas, eps, momentum, nesterov,
                schedule, epochs, batch_size
    [output]    dir, seed, monitor_layer, plot

See ``FIELD_DOCS`` for what each key means.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .layers import NORM_KINDS
from .norm.uan import MODES
from .train import SCHEDULES

DATASETS = ("synthetic", "mnist", "cifar10", "mnist-domains")
MODELS = ("shallow-cnn", "mlp")
OPTIMIZERS = ("adamw", "sgd")


class ConfigError(ValueError):
    """Unparseable file, unknown key, or out-of-range value."""


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    root: str = ""
    subset: int = 0
    val_subset: int = 0
    val_fraction: float = 0.2
    seed: int = 0
    n: int = 600
    n_val: int = 300
    d: int = 8
    k_true: int = 3
    separation: float = 10.0
    sigma: float = 1.0
    transform: str = "invert+noise(0.3)"
    target_fraction: float = 0.5
    target_labeled_fraction: float = 0.05


@dataclass
class ModelSpec:
    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [32, 32, 64, 64])
    pool_after: list = field(default_factory=lambda: [2, 4])
    hidden: list = field(default_factory=lambda: [64])
    input_norm: bool = False


@dataclass
class NormSpec:
    kind: str = "bn"
    k: int = 3
    epsilon: float = 1e-5
    uan_mode: str = "moving_average"
    momentum: float = 0.9
    bn_momentum: float = 0.1
    affine: bool = False
    groups: int = 2


@dataclass
class OptimizerSpec:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    momentum: float = 0.9
    nesterov: bool = False
    schedule: str = "constant"
    epochs: int = 20
    batch_size: int = 128


@dataclass
class OutputSpec:
    dir: str = "runs/default"
    seed: int = 0
    monitor_layer: int = -1
    plot: bool = False


FIELD_DOCS = {
    "dataset.name": f"one of {DATASETS}",
    "dataset.root": "dataset directory; empty means $NORMKIT_DATA_DIR, else ./data",
    "dataset.subset": "stratified training subset size; 0 keeps everything",
    "dataset.val_subset": "stratified validation subset size; 0 keeps everything",
    "dataset.val_fraction": "share held out for validation when the source has no test split",
    "dataset.seed": "seed for subsetting, synthetic draws and domain transforms",
    "dataset.n": "synthetic: training samples",
    "dataset.n_val": "synthetic: validation samples",
    "dataset.d": "synthetic: feature dimension",
    "dataset.k_true": "synthetic: number of classes / generating clusters",
    "dataset.separation": "synthetic: minimum distance between class means",
    "dataset.sigma": "synthetic: per-class standard deviation",
    "dataset.transform": "mnist-domains: target transform, e.g. invert+noise(0.3)",
    "dataset.target_fraction": "mnist-domains: share of images moved to the target domain",
    "dataset.target_labeled_fraction": "mnist-domains: share of target training labels used in the loss",
    "model.kind": f"one of {MODELS}",
    "model.widths": "shallow-cnn: output channels of the conv blocks",
    "model.pool_after": "shallow-cnn: 1-based block indices followed by 2x2 max pooling",
    "model.hidden": "mlp: hidden layer widths",
    "model.input_norm": "mlp: put the normalization on the input instead of the hidden layers",
    "norm.kind": f"one of {NORM_KINDS}",
    "norm.k": "mixture components for mn/uan",
    "norm.epsilon": "variance stabilizer",
    "norm.uan_mode": f"one of {MODES}",
    "norm.momentum": "uan moving-average momentum m",
    "norm.bn_momentum": "running-statistics momentum for bn and mn",
    "norm.affine": "learn gamma/beta after mn/uan",
    "norm.groups": "gn group count",
    "optimizer.kind": f"one of {OPTIMIZERS}",
    "optimizer.lr": "initial learning rate",
    "optimizer.weight_decay": "decoupled (adamw) or L2 (sgd) decay on weight tensors",
    "optimizer.betas": "adamw moment decay rates",
    "optimizer.eps": "adamw denominator epsilon",
    "optimizer.momentum": "sgd momentum",
    "optimizer.nesterov": "sgd Nesterov update",
    "optimizer.schedule": f"one of {SCHEDULES}",
    "optimizer.epochs": "training epochs",
    "optimizer.batch_size": "mini-batch size",
    "output.dir": "run directory (created)",
    "output.seed": "seed for weight init, shuffling and cluster init",
    "output.monitor_layer": "layer index whose weight-gradient variance is logged; -1 picks the first conv/dense",
    "output.plot": "also render PNG figures next to the CSV output",
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    norm: NormSpec = field(default_factory=NormSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        d, m, n, o = self.dataset, self.model, self.norm, self.optimizer
        checks = [
            (d.name in DATASETS, f"dataset.name must be one of {DATASETS}"),
            (m.kind in MODELS, f"model.kind must be one of {MODELS}"),
            (n.kind in NORM_KINDS, f"norm.kind must be one of {NORM_KINDS}"),
            (n.uan_mode in MODES, f"norm.uan_mode must be one of {MODES}"),
            (o.kind in OPTIMIZERS, f"optimizer.kind must be one of {OPTIMIZERS}"),
            (o.schedule in SCHEDULES, f"optimizer.schedule must be one of {SCHEDULES}"),
            (n.k >= 1, "norm.k must be >= 1"),
            (n.epsilon >= 0, "norm.epsilon must be >= 0"),
            (0 <= n.momentum <= 1, "norm.momentum must lie in [0, 1]"),
            (0 <= n.bn_momentum <= 1, "norm.bn_momentum must lie in [0, 1]"),
            (n.groups >= 1, "norm.groups must be >= 1"),
            (o.lr >= 0, "optimizer.lr must be >= 0"),
            (o.epochs >= 0, "optimizer.epochs must be >= 0"),
            (o.batch_size >= 1, "optimizer.batch_size must be >= 1"),
            (len(o.betas) == 2 and all(0 <= b < 1 for b in o.betas), "optimizer.betas must be two values in [0, 1)"),
            (d.subset >= 0 and d.val_subset >= 0, "dataset subset sizes must be >= 0"),
            (0 < d.val_fraction < 1, "dataset.val_fraction must lie in (0, 1)"),
            (0 < d.target_fraction < 1, "dataset.target_fraction must lie in (0, 1)"),
            (0 <= d.target_labeled_fraction <= 1, "dataset.target_labeled_fraction must lie in [0, 1]"),
            (d.k_true >= 2 and d.d >= 1 and d.n >= 0 and d.n_val >= 0, "bad synthetic sizes"),
            (len(m.widths) >= 1 and all(w >= 1 for w in m.widths), "model.widths must be positive"),
            (all(w >= 1 for w in m.hidden), "model.hidden must be positive"),
            (all(1 <= p <= len(m.widths) for p in m.pool_after), "model.pool_after indices out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if m.kind == "shallow-cnn" and d.name == "synthetic":
            raise ConfigError("shallow-cnn needs image data; use model.kind = 'mlp' for synthetic")
        if m.kind == "shallow-cnn" and len(m.widths) != 4:
            raise ConfigError("model.widths must list four conv widths for shallow-cnn")
        try:
            from .data import parse_transform

            parse_transform(d.transform)
        except ValueError as exc:
            raise ConfigError(f"dataset.transform: {exc}") from None
        return self


_SPEC_TYPES = {
    "dataset": DatasetSpec, "model": ModelSpec, "norm": NormSpec,
    "optimizer": OptimizerSpec, "output": OutputSpec,
}


def _coerce(where: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build and validate a config; every missing key takes its default."""
    cfg = ExperimentConfig()
    for section, table in doc.items():
        if section not in _SPEC_TYPES:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(_SPEC_TYPES)}")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        spec = getattr(cfg, section)
        known = {f.name for f in fields(spec)}
        for key, value in table.items():
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(spec, key, _coerce(f"{section}.{key}", getattr(spec, key), value))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


def bundled_config(name: str) -> Path:
    """Path of a config shipped inside the package (``configs/<name>``)."""
    return Path(__file__).parent / "configs" / name
