"""Turn an :class:`ExperimentConfig` into data, a network and a finished run directory."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import (
    DataError,
    LabeledDataset,
    find_cifar10,
    find_mnist,
    load_cifar10_binary,
    make_domain_pair,
    stratified_indices,
    synthetic_mixture,
)
from .layers import UAN, Network, build_mlp, build_shallow_cnn
from .train import CsvTelemetrySink, OptimizerState, evaluate, make_schedule, train_loop


@dataclass
class PreparedData:
    train: LabeledDataset
    val: LabeledDataset
    label_mask: np.ndarray | None = None  # per training sample: does its label enter the loss


def _maybe_subset(ds: LabeledDataset, n: int, seed) -> LabeledDataset:
    if n <= 0 or n >= len(ds):
        return ds
    return ds.stratified_subset(n, seed)


def _holdout(ds: LabeledDataset, fraction: float, seed, key: np.ndarray | None = None):
    key = ds.labels if key is None else key
    val_idx = stratified_indices(key, int(round(fraction * len(ds))), int(key.max()) + 1, seed)
    train_idx = np.setdiff1d(np.arange(len(ds)), val_idx)
    return ds.subset(train_idx), ds.subset(val_idx)


def _mnist_split(root, spec):
    train = find_mnist(root, "train")
    try:
        val = find_mnist(root, "test")
    except DataError:
        train = _maybe_subset(train, spec.subset, spec.seed)
        return _holdout(train, spec.val_fraction, spec.seed + 1)
    return _maybe_subset(train, spec.subset, spec.seed), val


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load or generate the train/validation sets named by ``cfg.dataset``."""
    spec = cfg.dataset
    root = spec.root or None
    if spec.name == "synthetic":
        train = synthetic_mixture(spec.n, spec.d, spec.k_true, spec.separation, spec.seed, spec.sigma)
        val = synthetic_mixture(spec.n_val, spec.d, spec.k_true, spec.separation, spec.seed + 1, spec.sigma)
        return PreparedData(train, val)
    if spec.name == "cifar10":
        train_paths, test_paths = find_cifar10(root)
        train = _maybe_subset(load_cifar10_binary(train_paths), spec.subset, spec.seed)
        val = _maybe_subset(load_cifar10_binary(test_paths), spec.val_subset, spec.seed + 1)
        return PreparedData(train, val)
    if spec.name == "mnist":
        train, val = _mnist_split(root, spec)
        return PreparedData(train, _maybe_subset(val, spec.val_subset, spec.seed + 1))
    # mnist-domains: one pool of MNIST images, part of it transformed into the target domain
    source = _maybe_subset(find_mnist(root, "train"), spec.subset, spec.seed)
    pair = make_domain_pair(source, spec.transform, spec.seed, spec.target_fraction)
    train, val = _holdout(pair, spec.val_fraction, spec.seed + 1, key=pair.labels + pair.class_count * pair.domains)
    rng = np.random.default_rng(spec.seed + 2)
    labeled = (train.domains == 0) | (rng.random(len(train)) < spec.target_labeled_fraction)
    return PreparedData(train, val, labeled)


def build_network(cfg: ExperimentConfig, sample_shape, num_classes: int) -> Network:
    n, m = cfg.norm, cfg.model
    common = dict(eps=n.epsilon, uan_mode=n.uan_mode, uan_momentum=n.momentum, bn_momentum=n.bn_momentum,
                  affine=n.affine, groups=n.groups, seed=cfg.output.seed)
    if m.kind == "shallow-cnn":
        c, h, w = sample_shape
        if h != w:
            raise DataError(f"shallow-cnn expects square images, got {h}x{w}")
        return build_shallow_cnn(num_classes, n.kind, n.k, in_channels=c, input_hw=h,
                                 widths=tuple(m.widths), pool_after=tuple(m.pool_after), **common)
    return build_mlp(int(np.prod(sample_shape)), num_classes, tuple(m.hidden), n.kind, n.k,
                     input_norm=m.input_norm, input_shape=sample_shape, **common)


def build_optimizer(cfg: ExperimentConfig) -> OptimizerState:
    o = cfg.optimizer
    if o.kind == "adamw":
        return OptimizerState.adamw(o.lr, tuple(o.betas), o.eps, o.weight_decay)
    return OptimizerState.sgd(o.lr, o.momentum, o.nesterov, o.weight_decay)


def _norm_report(net: Network) -> list[dict]:
    out = []
    for i, layer in enumerate(net.layers):
        if layer not in net.norm_layers():
            continue
        entry = {"index": i, "type": type(layer).__name__, **layer.config()}
        if isinstance(layer, UAN):
            entry["mode"] = layer.state.mode
            entry["momentum"] = layer.state.momentum
            entry["trainable_parameters"] = layer.state.parameter_count()
        out.append(entry)
    return out


def _finite(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train per ``cfg`` and write config_resolved.json, metrics.csv, summary.json and checkpoint/.

    Raises :class:`DataError` when the dataset cannot be loaded.
    """
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    (out / "config_resolved.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")

    data = prepare_data(cfg)
    net = build_network(cfg, data.train.sample_shape, data.train.class_count)
    opt = build_optimizer(cfg)
    o = cfg.optimizer
    steps = len(data.train) // o.batch_size
    schedule = make_schedule(o.schedule, o.lr, o.epochs, max(steps, 1))
    mask = data.label_mask
    start = time.perf_counter()
    with CsvTelemetrySink(out / "metrics.csv") as sink:
        net, history = train_loop(
            net, data.train, data.val, opt, schedule, epochs=o.epochs, batch_size=o.batch_size,
            seed=cfg.output.seed, sink=sink,
            monitor_layer=None if cfg.output.monitor_layer < 0 else cfg.output.monitor_layer,
            loss_mask=None if mask is None else (lambda idx: mask[idx]),
        )
    wall = time.perf_counter() - start
    net.save(out / "checkpoint")

    summary = {
        "normkit_version": __version__,
        "epochs": o.epochs,
        "wall_clock_seconds": wall,
        "train_size": len(data.train),
        "val_size": len(data.val),
        "parameter_count": net.parameter_count(),
        "norm": {
            "kind": cfg.norm.kind, "k": cfg.norm.k, "epsilon": cfg.norm.epsilon,
            "uan_mode": cfg.norm.uan_mode, "momentum": cfg.norm.momentum, "affine": cfg.norm.affine,
        },
        "norm_layers": _norm_report(net),
        "final": {k: _finite(v) for k, v in asdict(history[-1]).items()} if history else None,
        "checksum": net.checksum(),
    }
    if data.val.domains is not None:
        summary["val_acc_by_domain"] = {
            str(d): evaluate(net, data.val.domain(d)).accuracy for d in np.unique(data.val.domains).tolist()
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if cfg.output.plot:
        from .plotting import plot_run

        plot_run(out / "metrics.csv", out)
    return summary
