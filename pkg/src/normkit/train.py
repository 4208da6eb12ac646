"""Optimizers, learning-rate schedules, metrics and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .data import LabeledDataset, batch_iter
from .layers import Network, softmax_cross_entropy

# ----------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    """Optimizer kind, hyperparameters and per-parameter slots."""

    kind: str  # "adamw" or "sgd"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 0.0
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    @classmethod
    def adamw(cls, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01) -> "OptimizerState":
        return cls("adamw", lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    @classmethod
    def sgd(cls, lr=0.1, momentum=0.9, nesterov=False, weight_decay=0.0) -> "OptimizerState":
        return cls("sgd", lr=lr, momentum=momentum, nesterov=nesterov, weight_decay=weight_decay)


def _slot(state: OptimizerState, name: str, key: str, like: np.ndarray) -> np.ndarray:
    slots = state.slots.setdefault(name, {})
    if key not in slots:
        slots[key] = np.zeros_like(like)
    elif slots[key].shape != like.shape:
        raise ValueError(f"slot {name}/{key} has shape {slots[key].shape}, parameter has {like.shape}")
    return slots[key]


def _check(params, grads):
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for {name}")
        if grads[name].shape != p.shape:
            raise ValueError(f"{name}: gradient shape {grads[name].shape} != parameter shape {p.shape}")


def _decays(name: str) -> bool:
    # decay applies to conv/dense kernels only, never to biases or normalization parameters
    return name.endswith(".weight")


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> dict:
    """One AdamW update, in place. Weight decay is decoupled from the moments."""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        m = _slot(state, name, "m", p)
        v = _slot(state, name, "v", p)
        if state.weight_decay and _decays(name):
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None) -> dict:
    """Heavy-ball or Nesterov momentum SGD with L2 weight decay, in place."""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    state.step_count += 1
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and _decays(name):
            g = g + state.weight_decay * p
        buf = _slot(state, name, "momentum", p)
        buf *= state.momentum
        buf += g
        update = g + state.momentum * buf if state.nesterov else buf
        p -= lr * update
    return params


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float | None = None) -> dict:
    if state.kind == "adamw":
        return adamw_step(params, grads, state, lr)
    return sgd_momentum_step(params, grads, state, lr)


# ------------------------------------------------------------------ schedules


def step_schedule(lr0: float, epoch: int, total: int) -> float:
    """Divide by 10 from 50% of training and by 100 from 75%; boundaries take the lower rate."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch >= 0.75 * total:
        return lr0 / 100.0
    if epoch >= 0.5 * total:
        return lr0 / 10.0
    return lr0


def cosine_schedule(lr0: float, step: int, total_steps: int) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


SCHEDULES = ("constant", "step", "cosine")


def make_schedule(kind: str, lr0: float, epochs: int, steps_per_epoch: int) -> Callable[[int, int], float]:
    """Returns ``lr(epoch, global_step)``."""
    if kind == "constant":
        return lambda epoch, step: lr0
    if kind == "step":
        return lambda epoch, step: step_schedule(lr0, epoch, epochs)
    if kind == "cosine":
        total = max(1, epochs * steps_per_epoch)
        return lambda epoch, step: cosine_schedule(lr0, min(step, total), total)
    raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")


# -------------------------------------------------------------------- metrics


def grad_variance(grad: np.ndarray) -> float:
    """Population variance of all entries of one layer's gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size == 0:
        raise ValueError("empty gradient tensor")
    return float(np.mean((grad - grad.mean()) ** 2))


def classification_metrics(predictions, labels, num_classes: int) -> tuple[float, float, float, float]:
    """Accuracy and macro precision, recall and F1.

    Macro averages run over every class that occurs in ``labels`` or
    ``predictions``; an undefined per-class ratio (0/0) counts as 0.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("empty input")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, predictions), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_count = conf.sum(axis=0)
    true_count = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(true_count > 0, tp / true_count, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    seen = (pred_count + true_count) > 0
    accuracy = float(tp.sum() / labels.size)
    return accuracy, float(precision[seen].mean()), float(recall[seen].mean()), float(f1[seen].mean())


# -------------------------------------------------------------------- training


@dataclass
class TelemetryRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_prec: float
    val_rec: float
    val_f1: float
    gradvar_max: float
    gradvar_mean: float


CSV_HEADER = [f.name for f in fields(TelemetryRecord)]


class CsvTelemetrySink:
    """Writes one CSV row per epoch, flushing as it goes."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._last_epoch = 0

    def __call__(self, record: TelemetryRecord) -> None:
        if record.epoch != self._last_epoch + 1:
            raise ValueError(f"telemetry gap: epoch {record.epoch} after {self._last_epoch}")
        self._last_epoch = record.epoch
        self._writer.writerow([_fmt(v) for v in asdict(record).values()])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    predictions: np.ndarray


def evaluate(network: Network, dataset: LabeledDataset, batch_size: int = 256) -> EvalResult:
    """Inference-mode pass over ``dataset``; never changes network state."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    losses, preds = [], []
    for xb, yb in batch_iter(dataset, batch_size, seed=0, shuffle=False, train=False):
        logits = network.forward(xb, training=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        losses.append(loss * len(yb))
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds)
    acc, prec, rec, f1 = classification_metrics(pred, dataset.labels, dataset.class_count)
    return EvalResult(float(sum(losses) / len(dataset)), acc, prec, rec, f1, pred)


def check_uan_invariants(network: Network, tol: float = 1e-9) -> None:
    for layer in network.layers:
        if layer.kind == "uan":
            w = layer.state.weights
            if abs(w.sum() - 1.0) >= tol or np.any(w <= 0):
                raise AssertionError(f"UAN weights left the simplex: {w}")
            if not np.all(layer.state.variances > 0):
                raise AssertionError("UAN variance not positive")


def train_loop(
    network: Network,
    train_set: LabeledDataset,
    val_set: LabeledDataset | None,
    optimizer: OptimizerState,
    schedule: Callable[[int, int], float] | None = None,
    epochs: int = 1,
    batch_size: int = 128,
    seed: int = 0,
    sink: Callable[[TelemetryRecord], None] | None = None,
    monitor_layer: int | None = None,
    loss_mask: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[Network, list[TelemetryRecord]]:
    """Train ``network`` for ``epochs`` epochs and record per-epoch telemetry.

    Gradient variance is tracked on the ``weight`` gradient of layer
    ``monitor_layer`` (default: the first conv/dense layer). ``loss_mask``
    receives a batch's dataset indices and returns a boolean mask of the
    samples that contribute to the loss; the rest only flow forward.
    """
    if len(train_set) < batch_size:
        raise ValueError(f"training set ({len(train_set)}) smaller than one batch ({batch_size})")
    if schedule is None:
        schedule = lambda epoch, step: optimizer.lr  # noqa: E731
    if monitor_layer is None:
        trainable = network.trainable_layers()
        monitor_layer = trainable[0][0] if trainable else None
    history: list[TelemetryRecord] = []
    step = 0
    for epoch in range(epochs):
        lr = None
        losses, variances = [], []
        for xb, yb, idx in batch_iter(train_set, batch_size, seed=seed * 100003 + epoch,
                                      shuffle=True, train=True, with_index=True):
            lr = schedule(epoch, step)
            logits = network.forward(xb, training=True)
            if loss_mask is not None:
                keep = loss_mask(idx)
                dlogits = np.zeros_like(logits)
                if keep.any():
                    loss, dl = softmax_cross_entropy(logits[keep], yb[keep])
                    dlogits[keep] = dl
                else:
                    loss = None
            else:
                loss, dlogits = softmax_cross_entropy(logits, yb)
            network.backward(dlogits)
            params, grads = {}, {}
            for name, p, g in network.named_parameters():
                params[name], grads[name] = p, g
            optimizer_step(optimizer, params, grads, lr)
            network.after_batch()
            check_uan_invariants(network)
            if monitor_layer is not None:
                variances.append(grad_variance(network.layers[monitor_layer].grads["weight"]))
            if loss is not None:
                losses.append(loss)
            step += 1
        if val_set is not None and len(val_set):
            ev = evaluate(network, val_set, batch_size=max(batch_size, 256))
            val = (ev.loss, ev.accuracy, ev.precision, ev.recall, ev.f1)
        else:
            val = (math.nan,) * 5
        record = TelemetryRecord(
            epoch=epoch + 1,
            train_loss=float(np.mean(losses)) if losses else math.nan,
            val_loss=val[0], val_acc=val[1], val_prec=val[2], val_rec=val[3], val_f1=val[4],
            gradvar_max=float(max(variances)) if variances else 0.0,
            gradvar_mean=float(np.mean(variances)) if variances else 0.0,
        )
        history.append(record)
        if sink is not None:
            sink(record)
    return network, history


def read_telemetry(path) -> list[TelemetryRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected telemetry header {reader.fieldnames}")
        return [
            TelemetryRecord(int(r["epoch"]), *(float(r[k]) for k in CSV_HEADER[1:]))
            for r in reader
        ]
