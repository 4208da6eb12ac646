"""PNG figures rendered from the CSV outputs (loss/accuracy curves, gradient variance).

Only used when a run asks for ``--plot``; the CSV files stay the primary record.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import read_telemetry  # noqa: E402


def plot_run(metrics_csv, out_dir) -> list[Path]:
    """Write ``curves.png`` and ``gradvar.png`` for one run; returns the paths."""
    records = read_telemetry(metrics_csv)
    out_dir = Path(out_dir)
    epochs = [r.epoch for r in records]

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r.train_loss for r in records], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in records], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [r.val_acc for r in records], label="accuracy")
    ax_acc.plot(epochs, [r.val_f1 for r in records], label="macro F1")
    ax_acc.set_xlabel("epoch")
    ax_acc.legend()
    fig.tight_layout()
    curves = out_dir / "curves.png"
    fig.savefig(curves, dpi=100)
    plt.close(fig)

    gradvar = out_dir / "gradvar.png"
    _gradvar_figure({"run": records}, gradvar)
    return [curves, gradvar]


def _gradvar_figure(series: dict, path: Path) -> None:
    fig, (ax_max, ax_mean) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, records in series.items():
        epochs = [r.epoch for r in records]
        ax_max.plot(epochs, [r.gradvar_max for r in records], label=label)
        ax_mean.plot(epochs, [r.gradvar_mean for r in records], label=label)
    for ax, title in ((ax_max, "max gradient variance"), (ax_mean, "mean gradient variance")):
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_compare(long_csv, out_dir) -> list[Path]:
    """Seed-averaged validation accuracy and gradient-variance curves per norm kind."""
    acc = defaultdict(lambda: defaultdict(list))
    gmax = defaultdict(lambda: defaultdict(list))
    with open(long_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            label = f"{row['norm_kind']} lr={row['lr']}"
            epoch = int(row["epoch"])
            acc[label][epoch].append(float(row["val_acc"]))
            gmax[label][epoch].append(float(row["gradvar_max"]))
    out_dir = Path(out_dir)

    fig, (ax_err, ax_var) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label in sorted(acc):
        epochs = sorted(acc[label])
        ax_err.plot(epochs, [1.0 - sum(acc[label][e]) / len(acc[label][e]) for e in epochs], label=label)
        ax_var.plot(epochs, [sum(gmax[label][e]) / len(gmax[label][e]) for e in epochs], label=label)
    ax_err.set_title("validation error (seed mean)")
    ax_var.set_title("max gradient variance (seed mean)")
    ax_var.set_yscale("log")
    for ax in (ax_err, ax_var):
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    path = out_dir / "compare.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]


def plot_trace(trace_csv, out_dir) -> list[Path]:
    """EM mean log-likelihood per iteration; re-seed iterations are marked."""
    its, ll, marks = [], [], []
    with open(trace_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            its.append(int(row["iteration"]))
            ll.append(float(row["mean_loglik"]))
            if row["reseed"] == "1":
                marks.append(len(its) - 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, ll, marker=".")
    if marks:
        ax.plot([its[i] for i in marks], [ll[i] for i in marks], "rx", label="re-seed")
        ax.legend()
    ax.set_xlabel("EM iteration")
    ax.set_ylabel("mean log-likelihood")
    fig.tight_layout()
    path = Path(out_dir) / "trace.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]
