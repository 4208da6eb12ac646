"""``normkit`` command line: train, gmm-fit, gradcheck, compare.

Exit codes: 0 success, 1 check or experiment failure, 2 config error, 3 data error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, synthetic_mixture

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
COMPARE_COLUMNS = [
    "norm_kind", "lr", "seed", "epoch", "val_acc", "gradvar_max", "gradvar_mean",
    "train_loss", "val_loss", "val_prec", "val_rec", "val_f1", "config",
]

log = logging.getLogger("normkit")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .experiment import run_experiment

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.output.seed = args.seed
        if args.out:
            cfg.output.dir = args.out
        if args.plot:
            cfg.output.plot = True
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        summary = run_experiment(cfg)
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    final = summary["final"] or {}
    print(f"done in {summary['wall_clock_seconds']:.1f}s; final val_acc={final.get('val_acc')} -> {cfg.output.dir}")
    return EXIT_OK


# ----------------------------------------------------------------- gmm-fit


def _parse_synthetic(text: str) -> dict:
    spec = {"n": 600, "d": 2, "k": 3, "separation": 10.0, "sigma": 1.0, "seed": 0}
    for part in filter(None, text.split(",")):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in spec or not value:
            raise ConfigError(f"bad synthetic spec entry {part!r}; keys are {sorted(spec)}")
        try:
            spec[key] = type(spec[key])(value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return spec


def _load_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p} not found")
    try:
        data = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{p}: {exc}") from None
    data = np.asarray(data, dtype=np.float64)
    return data.reshape(len(data), -1)


def cmd_gmm_fit(args) -> int:
    from .gmm import em_fit

    out = Path(args.out)
    try:
        if (args.data is None) == (args.synthetic is None):
            raise ConfigError("give exactly one of --data or --synthetic")
        synth = _parse_synthetic(args.synthetic) if args.synthetic is not None else None
        if args.k < 1:
            raise ConfigError("--k must be >= 1")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"data": args.data, "synthetic": synth, "k": args.k, "seed": args.seed,
                "max_iter": args.max_iter, "tol": args.tol}
    _write_json(out / "config_resolved.json", resolved)
    try:
        if synth is not None:
            ds = synthetic_mixture(synth["n"], synth["d"], synth["k"], synth["separation"], synth["seed"], synth["sigma"])
            data = ds.images.reshape(len(ds), -1)
        else:
            data = _load_matrix(args.data)
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    if len(data) < args.k:
        log.error("need at least K=%d points, got %d", args.k, len(data))
        return EXIT_DATA
    params, trace = em_fit(data, args.k, seed=args.seed, max_iter=args.max_iter, tol=args.tol)
    params.save(out / "gmm.json")
    reseeded = {it for it, _ in trace.reseeds}
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean_loglik", "reseed"])
        for i, ll in enumerate(trace.loglik):
            w.writerow([i, repr(ll), int(i in reseeded)])
    if args.plot:
        from .plotting import plot_trace

        plot_trace(out / "trace.csv", out)
    print(f"K={params.k} d={params.d} iterations={len(trace.loglik) - 1} converged={trace.converged} "
          f"final mean loglik={trace.loglik[-1]:.6f} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config_resolved.json", {
        "scope": args.scope, "seed": args.seed, "cases": args.cases, "h": gradcheck.H,
        "tol_simple": gradcheck.TOL_SIMPLE, "tol_mixture": gradcheck.TOL_MIXTURE,
    })
    results = gradcheck.run(args.scope, cases=args.cases, seed=args.seed)
    print(gradcheck.format_report(results))
    with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["op", "quantity", "max_rel_error", "tol", "cases", "passed"])
        for r in results:
            w.writerow([r.op, r.quantity, repr(r.max_rel_error), r.tol, r.cases, int(r.passed)])
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.op} {r.quantity}: {r.max_rel_error:.3e} > {r.tol:.0e}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# ----------------------------------------------------------------- compare


def _compare_job(cfg: ExperimentConfig, out_dir: str):
    from .experiment import run_experiment

    try:
        run_experiment(cfg, out_dir)
        return None
    except Exception as exc:  # keep going; the aggregator reports it
        return f"{type(exc).__name__}: {exc}"


def _summarize(rows: list[dict], groups: dict) -> dict:
    summary = {}
    for label, runs in groups.items():
        finals = {}
        for name, seed in runs:
            mine = [r for r in rows if r["config"] == name and r["seed"] == seed]
            if mine:
                finals[seed] = mine[-1]
        entry = {"runs": len(runs), "completed": len(finals)}
        for key in ("val_acc", "val_f1", "gradvar_max", "gradvar_mean"):
            vals = np.array([f[key] for f in finals.values()], dtype=np.float64)
            entry[f"final_{key}_mean"] = float(vals.mean()) if vals.size else None
            entry[f"final_{key}_std"] = float(vals.std()) if vals.size else None
        entry["final_val_acc_by_seed"] = {str(s): f["val_acc"] for s, f in finals.items()}
        summary[label] = entry
    return summary


def cmd_compare(args) -> int:
    out = Path(args.out)
    try:
        configs = [(Path(p).stem, load_config(p)) for p in args.configs]
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    names = [n for n, _ in configs]
    if len(set(names)) != len(names):
        log.error("config error: config file names must be distinct")
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for name, cfg in configs:
        for seed in args.seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg.output.seed = seed
            run_cfg.output.dir = str(out / f"{name}-seed{seed}")
            jobs.append((name, seed, run_cfg))
    _write_json(out / "config_resolved.json", {
        "seeds": args.seeds, "workers": args.workers,
        "runs": [{"config": n, "seed": s, "resolved": c.to_dict()} for n, s, c in jobs],
    })

    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            errors = list(pool.map(_compare_job, [c for _, _, c in jobs], [c.output.dir for _, _, c in jobs]))
    else:
        errors = [_compare_job(c, c.output.dir) for _, _, c in jobs]

    from .train import read_telemetry

    rows, failures = [], []
    for (name, seed, cfg), err in zip(jobs, errors):
        if err is not None:
            failures.append({"config": name, "seed": seed, "error": err})
            log.error("run %s seed %d failed: %s", name, seed, err)
            continue
        for rec in read_telemetry(Path(cfg.output.dir) / "metrics.csv"):
            row = {"norm_kind": cfg.norm.kind, "lr": cfg.optimizer.lr, "seed": seed, "config": name}
            row.update({k: getattr(rec, k) for k in COMPARE_COLUMNS if hasattr(rec, k)})
            rows.append(row)
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    groups: dict = {}
    kinds_lrs = {(c.norm.kind, c.optimizer.lr) for _, c in configs}
    kinds = [k for k, _ in kinds_lrs]
    for name, cfg in configs:
        label = cfg.norm.kind if kinds.count(cfg.norm.kind) == 1 else f"{cfg.norm.kind}@lr={cfg.optimizer.lr!r}"
        groups.setdefault(label, []).extend((name, s) for s in args.seeds)
    _write_json(out / "summary.json", {"by_kind": _summarize(rows, groups), "failures": failures})
    if args.plot and rows:
        from .plotting import plot_compare

        plot_compare(out / "compare.csv", out)
    print(f"{len(jobs) - len(failures)}/{len(jobs)} runs completed -> {out}")
    return EXIT_FAIL if failures else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normkit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"normkit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="override output.seed")
    p.add_argument("--out", help="override output.dir")
    p.add_argument("--plot", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gmm-fit", help="fit a diagonal GMM by EM")
    p.add_argument("--data", help=".npy, .csv or whitespace-separated matrix, one row per point")
    p.add_argument("--synthetic", help="e.g. n=600,d=2,k=3,separation=10,sigma=1,seed=0")
    p.add_argument("--k", type=int, required=True, help="number of components")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", default="runs/gmm")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_gmm_fit)

    p = sub.add_parser("gradcheck", help="compare every backward with finite differences")
    p.add_argument("--scope", choices=("norm-layers", "full-network"), default="norm-layers")
    p.add_argument("--seed", type=int, default=0, help="first case seed")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--out", default="runs/gradcheck")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="run configs x seeds and aggregate")
    p.add_argument("configs", nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--workers", type=int, default=1, help="parallel processes (runs stay deterministic)")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
