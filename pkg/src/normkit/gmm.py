"""Diagonal-covariance Gaussian mixtures: densities, responsibilities, EM.

All densities are evaluated in log space; responsibilities are a softmax over
``log(weight) + log N(x | mean, var)`` with max subtraction, so points that
are hundreds of standard deviations from every component still produce a
valid distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "VAR_FLOOR",
    "GmmParams",
    "EmTrace",
    "log_component_density",
    "log_joint",
    "posterior",
    "log_likelihood",
    "kmeanspp_seed",
    "em_fit",
]

VAR_FLOOR = 1e-6
DEAD_MASS = 1e-12
LOG_2PI = math.log(2.0 * math.pi)
_CHUNK = 1 << 22


@dataclass
class GmmParams:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError(
                f"inconsistent shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}"
            )

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > tol:
            raise ValueError(f"weights not on the simplex: {self.weights}")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")

    def permuted(self, perm) -> "GmmParams":
        perm = np.asarray(perm)
        return GmmParams(self.weights[perm], self.means[perm], self.variances[perm])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmParams":
        params = cls(doc["weights"], doc["means"], doc["variances"])
        if params.k != doc["k"] or params.d != doc["d"]:
            raise ValueError("k/d fields disagree with array shapes")
        return params

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GmmParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EmTrace:
    """Mean log-likelihood per EM iteration (entry 0 is the seeded model).

    ``reseeds`` holds ``(iteration, component)`` pairs for components that
    collapsed and were re-seeded; the likelihood may drop at those points.
    """

    loglik: list[float] = field(default_factory=list)
    reseeds: list[tuple[int, int]] = field(default_factory=list)
    converged: bool = False

    def is_monotone(self, slack: float = 1e-8) -> bool:
        reseed_iters = {it for it, _ in self.reseeds}
        return all(
            b >= a - slack
            for i, (a, b) in enumerate(zip(self.loglik, self.loglik[1:]), start=1)
            if i not in reseed_iters
        )


def _check_dim(x: np.ndarray, params: GmmParams) -> None:
    if x.shape[-1] != params.d:
        raise ValueError(f"dimension mismatch: x has d={x.shape[-1]}, model has d={params.d}")


def log_component_density(x, params: GmmParams, k: int) -> float:
    """log N(x | mean_k, diag(var_k)) for a single d-vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_dim(x, params)
    if not 0 <= k < params.k:
        raise IndexError(f"component {k} out of range for K={params.k}")
    var = params.variances[k]
    diff = x - params.means[k]
    return float(-0.5 * (params.d * LOG_2PI + np.sum(np.log(var)) + np.sum(diff * diff / var)))


def log_joint(x, params: GmmParams) -> np.ndarray:
    """(n, K) matrix of log(weight_k) + log N(x_i | k)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_dim(x, params)
    inv = 1.0 / params.variances
    quad = np.empty((x.shape[0], params.k))
    step = max(1, _CHUNK // max(1, params.k * params.d))
    for s in range(0, x.shape[0], step):
        diff = x[s : s + step, None, :] - params.means[None]
        quad[s : s + step] = np.einsum("nkd,kd->nk", diff * diff, inv)
    const = params.d * LOG_2PI + np.sum(np.log(params.variances), axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    return logw - 0.5 * (const + quad)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def posterior(x, params: GmmParams) -> np.ndarray:
    """Responsibilities tau_k(x); a K-vector for one point or (n, K) for a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lj = log_joint(x, params)
    lj = lj - lj.max(axis=1, keepdims=True)
    tau = np.exp(lj)
    tau /= tau.sum(axis=1, keepdims=True)
    return tau[0] if single else tau


def log_likelihood(data, params: GmmParams) -> float:
    """Sum over points of log sum_k weight_k N(x_i | k)."""
    return float(np.sum(_logsumexp(log_joint(data, params), axis=1)))


def kmeanspp_seed(data, k: int, seed) -> np.ndarray:
    """Pick ``k`` initial means by D^2 weighting (k-means++)."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = data.shape[0]
    if k < 1:
        raise ValueError("K must be >= 1")
    if n < k:
        raise ValueError(f"need at least K={k} points, got {n}")
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(n))]
    d2 = np.sum((data - data[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # fewer distinct points than k
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((data - data[nxt]) ** 2, axis=1))
    return data[idx].copy()


def _m_step(data, resp, var_floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.where(nk > DEAD_MASS, nk, 1.0)[:, None]
    means = resp.T @ data / safe
    variances = np.empty_like(means)
    for j in range(means.shape[0]):
        variances[j] = resp[:, j] @ (data - means[j]) ** 2 / safe[j]
    variances = np.maximum(variances, var_floor)
    return weights, means, variances, nk


def em_fit(
    data,
    k: int,
    seed=0,
    max_iter: int = 100,
    tol: float = 1e-5,
    var_floor: float = VAR_FLOOR,
) -> tuple[GmmParams, EmTrace]:
    """Fit a diagonal GMM by EM, seeded with k-means++.

    Stops once the mean log-likelihood improves by less than ``tol`` or after
    ``max_iter`` iterations.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    if k < 1:
        raise ValueError("K must be >= 1")
    if n < k:
        raise ValueError(f"need at least K={k} points, got {n}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    global_var = np.maximum(data.var(axis=0), var_floor)
    params = GmmParams(
        np.full(k, 1.0 / k),
        kmeanspp_seed(data, k, seed),
        np.tile(global_var, (k, 1)),
    )
    trace = EmTrace()

    lj = log_joint(data, params)
    lse = _logsumexp(lj, axis=1)
    trace.loglik.append(float(lse.mean()))
    for it in range(1, max_iter + 1):
        resp = np.exp(lj - lse[:, None])
        weights, means, variances, nk = _m_step(data, resp, var_floor)
        for j in np.flatnonzero(nk <= DEAD_MASS):
            # re-seed a collapsed component at the worst-explained point
            d2 = np.min(
                np.sum((data[:, None, :] - np.delete(means, j, axis=0)[None]) ** 2, axis=2),
                axis=1,
            ) if k > 1 else np.zeros(n)
            means[j] = data[int(np.argmax(d2))]
            variances[j] = global_var
            weights[j] = 1.0 / k
            trace.reseeds.append((it, int(j)))
        weights = weights / weights.sum()
        params = GmmParams(weights, means, variances)
        lj = log_joint(data, params)
        lse = _logsumexp(lj, axis=1)
        trace.loglik.append(float(lse.mean()))
        if trace.loglik[-1] - trace.loglik[-2] < tol and not (trace.reseeds and trace.reseeds[-1][0] == it):
            trace.converged = True
            break
    return params, trace
