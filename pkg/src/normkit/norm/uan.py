"""UAN: mixture normalization whose clusters are learned during training.

Cluster parameters are stored unconstrained: mixing weights as logits
(weights = softmax(logits)) and variances as log-variances
(variances = exp(log_vars)). Any gradient step or moving-average update
therefore keeps the weights on the simplex and the variances positive.

Clusters live in channel space (d = C). Responsibilities are computed for
each (sample, position) from its C-vector; the per-cluster statistics are
taken over (N, H, W) exactly as in :mod:`normkit.norm.mixture`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..gmm import GmmParams
from ..tensor import check_finite, from_positions, to_positions
from .batch import DEFAULT_EPS
from .context import NormCtx
from .mixture import mixture_infer, mixture_transform, mixture_transform_backward

MODES = ("weight", "moving_average")
_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class UanState:
    weight_logits: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    log_vars: np.ndarray  # (K, d)
    mode: str = "weight"
    momentum: float = 0.9
    epsilon: float = DEFAULT_EPS
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if (self.gamma is None) != (self.beta is None):
            raise ValueError("gamma and beta must be given together")

    @property
    def k(self) -> int:
        return self.weight_logits.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return _softmax(self.weight_logits)

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_vars)

    @property
    def affine(self) -> bool:
        return self.gamma is not None

    def as_gmm(self) -> GmmParams:
        return GmmParams(self.weights, self.means, self.variances)

    def parameter_count(self) -> int:
        n = self.weight_logits.size + self.means.size + self.log_vars.size
        if self.affine:
            n += self.gamma.size + self.beta.size
        return n

    def permuted(self, perm) -> "UanState":
        perm = np.asarray(perm)
        return UanState(
            self.weight_logits[perm].copy(), self.means[perm].copy(), self.log_vars[perm].copy(),
            self.mode, self.momentum, self.epsilon,
            None if self.gamma is None else self.gamma.copy(),
            None if self.beta is None else self.beta.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "d": self.d,
            "weight_logits": self.weight_logits.tolist(),
            "means": self.means.tolist(),
            "log_vars": self.log_vars.tolist(),
            "mode": self.mode,
            "momentum": self.momentum,
            "epsilon": self.epsilon,
            "gamma": None if self.gamma is None else self.gamma.tolist(),
            "beta": None if self.beta is None else self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "UanState":
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        state = cls(
            weight_logits=arr(doc["weight_logits"]),
            means=np.atleast_2d(arr(doc["means"])),
            log_vars=np.atleast_2d(arr(doc["log_vars"])),
            mode=doc["mode"],
            momentum=float(doc["momentum"]),
            epsilon=float(doc["epsilon"]),
            gamma=arr(doc.get("gamma")),
            beta=arr(doc.get("beta")),
        )
        if state.k != doc["k"] or state.d != doc["d"]:
            raise ValueError("k/d fields disagree with array shapes")
        return state

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "UanState":
        return cls.from_dict(json.loads(text))


def uan_init(
    k: int,
    d: int,
    seed=0,
    mode: str = "weight",
    momentum: float = 0.9,
    epsilon: float = DEFAULT_EPS,
    affine: bool = False,
) -> UanState:
    """Means ~ U[-1, 1], standard deviations ~ U[0.001, 0.01], raw weights ~ U[0.01, 0.99] normalized."""
    if k < 1 or d < 1:
        raise ValueError("need K >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(k, d))
    sigma = rng.uniform(0.001, 0.01, size=(k, d))
    raw = rng.uniform(0.01, 0.99, size=k)
    weights = raw / raw.sum()
    return UanState(
        weight_logits=np.log(weights),
        means=means,
        log_vars=2.0 * np.log(sigma),
        mode=mode,
        momentum=momentum,
        epsilon=epsilon,
        gamma=np.ones(d) if affine else None,
        beta=np.zeros(d) if affine else None,
    )


def responsibilities(X: np.ndarray, state: UanState) -> tuple[np.ndarray, np.ndarray]:
    """Posterior tau (P, K) under the state's current mixture, plus the (P, K, d) centered rows."""
    a = state.weight_logits
    log_w = a - (a.max() + np.log(np.sum(np.exp(a - a.max()))))
    diff = X[:, None, :] - state.means[None]
    inv = np.exp(-state.log_vars)
    logp = log_w[None] - 0.5 * (
        state.d * _LOG_2PI + state.log_vars.sum(axis=1)[None] + np.einsum("pkc,kc->pk", diff * diff, inv)
    )
    return _softmax(logp, axis=1), diff


def _check_input(x: np.ndarray, state: UanState) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != state.d:
        raise ValueError(f"expected (N, {state.d}, ...) input, got {x.shape}")
    return x


def _affine(y: np.ndarray, state: UanState) -> np.ndarray:
    if not state.affine:
        return y
    shape = (1, -1) + (1,) * (y.ndim - 2)
    return y * state.gamma.reshape(shape) + state.beta.reshape(shape)


def uan_forward_train(x: np.ndarray, state: UanState) -> tuple[np.ndarray, NormCtx]:
    """Training transform: responsibilities from the current clusters, statistics from the batch."""
    x = _check_input(x, state)
    X = to_positions(x)
    tau, diff = responsibilities(X, state)
    weights = state.weights
    yp, cache = mixture_transform(X, tau, weights, state.epsilon)
    y = from_positions(yp, x.shape)
    cache.update(
        shape=x.shape, diff=diff, inv_var=np.exp(-state.log_vars), y_pre=y,
        gamma=None if state.gamma is None else state.gamma.copy(),
    )
    return check_finite(_affine(y, state), "uan output"), NormCtx("uan", cache)


def uan_forward_infer(x: np.ndarray, state: UanState) -> np.ndarray:
    """Inference transform: sum_k tau_k / sqrt(weight_k) * (x - mean_k) / sqrt(var_k + eps)."""
    x = _check_input(x, state)
    X = to_positions(x)
    tau, _ = responsibilities(X, state)
    yp = mixture_infer(X, tau, state.weights, state.means, state.variances, state.epsilon)
    return check_finite(_affine(from_positions(yp, x.shape), state), "uan inference output")


@dataclass
class UanGrads:
    dx: np.ndarray
    d_weight_logits: np.ndarray
    d_means: np.ndarray
    d_log_vars: np.ndarray
    d_gamma: np.ndarray | None = None
    d_beta: np.ndarray | None = None


def uan_backward(ctx: NormCtx, dy: np.ndarray) -> UanGrads:
    """Exact gradients, including every path through the responsibilities."""
    c = ctx.take("uan")
    d_gamma = d_beta = None
    if c["gamma"] is not None:
        caxes = (0,) + tuple(range(2, dy.ndim))
        d_gamma = (dy * c["y_pre"]).sum(axis=caxes)
        d_beta = dy.sum(axis=caxes)
        dy = dy * c["gamma"].reshape((1, -1) + (1,) * (dy.ndim - 2))

    dX, dtau, dweights = mixture_transform_backward(c, to_positions(dy))
    tau, diff, inv = c["tau"], c["diff"], c["inv_var"]
    weights = c["weights"]

    # through tau = softmax_k(log_joint)
    dl = tau * (dtau - (tau * dtau).sum(axis=1, keepdims=True))
    scaled = diff * inv[None]
    dX -= np.einsum("pk,pkc->pc", dl, scaled)
    d_means = np.einsum("pk,pkc->kc", dl, scaled)
    d_log_vars = np.einsum("pk,pkc->kc", dl, 0.5 * diff * scaled - 0.5)
    d_logw = dl.sum(axis=0) + dweights * weights
    d_logits = d_logw - weights * d_logw.sum()
    return UanGrads(from_positions(dX, c["shape"]), d_logits, d_means, d_log_vars, d_gamma, d_beta)


def uan_moving_average_update(state: UanState, ctx: NormCtx) -> UanState:
    """Blend cluster parameters toward the batch's responsibility-weighted statistics.

    weight_k <- m * weight_k + (1 - m) * mean_p tau[p, k]
    mean_k   <- m * mean_k   + (1 - m) * (tau-weighted batch mean)
    var_k    <- m * var_k    + (1 - m) * (tau-weighted batch variance)

    Components with no responsibility mass in the batch keep their mean and
    variance. The state is updated in place and returned.
    """
    if state.mode != "moving_average":
        raise ValueError(f"moving-average update on a {state.mode!r}-mode state")
    if ctx.kind != "uan":
        raise ValueError(f"expected a uan context, got {ctx.kind!r}")
    c = ctx.saved
    m = state.momentum
    alive = c["alive"]
    weights = m * state.weights + (1.0 - m) * c["tau"].mean(axis=0)
    weights = np.maximum(weights, _FLOOR)
    weights = weights / weights.sum()
    means = np.where(alive[:, None], m * state.means + (1.0 - m) * c["means"], state.means)
    variances = np.where(alive[:, None], m * state.variances + (1.0 - m) * c["var"], state.variances)
    state.weight_logits = np.log(weights)
    state.means = means
    state.log_vars = np.log(np.maximum(variances, _FLOOR))
    return state
