"""Batch normalization with running statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..tensor import check_finite
from .context import NormCtx

DEFAULT_EPS = 1e-5


@dataclass
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = DEFAULT_EPS

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = DEFAULT_EPS) -> "BnState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "momentum": self.momentum,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BnState":
        return cls(
            gamma=np.asarray(doc["gamma"], dtype=np.float64),
            beta=np.asarray(doc["beta"], dtype=np.float64),
            running_mean=np.asarray(doc["running_mean"], dtype=np.float64),
            running_var=np.asarray(doc["running_var"], dtype=np.float64),
            momentum=float(doc["momentum"]),
            epsilon=float(doc["epsilon"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BnState":
        return cls.from_dict(json.loads(text))


def _channel_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def bn_forward(x: np.ndarray, state: BnState, training: bool = True) -> tuple[np.ndarray, NormCtx]:
    """Normalize each channel over (N, H, W), then scale by gamma and shift by beta.

    In training mode batch statistics are used and the running estimates are
    moved toward them: ``running = (1 - momentum) * running + momentum * batch``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ValueError(f"expected (N, {state.channels}, ...) input, got {x.shape}")
    axes = _channel_axes(x)
    m = x.size // x.shape[1]
    if m == 0:
        raise ValueError("empty batch")
    if training:
        mu = x.mean(axis=axes)
        var = ((x - _bcast(mu, x.ndim)) ** 2).mean(axis=axes)
        lam = state.momentum
        state.running_mean = (1 - lam) * state.running_mean + lam * mu
        state.running_var = (1 - lam) * state.running_var + lam * var
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - _bcast(mu, x.ndim)) * _bcast(inv_std, x.ndim)
    y = _bcast(state.gamma, x.ndim) * xhat + _bcast(state.beta, x.ndim)
    ctx = NormCtx("bn", {"xhat": xhat, "inv_std": inv_std, "gamma": state.gamma.copy(), "training": training})
    return check_finite(y, "bn output"), ctx


def bn_backward(ctx: NormCtx, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns ``dx`` and ``{"gamma": dgamma, "beta": dbeta}``."""
    s = ctx.take("bn")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    axes = _channel_axes(dy)
    nd = dy.ndim
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    g = dy * _bcast(gamma, nd)
    if not s["training"]:
        return g * _bcast(inv_std, nd), {"gamma": dgamma, "beta": dbeta}
    m = dy.size // dy.shape[1]
    gsum = g.sum(axis=axes)
    gx = (g * xhat).sum(axis=axes)
    dx = _bcast(inv_std / m, nd) * (m * g - _bcast(gsum, nd) - xhat * _bcast(gx, nd))
    return dx, {"gamma": dgamma, "beta": dbeta}
