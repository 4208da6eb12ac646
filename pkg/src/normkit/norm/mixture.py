"""Mixture normalizing transform shared by MN and UAN.

Activations are handled as a (P, C) matrix of channel vectors, one row per
(sample, spatial position). For component k with responsibilities tau[:, k]
over the batch:

    w[:, k]   = tau[:, k] / sum_p tau[p, k]
    m[k]      = sum_p w[p, k] * x[p]                 (per channel)
    v[:, k]   = x - m[k]
    V[k]      = sum_p w[p, k] * v[p, k] ** 2
    xhat_k    = v[:, k] / sqrt(V[k] + eps)
    y         = sum_k tau[:, k] / sqrt(weight_k) * xhat_k

With K = 1 this is exactly batch normalization without affine.
"""

from __future__ import annotations

import numpy as np

from ..gmm import GmmParams, posterior
from ..tensor import check_finite, from_positions, to_positions
from .batch import DEFAULT_EPS
from .context import NormCtx

DEAD_MASS = 1e-12


def mixture_transform(X: np.ndarray, tau: np.ndarray, weights: np.ndarray, eps: float):
    """Forward on position rows. Returns ``(y, cache)``."""
    P, C = X.shape
    if P == 0:
        raise ValueError("empty mini-batch")
    if tau.shape != (P, weights.shape[0]):
        raise ValueError(f"responsibilities {tau.shape} do not match ({P}, {weights.shape[0]})")
    mass = tau.sum(axis=0)
    alive = mass > DEAD_MASS
    w = np.where(alive, tau / np.where(alive, mass, 1.0), 0.0)
    means = w.T @ X
    v = X[:, None, :] - means[None]
    var = np.einsum("pk,pkc->kc", w, v * v)
    r = 1.0 / np.sqrt(var + eps)
    xh = v * r[None]
    xh[:, ~alive, :] = 0.0
    scale = 1.0 / np.sqrt(weights)
    a = tau * scale[None]
    y = np.einsum("pk,pkc->pc", a, xh)
    cache = {
        "X": X, "tau": tau, "weights": weights, "mass": mass, "alive": alive,
        "w": w, "means": means, "var": var, "v": v, "r": r, "xh": xh, "scale": scale,
    }
    return y, cache


def mixture_transform_backward(cache: dict, g: np.ndarray):
    """Backward of :func:`mixture_transform` for upstream ``g`` of shape (P, C).

    Returns ``(dX, dtau, dweights)``; ``dX`` holds only the paths with tau
    held fixed, ``dtau`` lets a caller continue through the responsibilities.
    """
    X, tau, w, v, r, xh = (cache[k] for k in ("X", "tau", "w", "v", "r", "xh"))
    scale, mass, alive = cache["scale"], cache["mass"], cache["alive"]

    a = tau * scale[None]
    da = np.einsum("pc,pkc->pk", g, xh)
    dtau = da * scale[None]
    dscale = (da * tau).sum(axis=0)
    dweights = dscale * (-0.5) * scale / cache["weights"]

    dxh = g[:, None, :] * a[:, :, None]
    dxh[:, ~alive, :] = 0.0
    dr = np.einsum("pkc,pkc->kc", dxh, v)
    dvar = -0.5 * dr * r**3
    dv = dxh * r[None] + 2.0 * dvar[None] * w[:, :, None] * v
    dw = np.einsum("kc,pkc->pk", dvar, v * v)
    dX = dv.sum(axis=1)
    dmeans = -dv.sum(axis=0)
    dw += X @ dmeans.T
    dX += w @ dmeans
    safe_mass = np.where(alive, mass, 1.0)
    dtau += np.where(alive, (dw - (dw * w).sum(axis=0)[None]) / safe_mass, 0.0)
    return dX, dtau, dweights


def mixture_norm_forward(
    x: np.ndarray,
    gmm: GmmParams,
    eps: float = DEFAULT_EPS,
    responsibilities_from: str = "frozen-gmm",
    tau: np.ndarray | None = None,
) -> tuple[np.ndarray, NormCtx]:
    """Normalize NCHW (or NC) activations with mixture statistics over (N, H, W).

    Responsibilities come from ``gmm`` evaluated on each position's channel
    vector unless ``tau`` (shape (N*H*W, K)) is supplied.
    """
    if responsibilities_from not in ("frozen-gmm", "uan-state"):
        raise ValueError(f"unknown responsibility source {responsibilities_from!r}")
    x = np.asarray(x, dtype=np.float64)
    X = to_positions(x)
    if X.shape[1] != gmm.d:
        raise ValueError(f"channel dimension {X.shape[1]} does not match mixture d={gmm.d}")
    if tau is None:
        tau = posterior(X, gmm)
    yp, cache = mixture_transform(X, tau, gmm.weights, eps)
    cache["shape"] = x.shape
    return check_finite(from_positions(yp, x.shape), "mixture norm output"), NormCtx("mixture", cache)


def mn_backward(ctx: NormCtx, dy: np.ndarray) -> np.ndarray:
    """Input gradient of MN; responsibilities from the frozen mixture are treated as constants."""
    cache = ctx.take("mixture")
    dX, _, _ = mixture_transform_backward(cache, to_positions(dy))
    return from_positions(dX, cache["shape"])


def mixture_infer(
    X: np.ndarray, tau: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray, eps: float
) -> np.ndarray:
    """Per-row transform with stored component statistics instead of batch ones."""
    scale = 1.0 / np.sqrt(weights)
    xh = (X[:, None, :] - means[None]) / np.sqrt(variances + eps)[None]
    return np.einsum("pk,pkc->pc", tau * scale[None], xh)
