"""One code path for batch, layer, instance and group normalization.

Each scheme is a choice of the index set whose mean and variance normalize an
activation. With x viewed as (N, C, L):

* Batch: all (n, l) for the activation's channel
* Group(G): all (c, l) of the activation's sample and channel group
* Layer: Group(1)
* Instance: Group(C)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import check_finite
from .batch import DEFAULT_EPS
from .context import NormCtx

SCHEMES = ("batch", "layer", "instance", "group")


@dataclass(frozen=True)
class Partition:
    scheme: str
    groups: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "group" and (self.groups is None or self.groups < 1):
            raise ValueError("group partition needs G >= 1")

    @classmethod
    def batch(cls) -> "Partition":
        return cls("batch")

    @classmethod
    def layer(cls) -> "Partition":
        return cls("layer")

    @classmethod
    def instance(cls) -> "Partition":
        return cls("instance")

    @classmethod
    def group(cls, g: int) -> "Partition":
        return cls("group", g)

    def group_count(self, channels: int) -> int | None:
        """Number of channel groups, or None for the batch scheme."""
        if self.scheme == "batch":
            return None
        g = {"layer": 1, "instance": channels}.get(self.scheme, self.groups)
        if channels % g:
            raise ValueError(f"G={g} does not divide C={channels}")
        return g


def _view(x: np.ndarray, partition: Partition) -> tuple[np.ndarray, tuple[int, ...]]:
    n, c = x.shape[:2]
    g = partition.group_count(c)
    if g is None:
        return x.reshape(n, c, -1), (0, 2)
    return x.reshape(n, g, -1), (2,)


def partition_norm_forward(
    x: np.ndarray,
    partition: Partition,
    eps: float = DEFAULT_EPS,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
) -> tuple[np.ndarray, NormCtx]:
    """v = x - E_B(x); x_hat = v / sqrt(E_B(v^2) + eps), with optional per-channel affine."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.size == 0:
        raise ValueError(f"expected non-empty (N, C, ...) input, got {x.shape}")
    xv, axes = _view(x, partition)
    mu = xv.mean(axis=axes, keepdims=True)
    v = xv - mu
    var = (v * v).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v * inv_std).reshape(x.shape)
    y = xhat
    if gamma is not None:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        y = xhat * gamma.reshape(shape) + (0.0 if beta is None else beta.reshape(shape))
    ctx = NormCtx(
        "partition",
        {"xhat": xhat, "inv_std": inv_std, "partition": partition, "gamma": gamma, "mean": mu, "var": var},
    )
    return check_finite(y, f"{partition.scheme} norm output"), ctx


def partition_norm_backward(ctx: NormCtx, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    s = ctx.take("partition")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    grads: dict[str, np.ndarray] = {}
    g = dy
    if gamma is not None:
        caxes = (0,) + tuple(range(2, dy.ndim))
        grads["gamma"] = (dy * xhat).sum(axis=caxes)
        grads["beta"] = dy.sum(axis=caxes)
        g = dy * gamma.reshape((1, -1) + (1,) * (dy.ndim - 2))
    gv, axes = _view(g, s["partition"])
    xv, _ = _view(xhat, s["partition"])
    m = np.prod([gv.shape[a] for a in axes])
    gsum = gv.sum(axis=axes, keepdims=True)
    gx = (gv * xv).sum(axis=axes, keepdims=True)
    dx = (inv_std / m) * (m * gv - gsum - xv * gx)
    return dx.reshape(dy.shape), grads
