"""Thin validated array helpers.

Every activation in the library is a float64 ``numpy.ndarray`` in NCHW
layout. The functions here add the checks the rest of the code relies on:
axis validation, population (1/m) statistics, broadcasting restricted to
singleton extents, and a hard error on any non-finite result.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "as_tensor",
    "check_finite",
    "mean_over",
    "var_over",
    "elementwise",
    "reshape",
    "transpose",
    "slice_channel_group",
    "to_positions",
    "from_positions",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    check_finite(arr)
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _axes(x: np.ndarray, axes: int | Iterable[int]) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for rank {x.ndim}")
        out.append(a % x.ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def mean_over(x, axes, keepdims: bool = False) -> np.ndarray:
    """Arithmetic mean over ``axes``."""
    x = as_tensor(x)
    ax = _axes(x, axes)
    if any(x.shape[a] == 0 for a in ax):
        raise ValueError("mean over an empty axis")
    return np.mean(x, axis=ax, keepdims=keepdims)


def var_over(x, axes, keepdims: bool = False) -> np.ndarray:
    """Population variance (divides by the count, no Bessel correction)."""
    x = as_tensor(x)
    ax = _axes(x, axes)
    mu = mean_over(x, ax, keepdims=True)
    return np.mean((x - mu) ** 2, axis=ax, keepdims=keepdims)


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def _broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    n = max(len(a), len(b))
    a = (1,) * (n - len(a)) + tuple(a)
    b = (1,) * (n - len(b)) + tuple(b)
    out = []
    for i, j in zip(a, b):
        if i != j and 1 not in (i, j):
            raise ValueError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(i, j))
    return tuple(out)


def elementwise(a, b, op: str) -> np.ndarray:
    """Apply add/sub/mul/div with singleton-extent broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    _broadcast_shape(a.shape, b.shape)
    if op == "div" and np.any(b == 0):
        raise ZeroDivisionError("division by zero in elementwise div")
    return check_finite(_OPS[op](a, b), f"elementwise {op}")


def reshape(x, shape: Sequence[int]) -> np.ndarray:
    x = as_tensor(x)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) to {tuple(shape)}")
    return np.reshape(x, tuple(shape))


def transpose(x, perm: Sequence[int] | None = None) -> np.ndarray:
    x = as_tensor(x)
    if perm is not None and sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"{perm} is not a permutation of {x.ndim} axes")
    return np.transpose(x, perm)


def slice_channel_group(x, groups: int) -> np.ndarray:
    """Split the channel axis of an NCHW (or NC...) tensor into contiguous groups.

    Returns an array of shape (N, G, C // G, *rest).
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("need at least (N, C) axes")
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ValueError(f"G={groups} does not divide C={c}")
    return x.reshape(x.shape[0], groups, c // groups, *x.shape[2:])


def to_positions(x: np.ndarray) -> np.ndarray:
    """NCHW (or NC) -> (N*H*W, C); each row is the channel vector at one position."""
    if x.ndim == 2:
        return x
    n, c = x.shape[:2]
    return np.moveaxis(x.reshape(n, c, -1), 1, 2).reshape(-1, c)


def from_positions(p: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    if len(shape) == 2:
        return p.reshape(shape)
    n, c = shape[:2]
    return np.ascontiguousarray(np.moveaxis(p.reshape(n, -1, c), 2, 1)).reshape(shape)
