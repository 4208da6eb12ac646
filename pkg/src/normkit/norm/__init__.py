"""Normalization layers: BN, LN, IN, GN, mixture normalization and UAN."""

from .batch import DEFAULT_EPS, BnState, bn_backward, bn_forward
from .context import ContextConsumedError, NormCtx
from .mixture import mixture_norm_forward, mn_backward
from .partition import Partition, partition_norm_backward, partition_norm_forward
from .uan import (
    UanGrads,
    UanState,
    responsibilities,
    uan_backward,
    uan_forward_infer,
    uan_forward_train,
    uan_init,
    uan_moving_average_update,
)


def mn_layer(x, gmm, eps=DEFAULT_EPS):
    """Mixture normalization with responsibilities from a frozen, EM-fitted mixture."""
    return mixture_norm_forward(x, gmm, eps, responsibilities_from="frozen-gmm")


__all__ = [
    "DEFAULT_EPS",
    "BnState",
    "bn_forward",
    "bn_backward",
    "ContextConsumedError",
    "NormCtx",
    "Partition",
    "partition_norm_forward",
    "partition_norm_backward",
    "mixture_norm_forward",
    "mn_layer",
    "mn_backward",
    "UanState",
    "UanGrads",
    "responsibilities",
    "uan_init",
    "uan_forward_train",
    "uan_forward_infer",
    "uan_backward",
    "uan_moving_average_update",
]
