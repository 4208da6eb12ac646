"""Trainable layers and a sequential network container.

Every layer follows the same protocol:

* ``forward(x, training)`` returns the output and saves what ``backward`` needs
* ``backward(dy)`` returns ``dx`` and fills ``self.grads`` (same keys as ``self.params``)
* ``params`` maps names to arrays that optimizers update in place
* ``buffers`` maps names to non-trainable state saved in checkpoints
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gmm import GmmParams, em_fit, posterior
from .norm import (
    DEFAULT_EPS,
    BnState,
    Partition,
    bn_backward,
    bn_forward,
    mixture_norm_forward,
    mn_backward,
    partition_norm_backward,
    partition_norm_forward,
    uan_backward,
    uan_forward_infer,
    uan_forward_train,
    uan_init,
    uan_moving_average_update,
)
from .norm.mixture import mixture_infer
from .tensor import from_positions, to_positions

NORM_KINDS = ("none", "bn", "ln", "in", "gn", "mn", "uan")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._ctx = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def config(self) -> dict:
        return {}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def after_batch(self) -> None:
        """Hook run by the training loop once the optimizer step is done."""

    def _take_ctx(self):
        if self._ctx is None:
            raise RuntimeError(f"{self.kind}: backward without a matching forward")
        ctx, self._ctx = self._ctx, None
        return ctx

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in list(self.params) + list(self.buffers):
            target = self.params if name in self.params else self.buffers
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != target[name].shape:
                raise ValueError(f"{self.kind}.{name}: shape {arr.shape} != {target[name].shape}")
            target[name][...] = arr

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Layer):
    """Cross-correlation (no kernel flip) with weights shaped (K, C, R, S)."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.params["bias"] = np.zeros(out_channels)

    def config(self):
        return {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
        }

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {k} too large for {h}x{w} input")
        return (self.out_channels, ho, wo)

    def forward(self, x, training=True):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv2d expects {self.in_channels} channels, got {c}")
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        # channel-major columns keep the col2im additions in backward contiguous
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = wmat @ cols + self.params["bias"][:, None]
        self._ctx = (cols, xp.shape, (n, ho, wo))
        return np.ascontiguousarray(out.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, dy):
        cols, xp_shape, (n, ho, wo) = self._take_ctx()
        k, s, p = self.kernel_size, self.stride, self.padding
        dmat = dy.transpose(1, 0, 2, 3).reshape(self.out_channels, n * ho * wo)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        self.grads["weight"] = (dmat @ cols.T).reshape(self.params["weight"].shape)
        self.grads["bias"] = dmat.sum(axis=1)
        dcols = (wmat.T @ dmat).reshape(self.in_channels, k, k, n, ho, wo)
        dxp = np.zeros((xp_shape[1], xp_shape[0]) + tuple(xp_shape[2:]))
        for r in range(k):
            for q in range(k):
                dxp[:, :, r : r + s * ho : s, q : q + s * wo : s] += dcols[:, r, q]
        dxp = dxp.transpose(1, 0, 2, 3)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = he_uniform(rng, (in_features, out_features), in_features)
        self.params["bias"] = np.zeros(out_features)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},) input, got {input_shape}")
        return (self.out_features,)

    def forward(self, x, training=True):
        self._ctx = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        x = self._take_ctx()
        self.grads["weight"] = x.T @ dy
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True):
        mask = x > 0
        self._ctx = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_ctx()


class _Pool2d(Layer):
    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def config(self):
        return {"size": self.size}

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h % self.size or w % self.size:
            raise ValueError(f"{self.kind}: {h}x{w} not divisible by {self.size}")
        return (c, h // self.size, w // self.size)

    def _blocks(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"{self.kind}: {h}x{w} not divisible by {s}")
        return x.reshape(n, c, h // s, s, w // s, s)


class MaxPool2d(_Pool2d):
    kind = "maxpool2d"

    def forward(self, x, training=True):
        b = self._blocks(x)
        out = b.max(axis=(3, 5))
        # ties route the gradient to the first maximum only
        flat = b.transpose(0, 1, 2, 4, 3, 5).reshape(*out.shape, -1)
        arg = flat.argmax(axis=-1)
        self._ctx = (x.shape, arg)
        return out

    def backward(self, dy):
        shape, arg = self._take_ctx()
        s = self.size
        onehot = np.zeros(dy.shape + (s * s,))
        np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
        n, c, ho, wo = dy.shape
        return onehot.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class AvgPool2d(_Pool2d):
    kind = "avgpool2d"

    def forward(self, x, training=True):
        self._ctx = x.shape
        return self._blocks(x).mean(axis=(3, 5))

    def backward(self, dy):
        shape = self._take_ctx()
        s = self.size
        return np.repeat(np.repeat(dy, s, axis=2), s, axis=3).reshape(shape) / (s * s)


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def output_shape(self, input_shape):
        return (input_shape[0],)

    def forward(self, x, training=True):
        self._ctx = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        shape = self._take_ctx()
        return np.broadcast_to(dy[:, :, None, None], shape) / (shape[2] * shape[3])


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=True):
        self._ctx = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_ctx())


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------- norm layers


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels, momentum=0.1, eps=DEFAULT_EPS):
        super().__init__()
        self.state = BnState.create(channels, momentum, eps)
        self.params = {"gamma": self.state.gamma, "beta": self.state.beta}
        self.buffers = {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def config(self):
        return {"channels": self.state.channels, "momentum": self.state.momentum, "eps": self.state.epsilon}

    def output_shape(self, input_shape):
        if input_shape[0] != self.state.channels:
            raise ValueError(f"bn expects {self.state.channels} channels, got {input_shape[0]}")
        return input_shape

    def forward(self, x, training=True):
        y, ctx = bn_forward(x, self.state, training)
        # bn_forward rebinds the running arrays; copy back into the buffer objects
        self.buffers["running_mean"][...] = self.state.running_mean
        self.buffers["running_var"][...] = self.state.running_var
        self.state.running_mean = self.buffers["running_mean"]
        self.state.running_var = self.buffers["running_var"]
        self._ctx = ctx
        return y

    def backward(self, dy):
        dx, g = bn_backward(self._take_ctx(), dy)
        self.grads.update(g)
        return dx


class PartitionNorm(Layer):
    """Layer, instance or group normalization with a per-channel affine."""

    kind = "partition_norm"

    def __init__(self, channels, scheme="group", groups=None, eps=DEFAULT_EPS):
        super().__init__()
        self.channels, self.scheme, self.groups, self.eps = channels, scheme, groups, eps
        self.partition = Partition(scheme, groups)
        self.partition.group_count(channels)
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}

    def config(self):
        return {"channels": self.channels, "scheme": self.scheme, "groups": self.groups, "eps": self.eps}

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ValueError(f"{self.scheme} norm expects {self.channels} channels, got {input_shape[0]}")
        return input_shape

    def forward(self, x, training=True):
        y, self._ctx = partition_norm_forward(x, self.partition, self.eps, self.params["gamma"], self.params["beta"])
        return y

    def backward(self, dy):
        dx, g = partition_norm_backward(self._take_ctx(), dy)
        self.grads.update(g)
        return dx


class MixtureNorm(Layer):
    """Mixture normalization over a mixture fitted by EM once, then frozen.

    The mixture is fitted on the first training batch's channel vectors.
    Per-component batch statistics are tracked with an exponential moving
    average and used at inference.
    """

    kind = "mn"

    def __init__(self, channels, k=3, eps=DEFAULT_EPS, momentum=0.1, seed=0, max_fit_points=4096, affine=False):
        super().__init__()
        self.channels, self.k, self.eps, self.momentum = channels, k, eps, momentum
        self.seed, self.max_fit_points, self.affine = seed, max_fit_points, affine
        self.gmm: GmmParams | None = None
        self.buffers = {
            "gmm_weights": np.full(k, 1.0 / k),
            "gmm_means": np.zeros((k, channels)),
            "gmm_variances": np.ones((k, channels)),
            "running_means": np.zeros((k, channels)),
            "running_vars": np.ones((k, channels)),
            "fitted": np.zeros(1),
        }
        if affine:
            self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}

    def config(self):
        return {
            "channels": self.channels, "k": self.k, "eps": self.eps, "momentum": self.momentum,
            "seed": self.seed, "max_fit_points": self.max_fit_points, "affine": self.affine,
        }

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ValueError(f"mn expects {self.channels} channels, got {input_shape[0]}")
        return input_shape

    def fit(self, x: np.ndarray) -> GmmParams:
        X = to_positions(x)
        if X.shape[0] > self.max_fit_points:
            idx = np.random.default_rng(self.seed).choice(X.shape[0], self.max_fit_points, replace=False)
            X = X[np.sort(idx)]
        gmm, _ = em_fit(X, self.k, seed=self.seed)
        self.set_gmm(gmm)
        return gmm

    def set_gmm(self, gmm: GmmParams) -> None:
        self.buffers["gmm_weights"][...] = gmm.weights
        self.buffers["gmm_means"][...] = gmm.means
        self.buffers["gmm_variances"][...] = gmm.variances
        self.buffers["fitted"][0] = 1.0
        self.gmm = GmmParams(gmm.weights.copy(), gmm.means.copy(), gmm.variances.copy())

    def load_state_dict(self, state):
        super().load_state_dict(state)
        if self.buffers["fitted"][0]:
            self.gmm = GmmParams(self.buffers["gmm_weights"].copy(), self.buffers["gmm_means"].copy(),
                                 self.buffers["gmm_variances"].copy())

    def _affine(self, y):
        if not self.affine:
            return y
        shape = (1, -1) + (1,) * (y.ndim - 2)
        return y * self.params["gamma"].reshape(shape) + self.params["beta"].reshape(shape)

    def forward(self, x, training=True):
        if self.gmm is None:
            self.fit(x)
        if not training:
            X = to_positions(x)
            tau = posterior(X, self.gmm)
            yp = mixture_infer(X, tau, self.gmm.weights, self.buffers["running_means"],
                               self.buffers["running_vars"], self.eps)
            return self._affine(from_positions(yp, x.shape))
        y, ctx = mixture_norm_forward(x, self.gmm, self.eps)
        alive = ctx["alive"][:, None]
        m = self.momentum
        rm, rv = self.buffers["running_means"], self.buffers["running_vars"]
        rm[...] = np.where(alive, (1 - m) * rm + m * ctx["means"], rm)
        rv[...] = np.where(alive, (1 - m) * rv + m * ctx["var"], rv)
        self._ctx = (ctx, y)
        return self._affine(y)

    def backward(self, dy):
        ctx, y = self._take_ctx()
        if self.affine:
            caxes = (0,) + tuple(range(2, dy.ndim))
            self.grads["gamma"] = (dy * y).sum(axis=caxes)
            self.grads["beta"] = dy.sum(axis=caxes)
            dy = dy * self.params["gamma"].reshape((1, -1) + (1,) * (dy.ndim - 2))
        return mn_backward(ctx, dy)


class UAN(Layer):
    """UAN layer: mixture normalization with learned cluster parameters.

    In ``weight`` mode the cluster parameters are trainable; in
    ``moving_average`` mode they follow the batch statistics through
    :func:`uan_moving_average_update` after each optimizer step.
    """

    kind = "uan"

    def __init__(self, channels, k=3, mode="weight", momentum=0.9, eps=DEFAULT_EPS, affine=False, seed=0):
        super().__init__()
        self.seed = seed
        self.state = uan_init(k, channels, seed=seed, mode=mode, momentum=momentum, epsilon=eps, affine=affine)
        self._bind()

    def _bind(self):
        st = self.state
        cluster = {"weight_logits": st.weight_logits, "means": st.means, "log_vars": st.log_vars}
        affine = {"gamma": st.gamma, "beta": st.beta} if st.affine else {}
        if st.mode == "weight":
            self.params, self.buffers = {**cluster, **affine}, {}
        else:
            self.params, self.buffers = affine, cluster

    def config(self):
        st = self.state
        return {
            "channels": st.d, "k": st.k, "mode": st.mode, "momentum": st.momentum,
            "eps": st.epsilon, "affine": st.affine, "seed": self.seed,
        }

    def output_shape(self, input_shape):
        if input_shape[0] != self.state.d:
            raise ValueError(f"uan expects {self.state.d} channels, got {input_shape[0]}")
        return input_shape

    def forward(self, x, training=True):
        if not training:
            return uan_forward_infer(x, self.state)
        y, ctx = uan_forward_train(x, self.state)
        self._ctx = ctx
        self._last_ctx = ctx
        return y

    def backward(self, dy):
        g = uan_backward(self._take_ctx(), dy)
        if self.state.mode == "weight":
            self.grads.update(weight_logits=g.d_weight_logits, means=g.d_means, log_vars=g.d_log_vars)
        if self.state.affine:
            self.grads.update(gamma=g.d_gamma, beta=g.d_beta)
        return g.dx

    def after_batch(self):
        ctx = getattr(self, "_last_ctx", None)
        if self.state.mode == "moving_average" and ctx is not None:
            uan_moving_average_update(self.state, ctx)
            # the update rebinds arrays; keep the buffer dict pointing at live state
            self._bind()
        self._last_ctx = None

    def parameter_count(self):
        # cluster parameters are learned in both modes, by gradient or by moving average
        return self.state.parameter_count()


def make_norm(kind: str, channels: int, *, k=3, eps=DEFAULT_EPS, groups=2, uan_mode="moving_average",
              momentum=0.9, bn_momentum=0.1, affine=False, seed=0) -> Layer | None:
    if kind == "none":
        return None
    if kind == "bn":
        return BatchNorm(channels, bn_momentum, eps)
    if kind in ("ln", "in", "gn"):
        scheme = {"ln": "layer", "in": "instance", "gn": "group"}[kind]
        return PartitionNorm(channels, scheme, groups if kind == "gn" else None, eps)
    if kind == "mn":
        return MixtureNorm(channels, k, eps, bn_momentum, seed, affine=affine)
    if kind == "uan":
        return UAN(channels, k, uan_mode, momentum, eps, affine, seed)
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


# ------------------------------------------------------------------- network

LAYER_TYPES = {
    cls.kind: cls
    for cls in (Conv2d, Dense, ReLU, MaxPool2d, AvgPool2d, GlobalAvgPool, Flatten,
                BatchNorm, PartitionNorm, MixtureNorm, UAN)
}


class Network:
    """Sequential stack of layers with shapes validated at construction."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], meta: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.meta = dict(meta or {})
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from exc

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def after_batch(self) -> None:
        for layer in self.layers:
            layer.after_batch()

    def named_parameters(self):
        """Yields ``(name, param, grad)``; grad is None before the first backward."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", p, layer.grads.get(name)

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def norm_layers(self):
        return [l for l in self.layers if l.kind in ("bn", "partition_norm", "mn", "uan")]

    def trainable_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.kind in ("conv2d", "dense")]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for i, layer in enumerate(self.layers):
            for name, arr in sorted(layer.state_dict().items()):
                h.update(f"{i}.{name}".encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- checkpoints: a directory of JSON tensors plus manifest.json

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"format": "normkit-checkpoint", "version": 1,
                    "input_shape": list(self.input_shape), "meta": self.meta, "layers": []}
        for i, layer in enumerate(self.layers):
            entry = {"kind": layer.kind, "config": layer.config(), "tensors": {}}
            for name, arr in layer.state_dict().items():
                fname = f"layer{i:02d}.{name}.json"
                doc = {"shape": list(arr.shape), "data": np.asarray(arr).ravel().tolist()}
                (directory / fname).write_text(json.dumps(doc), encoding="utf-8")
                entry["tensors"][name] = fname
            manifest["layers"].append(entry)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "Network":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format") != "normkit-checkpoint":
            raise ValueError(f"{directory} is not a normkit checkpoint")
        layers = []
        for entry in manifest["layers"]:
            layer = _layer_from_config(entry["kind"], entry["config"])
            state = {}
            for name, fname in entry["tensors"].items():
                doc = json.loads((directory / fname).read_text(encoding="utf-8"))
                state[name] = np.asarray(doc["data"], dtype=np.float64).reshape(doc["shape"])
            layer.load_state_dict(state)
            layers.append(layer)
        return cls(layers, manifest["input_shape"], manifest.get("meta"))


def _layer_from_config(kind: str, cfg: dict) -> Layer:
    if kind == "bn":
        return BatchNorm(cfg["channels"], cfg["momentum"], cfg["eps"])
    if kind == "uan":
        return UAN(cfg["channels"], cfg["k"], cfg["mode"], cfg["momentum"], cfg["eps"], cfg["affine"], cfg["seed"])
    return LAYER_TYPES[kind](**cfg)


def build_shallow_cnn(
    num_classes: int = 10,
    norm_kind: str = "bn",
    k: int = 3,
    *,
    in_channels: int = 3,
    input_hw: int = 32,
    widths: Sequence[int] = (32, 32, 64, 64),
    pool_after: Sequence[int] = (2, 4),
    eps: float = DEFAULT_EPS,
    uan_mode: str = "moving_average",
    uan_momentum: float = 0.9,
    bn_momentum: float = 0.1,
    affine: bool = False,
    groups: int = 2,
    seed: int = 0,
) -> Network:
    """Four conv -> ReLU -> norm blocks, then global average pooling and a dense head.

    For ``mn`` and ``uan`` only the third norm slot holds the mixture layer
    and the other three are batch norm. ``ln``/``in``/``gn``/``bn`` fill all
    four slots; ``none`` leaves them empty. ``pool_after`` lists the
    (1-based) blocks followed by a 2x2 max pool.
    """
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    if norm_kind in ("mn", "uan") and k < 1:
        raise ValueError(f"invalid cluster count K={k}")
    if len(widths) != 4:
        raise ValueError("shallow CNN needs exactly four conv widths")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c = in_channels
    for block, width in enumerate(widths, start=1):
        layers += [Conv2d(c, width, 3, 1, 1, rng=rng), ReLU()]
        slot_kind = norm_kind
        if norm_kind in ("mn", "uan") and block != 3:
            slot_kind = "bn"
        norm = make_norm(slot_kind, width, k=k, eps=eps, groups=groups, uan_mode=uan_mode,
                         momentum=uan_momentum, bn_momentum=bn_momentum, affine=affine, seed=seed)
        if norm is not None:
            layers.append(norm)
        if block in pool_after:
            layers.append(MaxPool2d(2))
        c = width
    layers += [GlobalAvgPool(), Dense(c, num_classes, rng=rng)]
    meta = {"model": "shallow-cnn", "norm_kind": norm_kind, "k": k}
    return Network(layers, (in_channels, input_hw, input_hw), meta)


def build_mlp(
    in_features: int,
    num_classes: int,
    hidden: Sequence[int] = (64,),
    norm_kind: str = "bn",
    k: int = 3,
    *,
    input_norm: bool = False,
    input_shape: Sequence[int] | None = None,
    eps: float = DEFAULT_EPS,
    uan_mode: str = "moving_average",
    uan_momentum: float = 0.9,
    bn_momentum: float = 0.1,
    affine: bool = False,
    groups: int = 2,
    seed: int = 0,
) -> Network:
    """Flatten -> [norm] -> (dense -> ReLU -> norm)* -> dense.

    With ``input_norm`` the chosen normalization sits directly on the
    flattened input and the hidden blocks carry none.
    """
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape) if input_shape is not None else (in_features,)
    layers: list[Layer] = [Flatten()]
    opts = dict(k=k, eps=eps, groups=groups, uan_mode=uan_mode, momentum=uan_momentum,
                bn_momentum=bn_momentum, affine=affine, seed=seed)
    if input_norm:
        norm = make_norm(norm_kind, in_features, **opts)
        if norm is not None:
            layers.append(norm)
    f = in_features
    for width in hidden:
        layers += [Dense(f, width, rng=rng), ReLU()]
        if not input_norm:
            norm = make_norm(norm_kind, width, **opts)
            if norm is not None:
                layers.append(norm)
        f = width
    layers.append(Dense(f, num_classes, rng=rng))
    meta = {"model": "mlp", "norm_kind": norm_kind, "k": k}
    return Network(layers, shape, meta)
