"""Central finite-difference verification of every backward pass.

Each check builds a scalar loss ``sum(forward(...) * dy)`` with a random
upstream ``dy`` and compares the analytic gradient with central differences
(``h = 1e-5``). The error measure is normwise:
``||analytic - numeric|| / (||analytic|| + ||numeric||)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from .norm import (
    BnState,
    Partition,
    bn_backward,
    bn_forward,
    mixture_norm_forward,
    mn_backward,
    partition_norm_backward,
    partition_norm_forward,
    uan_backward,
    uan_forward_train,
    uan_init,
)
from .gmm import GmmParams, posterior
from .tensor import to_positions

H = 1e-5
TOL_SIMPLE = 1e-6
TOL_MIXTURE = 1e-4
TOL_NETWORK = 1e-4
DEFAULT_CASES = 20


@dataclass
class CheckResult:
    op: str
    quantity: str
    max_rel_error: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def _collect(op, tol, cases, per_case: Callable[[np.random.Generator], dict[str, float]],
             seed: int = 0) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for case_seed in range(seed, seed + cases):
        errs = per_case(np.random.default_rng(case_seed))
        for q, e in errs.items():
            worst[q] = max(worst.get(q, 0.0), e)
    return [CheckResult(op, q, e, tol, cases) for q, e in worst.items()]


# ----------------------------------------------------------- normalization


def _bn_case(rng):
    x = rng.normal(size=(8, 3, 5, 1)) * rng.uniform(0.5, 2.0) + rng.normal()
    st = BnState.create(3)
    st.gamma[:] = rng.normal(size=3)
    st.beta[:] = rng.normal(size=3)
    dy = rng.normal(size=x.shape)

    def loss(xx=None, gamma=None, beta=None):
        s = BnState(st.gamma if gamma is None else gamma, st.beta if beta is None else beta,
                    st.running_mean.copy(), st.running_var.copy(), st.momentum, st.epsilon)
        return float(np.sum(bn_forward(x if xx is None else xx, s, True)[0] * dy))

    s = BnState(st.gamma.copy(), st.beta.copy(), st.running_mean.copy(), st.running_var.copy())
    _, ctx = bn_forward(x, s, True)
    dx, g = bn_backward(ctx, dy)
    return {
        "dx": rel_error(dx, numeric_grad(lambda v: loss(xx=v), x.copy())),
        "dgamma": rel_error(g["gamma"], numeric_grad(lambda v: loss(gamma=v), st.gamma.copy())),
        "dbeta": rel_error(g["beta"], numeric_grad(lambda v: loss(beta=v), st.beta.copy())),
    }


def _partition_case(partition: Partition):
    def case(rng):
        x = rng.normal(size=(3, 4, 2, 3)) * rng.uniform(0.5, 2.0) + rng.normal()
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        dy = rng.normal(size=x.shape)

        def loss(xx=x, gg=gamma, bb=beta):
            return float(np.sum(partition_norm_forward(xx, partition, 1e-5, gg, bb)[0] * dy))

        _, ctx = partition_norm_forward(x, partition, 1e-5, gamma, beta)
        dx, g = partition_norm_backward(ctx, dy)
        return {
            "dx": rel_error(dx, numeric_grad(lambda v: loss(xx=v), x.copy())),
            "dgamma": rel_error(g["gamma"], numeric_grad(lambda v: loss(gg=v), gamma.copy())),
            "dbeta": rel_error(g["beta"], numeric_grad(lambda v: loss(bb=v), beta.copy())),
        }

    return case


def _random_gmm(rng, k, d):
    w = rng.uniform(0.2, 1.0, size=k)
    return GmmParams(w / w.sum(), rng.normal(scale=0.7, size=(k, d)), rng.uniform(0.5, 2.0, size=(k, d)))


def _mn_case(rng):
    # the frozen mixture's responsibilities are constants of the backward,
    # so the numeric side holds them fixed at the unperturbed input's values
    x = rng.normal(size=(6, 2, 2, 2))
    gmm = _random_gmm(rng, 3, 2)
    tau = posterior(to_positions(x), gmm)
    dy = rng.normal(size=x.shape)

    def loss(xx):
        return float(np.sum(mixture_norm_forward(xx, gmm, 1e-5, tau=tau)[0] * dy))

    _, ctx = mixture_norm_forward(x, gmm, 1e-5)
    return {"dx": rel_error(mn_backward(ctx, dy), numeric_grad(loss, x.copy()))}


def _uan_case(affine: bool):
    def case(rng):
        x = rng.normal(size=(6, 2, 2, 2))
        st = uan_init(3, 2, seed=int(rng.integers(1 << 31)), affine=affine)
        st.means = rng.normal(scale=0.7, size=(3, 2))
        st.log_vars = np.log(rng.uniform(0.5, 2.0, size=(3, 2)))
        st.weight_logits = rng.normal(scale=0.5, size=3)
        if affine:
            st.gamma = rng.normal(size=2)
            st.beta = rng.normal(size=2)
        dy = rng.normal(size=x.shape)

        def loss_for(field):
            def f(v):
                old = getattr(st, field)
                setattr(st, field, v)
                try:
                    return float(np.sum(uan_forward_train(x, st)[0] * dy))
                finally:
                    setattr(st, field, old)
            return f

        def loss_x(v):
            return float(np.sum(uan_forward_train(v, st)[0] * dy))

        _, ctx = uan_forward_train(x, st)
        g = uan_backward(ctx, dy)
        out = {
            "dx": rel_error(g.dx, numeric_grad(loss_x, x.copy())),
            "d_weight_logits": rel_error(g.d_weight_logits, numeric_grad(loss_for("weight_logits"), st.weight_logits.copy())),
            "d_means": rel_error(g.d_means, numeric_grad(loss_for("means"), st.means.copy())),
            "d_log_vars": rel_error(g.d_log_vars, numeric_grad(loss_for("log_vars"), st.log_vars.copy())),
        }
        if affine:
            out["d_gamma"] = rel_error(g.d_gamma, numeric_grad(loss_for("gamma"), st.gamma.copy()))
            out["d_beta"] = rel_error(g.d_beta, numeric_grad(loss_for("beta"), st.beta.copy()))
        return out

    return case


def check_norm_layers(cases: int = DEFAULT_CASES, seed: int = 0) -> list[CheckResult]:
    results = []
    results += _collect("bn", TOL_SIMPLE, cases, _bn_case, seed=seed)
    results += _collect("ln", TOL_SIMPLE, cases, _partition_case(Partition.layer()), seed=seed)
    results += _collect("in", TOL_SIMPLE, cases, _partition_case(Partition.instance()), seed=seed)
    results += _collect("gn", TOL_SIMPLE, cases, _partition_case(Partition.group(2)), seed=seed)
    results += _collect("mn", TOL_MIXTURE, cases, _mn_case, seed=seed)
    results += _collect("uan", TOL_MIXTURE, cases, _uan_case(False), seed=seed)
    results += _collect("uan_affine", TOL_MIXTURE, cases, _uan_case(True), seed=seed)
    return results


# ------------------------------------------------------------------ layers


def _layer_case(make: Callable[[np.random.Generator], tuple[L.Layer, np.ndarray]]):
    def case(rng):
        layer, x = make(rng)
        y = layer.forward(x)
        dy = rng.normal(size=y.shape)
        dx = layer.backward(dy)

        def loss(_=None):
            return float(np.sum(layer.forward(x) * dy))

        out = {"dx": rel_error(dx, numeric_grad(lambda v: float(np.sum(layer.forward(v) * dy)), x.copy()))}
        for name, p in layer.params.items():
            out[f"d{name}"] = rel_error(layer.grads[name], numeric_grad(loss, p))
        return out

    return case


def _conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    return L.Conv2d(2, 3, 3, stride, pad, rng=rng), rng.normal(size=(2, 2, 6, 6))


def _dense(rng):
    layer = L.Dense(5, 4, rng=rng)
    layer.params["bias"][:] = rng.normal(size=4)
    return layer, rng.normal(size=(3, 5))


def _relu(rng):
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep samples away from the kink
    return L.ReLU(), x


def _maxpool(rng):
    # distinct values so the arg-max is stable under perturbation
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + rng.normal(scale=1e-3, size=(2, 2, 4, 4))
    return L.MaxPool2d(2), x


def _avgpool(rng):
    return L.AvgPool2d(2), rng.normal(size=(2, 3, 4, 4))


def _gap(rng):
    return L.GlobalAvgPool(), rng.normal(size=(2, 3, 4, 4))


def _flatten(rng):
    return L.Flatten(), rng.normal(size=(2, 3, 2, 2))


def _softmax_ce_case(rng):
    logits = rng.normal(size=(5, 4)) * 2
    labels = rng.integers(0, 4, size=5)
    _, grad = L.softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda v: L.softmax_cross_entropy(v, labels)[0], logits.copy())
    return {"dlogits": rel_error(grad, num)}


def tiny_network(norm_kind: str, seed: int) -> L.Network:
    """Two conv blocks on 8x8 inputs; UAN clusters get unit-scale variances so responsibilities stay smooth."""
    rng = np.random.default_rng(seed)
    layers = []
    c = 3
    for width in (4, 4):
        layers += [L.Conv2d(c, width, 3, 1, 1, rng=rng), L.ReLU()]
        norm = L.make_norm(norm_kind, width, k=2, groups=2, uan_mode="weight", affine=True, seed=seed)
        if norm is not None:
            if norm_kind == "uan":
                norm.state.log_vars[...] = 0.0
                norm.state.means[...] = rng.normal(scale=0.5, size=norm.state.means.shape)
            layers.append(norm)
        c = width
    layers += [L.AvgPool2d(2), L.Flatten(), L.Dense(4 * 4 * 4, 3, rng=rng)]
    return L.Network(layers, (3, 8, 8))


def _min_relu_margin(net: L.Network, x: np.ndarray) -> float:
    margin = np.inf
    for layer in net.layers:
        if layer.kind == "relu":
            margin = min(margin, float(np.min(np.abs(x))))
        x = layer.forward(x, training=True)
    return margin


def _network_case(norm_kind: str):
    def case(rng):
        seed = int(rng.integers(1 << 31))
        net = tiny_network(norm_kind, seed)
        # redraw until no ReLU input sits within reach of a finite-difference step of its kink
        for _ in range(100):
            x = rng.normal(size=(4, 3, 8, 8))
            if _min_relu_margin(net, x) > 1e-3:
                break
        labels = rng.integers(0, 3, size=4)

        def loss(_=None):
            return L.softmax_cross_entropy(net.forward(x, training=True), labels)[0]

        _, dlogits = L.softmax_cross_entropy(net.forward(x, training=True), labels)
        net.backward(dlogits)
        analytic = {name: g.copy() for name, _, g in net.named_parameters()}
        worst = 0.0
        for name, p, _ in net.named_parameters():
            worst = max(worst, rel_error(analytic[name], numeric_grad(loss, p)))
        return {"dparams": worst}

    return case


def check_layers(cases: int = DEFAULT_CASES, seed: int = 0) -> list[CheckResult]:
    results = []
    for op, make in (("conv2d", _conv), ("dense", _dense), ("relu", _relu), ("maxpool2d", _maxpool),
                     ("avgpool2d", _avgpool), ("globalavgpool", _gap), ("flatten", _flatten)):
        results += _collect(op, TOL_SIMPLE, cases, _layer_case(make), seed=seed)
    results += _collect("softmax_cross_entropy", TOL_SIMPLE, cases, _softmax_ce_case, seed=seed)
    return results


def check_full_network(cases: int = 3, kinds: Iterable[str] = ("bn", "gn", "uan"), seed: int = 0) -> list[CheckResult]:
    results = []
    for kind in kinds:
        results += _collect(f"network[{kind}]", TOL_NETWORK, cases, _network_case(kind), seed=seed)
    return results


def run(scope: str = "norm-layers", cases: int = DEFAULT_CASES, seed: int = 0) -> list[CheckResult]:
    """Seeds ``seed .. seed + cases - 1`` drive the random cases of every check."""
    if scope == "norm-layers":
        return check_norm_layers(cases, seed)
    if scope == "full-network":
        return check_norm_layers(cases, seed) + check_layers(cases, seed) + check_full_network(seed=seed)
    raise ValueError(f"unknown scope {scope!r}; expected 'norm-layers' or 'full-network'")


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':<24}{'quantity':<18}{'max rel err':>14}{'tol':>10}  status"]
    for r in results:
        lines.append(f"{r.op:<24}{r.quantity:<18}{r.max_rel_error:>14.3e}{r.tol:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
