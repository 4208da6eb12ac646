import numpy as np
import pytest

from normkit import gradcheck as gc

from oracles import central_diff


def test_numeric_grad_restores_input(rng):
    x = rng.normal(size=(3, 4))
    before = x.copy()
    g = gc.numeric_grad(lambda z: float((z**3).sum()), x)
    assert np.array_equal(x, before)
    np.testing.assert_allclose(g, 3 * x**2, rtol=1e-8)
    np.testing.assert_allclose(g, central_diff(lambda z: float((z**3).sum()), x), rtol=1e-12)


def test_rel_error():
    assert gc.rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert gc.rel_error(np.ones(2), -np.ones(2)) == 1.0
    assert gc.rel_error([3.0, 4.0], [3.0, 4.0]) == 0.0


def test_norm_layers_default_cases():
    results = gc.run("norm-layers")
    assert {r.op for r in results} == {"bn", "ln", "in", "gn", "mn", "uan", "uan_affine"}
    assert all(r.cases == gc.DEFAULT_CASES == 20 for r in results)
    for r in results:
        assert r.passed, f"{r.op} {r.quantity}: {r.max_rel_error}"
        assert r.tol == (gc.TOL_MIXTURE if r.op in ("mn", "uan", "uan_affine") else gc.TOL_SIMPLE)


def test_full_network_scope():
    results = gc.run("full-network", cases=5, seed=100)
    ops = {r.op for r in results}
    assert {"conv2d", "dense", "relu", "maxpool2d", "softmax_cross_entropy"} <= ops
    assert {"network[bn]", "network[gn]", "network[uan]"} <= ops
    assert all(r.passed for r in results)


def test_uan_parameter_gradients_covered():
    quantities = {r.quantity for r in gc.check_norm_layers(cases=2) if r.op == "uan_affine"}
    assert quantities == {"dx", "d_weight_logits", "d_means", "d_log_vars", "d_gamma", "d_beta"}


def test_unknown_scope():
    with pytest.raises(ValueError):
        gc.run("everything")


def test_report_marks_failures():
    text = gc.format_report([gc.CheckResult("bn", "dx", 1e-3, 1e-6, 1), gc.CheckResult("bn", "dgamma", 0.0, 1e-6, 1)])
    assert text.splitlines()[1].endswith("FAIL") and text.splitlines()[2].endswith("PASS")
