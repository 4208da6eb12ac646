import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import batch_statistics_1d, central_diff, mixture_norm_1d, posterior_1d, rel_error
from normkit.gmm import GmmParams
from normkit.norm import (
    BnState,
    ContextConsumedError,
    Partition,
    UanState,
    bn_backward,
    bn_forward,
    mixture_norm_forward,
    mn_backward,
    mn_layer,
    partition_norm_backward,
    partition_norm_forward,
    uan_backward,
    uan_forward_infer,
    uan_forward_train,
    uan_init,
    uan_moving_average_update,
)
from normkit.tensor import to_positions

# frozen from tests/oracles.py::mixture_norm_1d (plain-loop evaluation)
FOUR_SCALAR_BATCH = [-2.0, -1.0, 1.0, 2.0]
FOUR_SCALAR_EXPECTED = [-1.244351873783255, 0.6901251430833429, -0.6901251430833429, 1.244351873783255]
FOUR_SCALAR_GMM = dict(weights=[0.5, 0.5], means=[-1.5, 1.5], variances=[1.0, 1.0])


def as_nc11(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)


def uan_state(weights, means, variances, **kw):
    return UanState(np.log(np.asarray(weights, float)), np.atleast_2d(np.asarray(means, float)),
                    np.log(np.atleast_2d(np.asarray(variances, float))), **kw)


def random_uan(r, k, d, mode="weight", momentum=0.9, eps=1e-5, affine=False):
    st_ = UanState(r.normal(size=k), r.normal(size=(k, d)), r.normal(scale=0.3, size=(k, d)),
                   mode=mode, momentum=momentum, epsilon=eps)
    if affine:
        st_.gamma, st_.beta = r.normal(size=d), r.normal(size=d)
    return st_


class TestBatchNorm:
    def test_derived_example(self):
        st_ = BnState.create(1, epsilon=0.0)
        y, _ = bn_forward(as_nc11([1.0, 2.0, 3.0]), st_)
        np.testing.assert_allclose(y.ravel(), [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], atol=1e-15)

    def test_constant_input_gives_beta(self):
        st_ = BnState.create(2)
        st_.beta[:] = [0.5, -1.0]
        y, _ = bn_forward(np.full((4, 2, 3, 3), 7.0), st_)
        assert np.all(y[:, 0] == 0.5) and np.all(y[:, 1] == -1.0)

    def test_output_moments(self, rng):
        eps = 1e-5
        x = rng.normal(size=(16, 3, 4, 4)) * 0.05
        y, _ = bn_forward(x, BnState.create(3, epsilon=eps))
        var_b = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0 / (1.0 + eps / var_b), rtol=1e-10)

    def test_running_stats_update(self, rng):
        st_ = BnState.create(2, momentum=0.1)
        x = rng.normal(size=(8, 2, 3)) * 2 + 1
        bn_forward(x, st_)
        np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2)), rtol=1e-14)
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)), rtol=1e-14)

    def test_inference_uses_running_stats(self, rng):
        st_ = BnState.create(2)
        st_.running_mean[:] = [1.0, -1.0]
        st_.running_var[:] = [4.0, 0.25]
        x = rng.normal(size=(3, 2, 2))
        y, _ = bn_forward(x, st_, training=False)
        expect = (x - st_.running_mean[None, :, None]) / np.sqrt(st_.running_var + st_.epsilon)[None, :, None]
        np.testing.assert_allclose(y, expect, rtol=1e-14)
        assert st_.running_mean.tolist() == [1.0, -1.0]

    def test_backward_matches_fd(self, rng):
        x = rng.normal(size=(8, 3, 5))
        st_ = BnState.create(3)
        st_.gamma, st_.beta = rng.normal(size=3), rng.normal(size=3)
        w = rng.normal(size=x.shape)

        def f(xx):
            return float((bn_forward(xx, BnState(st_.gamma, st_.beta, np.zeros(3), np.ones(3)))[0] * w).sum())

        _, ctx = bn_forward(x, st_)
        dx, _ = bn_backward(ctx, w)
        assert rel_error(dx, central_diff(f, x)) < 1e-6

    def test_dx_sums_to_zero_per_channel(self, rng):
        _, ctx = bn_forward(rng.normal(size=(6, 4, 3)), BnState.create(4))
        dx, _ = bn_backward(ctx, rng.normal(size=(6, 4, 3)))
        np.testing.assert_allclose(dx.sum(axis=(0, 2)), 0.0, atol=1e-12)

    def test_zero_upstream(self, rng):
        _, ctx = bn_forward(rng.normal(size=(5, 2)), BnState.create(2))
        dx, g = bn_backward(ctx, np.zeros((5, 2)))
        assert not dx.any() and not g["gamma"].any() and not g["beta"].any()

    def test_context_single_use(self, rng):
        _, ctx = bn_forward(rng.normal(size=(5, 2)), BnState.create(2))
        bn_backward(ctx, np.ones((5, 2)))
        with pytest.raises(ContextConsumedError):
            bn_backward(ctx, np.ones((5, 2)))

    @pytest.mark.parametrize("shape", [(0, 2, 3), (4, 3, 2)])
    def test_errors(self, shape):
        with pytest.raises(ValueError):
            bn_forward(np.ones(shape), BnState.create(2))

    def test_json_round_trip(self, rng):
        st_ = BnState.create(3, momentum=0.3, epsilon=1e-3)
        st_.gamma, st_.running_var = rng.normal(size=3), rng.uniform(0, 5, 3)
        back = BnState.from_json(st_.to_json())
        for f in ("gamma", "beta", "running_mean", "running_var"):
            assert np.array_equal(getattr(back, f), getattr(st_, f))
        assert (back.momentum, back.epsilon) == (0.3, 1e-3)


class TestPartitionNorm:
    @given(st.integers(0, 2**31), st.sampled_from([1, 2, 4, 6]))
    def test_group_one_is_layer_bitwise(self, seed, c):
        x = np.random.default_rng(seed).normal(size=(3, c, 2, 3)) * 5
        a, _ = partition_norm_forward(x, Partition.group(1))
        b, _ = partition_norm_forward(x, Partition.layer())
        assert np.array_equal(a, b)

    @given(st.integers(0, 2**31), st.sampled_from([1, 2, 4, 6]))
    def test_group_c_is_instance_bitwise(self, seed, c):
        x = np.random.default_rng(seed).normal(size=(3, c, 2, 3)) * 5
        a, _ = partition_norm_forward(x, Partition.group(c))
        b, _ = partition_norm_forward(x, Partition.instance())
        assert np.array_equal(a, b)

    def test_single_sample_single_channel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        ln, _ = partition_norm_forward(x, Partition.layer())
        inn, _ = partition_norm_forward(x, Partition.instance())
        bn, _ = partition_norm_forward(x, Partition.batch())
        np.testing.assert_allclose(ln, inn, atol=1e-15)
        np.testing.assert_allclose(ln, bn, atol=1e-15)

    def test_batch_scheme_matches_bn(self, rng):
        x = rng.normal(size=(5, 3, 2, 2))
        a, _ = partition_norm_forward(x, Partition.batch(), eps=1e-5)
        b, _ = bn_forward(x, BnState.create(3, epsilon=1e-5))
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_layer_statistics(self, rng):
        x = rng.normal(size=(4, 6, 3)) * 3 + 2
        y, _ = partition_norm_forward(x, Partition.layer(), eps=0.0)
        np.testing.assert_allclose(y.reshape(4, -1).mean(axis=1), 0, atol=1e-13)
        np.testing.assert_allclose(y.reshape(4, -1).var(axis=1), 1, atol=1e-12)

    def test_group_must_divide(self):
        with pytest.raises(ValueError):
            partition_norm_forward(np.ones((2, 6, 2)), Partition.group(4))

    @pytest.mark.parametrize("part", [Partition.layer(), Partition.instance(), Partition.group(2)])
    def test_backward_matches_fd(self, rng, part):
        x = rng.normal(size=(3, 4, 5))
        gamma, beta, w = rng.normal(size=4), rng.normal(size=4), rng.normal(size=x.shape)
        _, ctx = partition_norm_forward(x, part, gamma=gamma, beta=beta)
        dx, grads = partition_norm_backward(ctx, w)
        assert rel_error(dx, central_diff(lambda xx: float((partition_norm_forward(xx, part, gamma=gamma, beta=beta)[0] * w).sum()), x)) < 1e-6
        assert rel_error(grads["gamma"], central_diff(lambda g: float((partition_norm_forward(x, part, gamma=g, beta=beta)[0] * w).sum()), gamma)) < 1e-6

    def test_zero_upstream(self, rng):
        _, ctx = partition_norm_forward(rng.normal(size=(2, 4, 3)), Partition.group(2))
        dx, _ = partition_norm_backward(ctx, np.zeros((2, 4, 3)))
        assert not dx.any()


class TestMixtureNorm:
    def test_four_scalar_oracle(self):
        g = FOUR_SCALAR_GMM
        gmm = GmmParams(np.array(g["weights"]), np.array(g["means"])[:, None], np.array(g["variances"])[:, None])
        y, _ = mixture_norm_forward(as_nc11(FOUR_SCALAR_BATCH), gmm, eps=1e-5)
        np.testing.assert_allclose(y.ravel(), FOUR_SCALAR_EXPECTED, atol=1e-14)
        oracle = mixture_norm_1d(FOUR_SCALAR_BATCH, g["weights"], g["means"], g["variances"], 1e-5)
        np.testing.assert_allclose(oracle, FOUR_SCALAR_EXPECTED, atol=1e-14)

    def test_symmetric_points_antisymmetric_output(self):
        gmm = GmmParams(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.ones((2, 1)))
        y, _ = mixture_norm_forward(as_nc11([-0.7, 0.7]), gmm)
        assert y.ravel()[0] == pytest.approx(-y.ravel()[1], abs=1e-15)

    @pytest.mark.parametrize("seed", range(50))
    def test_k1_equals_bn(self, seed):
        r = np.random.default_rng(seed)
        c = int(r.integers(1, 5))
        x = r.normal(size=(int(r.integers(2, 6)), c, 3, 2)) * r.uniform(0.1, 10) + r.normal()
        eps = float(r.choice([1e-5, 1e-3, 0.0]))
        gmm = GmmParams(np.ones(1), r.normal(size=(1, c)), r.uniform(0.5, 2, (1, c)))
        y_mn, _ = mn_layer(x, gmm, eps)
        y_bn, _ = bn_forward(x, BnState.create(c, epsilon=eps))
        assert np.max(np.abs(y_mn - y_bn)) < 1e-10

    def test_dead_component_contributes_nothing(self, rng):
        x = rng.normal(size=(6, 2))
        tau = np.column_stack([np.ones(6), np.zeros(6)])
        gmm = GmmParams(np.array([0.5, 0.5]), np.zeros((2, 2)), np.ones((2, 2)))
        y, ctx = mixture_norm_forward(x, gmm, tau=tau)
        xh = (x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5)
        np.testing.assert_allclose(y, xh / math.sqrt(0.5), atol=1e-13)
        assert ctx.saved["alive"].tolist() == [True, False]

    def test_backward_with_fixed_responsibilities(self, rng):
        x = rng.normal(size=(5, 3, 2, 2))
        w8 = rng.uniform(0.2, 1, 3)
        gmm = GmmParams(w8 / w8.sum(), rng.normal(size=(3, 3)), rng.uniform(0.5, 2, (3, 3)))
        y, ctx = mn_layer(x, gmm)
        tau = ctx.saved["tau"].copy()
        w = rng.normal(size=x.shape)
        dx = mn_backward(ctx, w)
        num = central_diff(lambda xx: float((mixture_norm_forward(xx, gmm, tau=tau)[0] * w).sum()), x)
        assert rel_error(dx, num) < 1e-6

    def test_dimension_mismatch(self):
        gmm = GmmParams(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
        with pytest.raises(ValueError):
            mn_layer(np.ones((4, 2)), gmm)


class TestUanForward:
    def test_four_scalar_oracle(self):
        g = FOUR_SCALAR_GMM
        st_ = uan_state(g["weights"], np.array(g["means"])[:, None], np.array(g["variances"])[:, None])
        y, _ = uan_forward_train(as_nc11(FOUR_SCALAR_BATCH), st_)
        np.testing.assert_allclose(y.ravel(), FOUR_SCALAR_EXPECTED, atol=1e-14)

    @pytest.mark.parametrize("seed", range(50))
    def test_k1_equals_bn(self, seed):
        r = np.random.default_rng(seed)
        c = int(r.integers(1, 5))
        x = r.normal(size=(int(r.integers(2, 6)), c, 2, 3)) * r.uniform(0.1, 10)
        st_ = random_uan(r, 1, c)
        y, _ = uan_forward_train(x, st_)
        y_bn, _ = bn_forward(x, BnState.create(c, epsilon=st_.epsilon))
        assert np.max(np.abs(y - y_bn)) < 1e-10

    @given(st.integers(0, 2**31))
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        st_ = random_uan(r, 4, 3)
        x = r.normal(size=(5, 3, 2, 2))
        perm = r.permutation(4)
        a, _ = uan_forward_train(x, st_)
        b, _ = uan_forward_train(x, st_.permuted(perm))
        assert np.max(np.abs(a - b)) < 1e-12
        np.testing.assert_allclose(uan_forward_infer(x, st_), uan_forward_infer(x, st_.permuted(perm)), atol=1e-12)

    def test_affine_applied_last(self, rng):
        st_ = random_uan(rng, 2, 3)
        x = rng.normal(size=(4, 3))
        plain, _ = uan_forward_train(x, st_)
        st_.gamma, st_.beta = np.array([2.0, 1.0, -1.0]), np.array([0.5, 0.0, 3.0])
        y, _ = uan_forward_train(x, st_)
        np.testing.assert_allclose(y, plain * st_.gamma + st_.beta, atol=1e-14)


class TestUanInference:
    def test_identity_for_standard_cluster(self, rng):
        st_ = uan_state([1.0], [[0.0, 0.0]], [[1.0, 1.0]], epsilon=0.0)
        x = rng.normal(size=(7, 2))
        np.testing.assert_allclose(uan_forward_infer(x, st_), x, atol=1e-15)

    def test_zero_at_the_mean(self):
        st_ = uan_state([1.0], [[0.3, -2.0]], [[0.5, 4.0]])
        assert not np.any(uan_forward_infer(np.array([[0.3, -2.0]]), st_))

    def test_derived_value(self):
        st_ = uan_state([0.5, 0.5], [[0.0], [2.0]], [[1.0], [1.0]], epsilon=0.0)
        y = uan_forward_infer(np.zeros((1, 1)), st_).item()
        tau = posterior_1d(0.0, [0.5, 0.5], [0, 2], [1, 1])
        assert y == pytest.approx(tau[1] / math.sqrt(0.5) * -2.0, abs=1e-14)
        assert y == pytest.approx(-0.3372, abs=1e-4)

    def test_single_sample_deterministic(self, rng):
        st_ = random_uan(rng, 3, 4)
        x = rng.normal(size=(1, 4, 2, 2))
        assert np.array_equal(uan_forward_infer(x, st_), uan_forward_infer(x, st_))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            uan_forward_infer(np.ones((2, 5)), random_uan(rng, 2, 4))


class TestUanBackward:
    def test_matches_fd_through_responsibilities(self, rng):
        st_ = UanState(rng.normal(size=3), rng.normal(size=(3, 2)), rng.uniform(-0.3, 0.3, (3, 2)))
        x = rng.normal(size=(6, 2, 2, 2))
        w = rng.normal(size=x.shape)

        def loss(xx=x, **over):
            s = UanState(over.get("logits", st_.weight_logits), over.get("means", st_.means),
                         over.get("log_vars", st_.log_vars))
            return float((uan_forward_train(xx, s)[0] * w).sum())

        _, ctx = uan_forward_train(x, st_)
        g = uan_backward(ctx, w)
        assert rel_error(g.dx, central_diff(lambda v: loss(v), x)) < 1e-4
        assert rel_error(g.d_weight_logits, central_diff(lambda v: loss(logits=v), st_.weight_logits)) < 1e-4
        assert rel_error(g.d_means, central_diff(lambda v: loss(means=v), st_.means)) < 1e-4
        assert rel_error(g.d_log_vars, central_diff(lambda v: loss(log_vars=v), st_.log_vars)) < 1e-4

    def test_k1_cluster_parameters_get_no_gradient(self, rng):
        st_ = random_uan(rng, 1, 3)
        _, ctx = uan_forward_train(rng.normal(size=(5, 3)), st_)
        g = uan_backward(ctx, rng.normal(size=(5, 3)))
        assert np.all(np.abs(g.d_means) < 1e-12) and np.all(np.abs(g.d_log_vars) < 1e-12)
        assert abs(g.d_weight_logits[0]) < 1e-12

    def test_zero_upstream(self, rng):
        st_ = random_uan(rng, 3, 2, affine=True)
        _, ctx = uan_forward_train(rng.normal(size=(4, 2, 2)), st_)
        g = uan_backward(ctx, np.zeros((4, 2, 2)))
        for arr in (g.dx, g.d_weight_logits, g.d_means, g.d_log_vars, g.d_gamma, g.d_beta):
            assert not np.any(arr)

    def test_context_single_use(self, rng):
        st_ = random_uan(rng, 2, 2)
        _, ctx = uan_forward_train(rng.normal(size=(4, 2)), st_)
        uan_backward(ctx, np.ones((4, 2)))
        with pytest.raises(ContextConsumedError):
            uan_backward(ctx, np.ones((4, 2)))


class TestMovingAverage:
    batch = [-2.0, -0.5, 0.3, 1.0, 2.5, 3.0]
    init = dict(weights=[0.3, 0.7], means=[-1.0, 2.0], variances=[0.8, 1.5])

    def make(self, m):
        i = self.init
        return uan_state(i["weights"], np.array(i["means"])[:, None], np.array(i["variances"])[:, None],
                         mode="moving_average", momentum=m)

    def step(self, st_):
        _, ctx = uan_forward_train(as_nc11(self.batch), st_)
        return uan_moving_average_update(st_, ctx)

    def test_m1_is_noop(self):
        st_ = self.make(1.0)
        before = (st_.weights.copy(), st_.means.copy(), st_.variances.copy())
        self.step(st_)
        np.testing.assert_allclose(st_.weights, before[0], atol=1e-15)
        np.testing.assert_allclose(st_.means, before[1], atol=1e-15)
        np.testing.assert_allclose(st_.variances, before[2], rtol=1e-15)

    def test_m0_takes_batch_statistics(self):
        stats = batch_statistics_1d(self.batch, **self.init)
        st_ = self.step(self.make(0.0))
        np.testing.assert_allclose(st_.weights, [s[0] for s in stats], atol=1e-14)
        np.testing.assert_allclose(st_.means[:, 0], [s[1] for s in stats], atol=1e-14)
        np.testing.assert_allclose(st_.variances[:, 0], [s[2] for s in stats], rtol=1e-13)

    def test_m09_convex_combination(self):
        i = self.init
        stats = batch_statistics_1d(self.batch, **i)
        st_ = self.step(self.make(0.9))
        lam = [0.9 * w + 0.1 * s[0] for w, s in zip(i["weights"], stats)]
        mu = [0.9 * m + 0.1 * s[1] for m, s in zip(i["means"], stats)]
        var = [0.9 * v + 0.1 * s[2] for v, s in zip(i["variances"], stats)]
        assert np.max(np.abs(st_.weights - lam)) < 1e-12
        assert np.max(np.abs(st_.means[:, 0] - mu)) < 1e-12
        assert np.max(np.abs(st_.variances[:, 0] - var)) < 1e-12

    def test_dead_component_keeps_mean_and_variance(self):
        st_ = uan_state([0.5, 0.5], [[0.0], [1e6]], [[1.0], [1e-4]], mode="moving_average", momentum=0.5)
        _, ctx = uan_forward_train(as_nc11([0.1, -0.3, 0.4]), st_)
        uan_moving_average_update(st_, ctx)
        assert st_.means[1, 0] == 1e6 and st_.variances[1, 0] == pytest.approx(1e-4, rel=1e-12)
        assert st_.weights.sum() == pytest.approx(1.0, abs=1e-15) and st_.weights[1] > 0

    def test_wrong_mode(self, rng):
        st_ = random_uan(rng, 2, 2, mode="weight")
        _, ctx = uan_forward_train(rng.normal(size=(4, 2)), st_)
        with pytest.raises(ValueError):
            uan_moving_average_update(st_, ctx)


class TestUanState:
    def test_init_ranges_over_many_seeds(self):
        for seed in range(1000):
            st_ = uan_init(3, 4, seed)
            assert abs(st_.weights.sum() - 1) < 1e-12
            sigma = np.sqrt(st_.variances)
            assert np.all((sigma >= 0.001 - 1e-15) & (sigma <= 0.01 + 1e-15))
            assert np.all(np.abs(st_.means) <= 1.0)
            raw_ratio = st_.weights.max() / st_.weights.min()
            assert raw_ratio <= 0.99 / 0.01 + 1e-9

    def test_init_reproducible(self):
        a, b = uan_init(3, 5, 42), uan_init(3, 5, 42)
        assert np.array_equal(a.means, b.means) and np.array_equal(a.log_vars, b.log_vars)

    @pytest.mark.parametrize("k,d,expected", [(3, 64, 387), (5, 128, 1285), (2, 1, 6)])
    def test_parameter_count(self, k, d, expected):
        assert uan_init(k, d).parameter_count() == expected == 2 * k * d + k

    def test_affine_adds_two_per_channel(self):
        assert uan_init(3, 8, affine=True).parameter_count() == 2 * 3 * 8 + 3 + 16

    def test_json_round_trip_is_exact(self, rng):
        st_ = random_uan(rng, 3, 4, mode="moving_average", momentum=0.99, affine=True)
        doc = st_.to_dict()
        assert list(doc) == ["k", "d", "weight_logits", "means", "log_vars", "mode", "momentum", "epsilon", "gamma", "beta"]
        back = UanState.from_json(st_.to_json())
        for f in ("weight_logits", "means", "log_vars", "gamma", "beta"):
            assert np.array_equal(getattr(back, f), getattr(st_, f))
        assert (back.mode, back.momentum, back.epsilon) == ("moving_average", 0.99, st_.epsilon)

    @pytest.mark.parametrize("kw", [dict(mode="ema"), dict(momentum=1.5)])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            UanState(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), **kw)

    def test_positions_used_for_responsibilities(self, rng):
        st_ = random_uan(rng, 2, 3)
        x = rng.normal(size=(2, 3, 2, 2))
        _, ctx = uan_forward_train(x, st_)
        assert ctx.saved["tau"].shape == (to_positions(x).shape[0], 2)
