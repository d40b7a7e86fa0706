import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdsde.wiener_grid import (
    FunctionalState,
    MissingDerivativeError,
    Polynomial,
    TimeGrid,
    coarsen,
    gh_expectation,
    make_grid,
    malliavin_inner,
    refine_field,
    sample_increment_block,
    sample_increments,
    skorohod,
)

finite = st.floats(-10, 10, allow_nan=False)


class TestTimeGrid:
    def test_nodes_and_dt(self):
        g = make_grid(1.0, 4)
        assert g.dt == 0.25
        np.testing.assert_array_equal(g.nodes, [0, 0.25, 0.5, 0.75, 1])

    def test_eta(self):
        g = make_grid(1.0, 4)
        assert g.eta(0.3) == 0.25
        assert g.eta(1.0) == 1.0
        assert g.eta(0.5) == 0.5

    @pytest.mark.parametrize("T, n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (math.inf, 3)])
    def test_rejects_bad_grids(self, T, n):
        with pytest.raises(ValueError):
            TimeGrid(T, n)

    def test_time_outside_horizon(self):
        with pytest.raises(ValueError):
            make_grid(1.0, 4).cell_index(1.5)

    @given(st.floats(0.1, 10), st.integers(1, 300), st.floats(0, 1))
    def test_eta_is_grid_floor(self, T, n, frac):
        g = make_grid(T, n)
        t = frac * T
        e = g.eta(t)
        assert e <= t + 1e-9 * T
        assert t - e < g.dt * (1 + 1e-9)
        assert np.isclose(e / g.dt, round(e / g.dt))


class TestSampling:
    def test_same_key_same_draw(self):
        g = make_grid(1.0, 16)
        np.testing.assert_array_equal(sample_increments(3, 17, g), sample_increments(3, 17, g))

    def test_draw_independent_of_block_layout(self):
        g = make_grid(1.0, 8)
        block = sample_increment_block(5, [4, 2, 9], g, 2)
        assert block.shape == (3, 8, 2)
        np.testing.assert_array_equal(block[1], sample_increments(5, 2, g, 2))

    def test_distinct_keys_differ(self):
        g = make_grid(1.0, 8)
        assert not np.array_equal(sample_increments(1, 0, g), sample_increments(1, 1, g))
        assert not np.array_equal(sample_increments(1, 0, g), sample_increments(2, 0, g))

    def test_first_increment_moments(self):
        g = make_grid(1.0, 4)
        N = 100_000
        x = sample_increment_block(2024, range(N), g)[:, 0, 0]
        assert abs(x.mean()) < 4 * math.sqrt(g.dt / N)
        assert abs(x.var(ddof=1) / g.dt - 1) < 0.05

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            sample_increments(-1, 0, make_grid(1.0, 2))


class TestCoarsen:
    def test_pairs(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])[:, None]
        np.testing.assert_array_equal(coarsen(x, 2)[:, 0], [3.0, 7.0])

    def test_identity(self):
        x = np.arange(6.0).reshape(6, 1)
        out = coarsen(x, 1)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    @given(arrays(float, (16, 2), elements=finite))
    def test_repeated_halving_is_bitwise_quartering(self, x):
        np.testing.assert_array_equal(coarsen(coarsen(x, 2), 2), coarsen(x, 4))

    @given(arrays(float, (12, 1), elements=finite), st.sampled_from([1, 2, 3, 4, 6, 12]))
    def test_preserves_total(self, x, f):
        assert np.isclose(coarsen(x, f).sum(), x.sum(), atol=1e-9)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            coarsen(np.zeros((6, 1)), 4)

    def test_refine_field_is_adjoint_of_coarsen(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 1))
        b = rng.normal(size=(8, 1))
        assert np.isclose(np.sum(refine_field(a, 2) * b), np.sum(a * coarsen(b, 2)))


class TestInnerProduct:
    @pytest.mark.parametrize("n", [1, 3, 64])
    def test_brownian_norm(self, n):
        g = make_grid(1.0, n)
        one = np.ones((n, 1))
        assert np.isclose(malliavin_inner(one, one, g), 1.0)

    def test_zero(self):
        g = make_grid(1.0, 5)
        assert malliavin_inner(np.zeros((5, 1)), np.ones((5, 1)), g) == 0.0

    def test_arithmetic(self):
        g = make_grid(1.0, 2)
        a = np.array([[0.0], [0.5]])
        assert malliavin_inner(a, a, g) == pytest.approx(0.125)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            malliavin_inner(np.zeros((3, 1)), np.zeros((4, 1)), make_grid(1.0, 3))

    @given(arrays(float, (6, 2), elements=finite), arrays(float, (6, 2), elements=finite))
    def test_symmetric_and_positive(self, a, b):
        g = make_grid(2.0, 6)
        assert malliavin_inner(a, b, g) == pytest.approx(malliavin_inner(b, a, g))
        assert malliavin_inner(a, a, g) >= 0


class TestSkorohod:
    def test_constant_integrand(self):
        g = make_grid(1.0, 2)
        dW = np.array([[0.3], [-0.1]])
        assert skorohod(np.ones((2, 1)), dW, g, deterministic=True) == pytest.approx(0.2)

    def test_second_hermite(self):
        g = make_grid(1.0, 1)
        dW = np.array([[0.7]])
        grad = np.ones((1, 1, 1, 1))
        assert skorohod(dW.copy(), dW, g, grad) == pytest.approx(0.49 - 1.0)

    def test_random_integrand_needs_gradient(self):
        g = make_grid(1.0, 2)
        with pytest.raises(MissingDerivativeError):
            skorohod(np.ones((2, 1)), np.ones((2, 1)), g)

    def test_cubic_integrand_has_mean_zero(self):
        g = make_grid(1.0, 2)

        def delta(dW):
            u = dW**3
            grad = np.zeros(dW.shape + (2, 1))
            for k in range(2):
                grad[:, k, 0, k, 0] = 3 * dW[:, k, 0] ** 2
            return skorohod(u, dW, g, grad)

        assert abs(gh_expectation(delta, g, 1, 20)) < 1e-10


class TestGaussHermite:
    def test_variance(self):
        assert gh_expectation(lambda w: w[:, 0, 0] ** 2, make_grid(1.0, 1)) == pytest.approx(1.0, abs=1e-12)

    def test_lognormal(self):
        val = gh_expectation(lambda w: np.exp(w.sum(axis=(1, 2))), make_grid(1.0, 2))
        assert val == pytest.approx(math.exp(0.5), abs=1e-6)

    def test_fourth_moment(self):
        assert gh_expectation(lambda w: w[:, 0, 0] ** 4, make_grid(0.5, 1)) == pytest.approx(0.75, abs=1e-12)

    def test_dimension_cap(self):
        with pytest.raises(ValueError):
            gh_expectation(lambda w: w[:, 0, 0], make_grid(1.0, 5))


class TestFunctionalState:
    def test_brownian(self):
        dW = np.array([[[0.1], [0.2], [-0.4]]])
        F = FunctionalState.brownian(dW)
        assert F.value[0, 0] == pytest.approx(-0.1)
        np.testing.assert_array_equal(F.grad, np.ones((1, 1, 3, 1)))
        assert F.d == 1 and F.n == 3 and F.m == 1

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            FunctionalState(np.zeros((2, 1)), np.zeros((3, 1, 4, 1)))

    def test_stack_and_component(self):
        dW = np.random.default_rng(1).normal(size=(5, 3, 2))
        F = FunctionalState.stack([FunctionalState.brownian(dW, 0), FunctionalState.brownian(dW, 1)])
        assert F.d == 2
        np.testing.assert_array_equal(F.component(1).value[:, 0], dW[..., 1].sum(axis=-1))

    def test_polynomial_derivatives_match_finite_differences(self):
        poly = Polynomial({(1, 0): 1.0, (3, 0): 0.1, (1, 2): 0.4})
        dW = np.array([[[0.3], [-0.2]]])
        F = poly.state(dW, order=3)
        eps = 1e-6
        for i in range(2):
            bump = dW.copy()
            bump[0, i, 0] += eps
            fd_grad = (poly(bump) - poly(dW - (bump - dW))) / (2 * eps)
            assert F.grad[0, 0, i, 0] == pytest.approx(fd_grad[0], rel=1e-8)
            fd_hess = (poly.state(bump, 1).grad - poly.state(dW - (bump - dW), 1).grad)[0, 0, :, 0] / (2 * eps)
            np.testing.assert_allclose(F.hess[0, 0, i], fd_hess, rtol=1e-6, atol=1e-9)

    def test_refine_keeps_value_and_spreads_gradient(self):
        fine = np.random.default_rng(2).normal(size=(1, 8, 1))
        coarse = coarsen(fine, 4)
        F = Polynomial({(2, 0): 1.0, (1, 1): 1.0}).state(coarse, order=2)
        R = F.refine(fine)
        np.testing.assert_array_equal(R.value, F.value)
        np.testing.assert_array_equal(R.grad[0, 0, :4], np.repeat(F.grad[0, 0, :1], 4, axis=0))
        u = np.random.default_rng(3).normal(size=(1, 8, 1))
        dense = R.second_order(0).dense()
        assert R.second_order(0).form(u, u)[0] == pytest.approx(u[0, :, 0] @ dense[0] @ u[0, :, 0])

    def test_refine_rejects_mismatched_increments(self):
        fine = np.ones((1, 4, 1))
        F = FunctionalState.brownian(np.ones((1, 2, 1)))
        with pytest.raises(ValueError):
            F.refine(fine * 2)
