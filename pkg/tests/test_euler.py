import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdsde.euler import (
    CapExceeded,
    SchemeDivergence,
    derivative_error_study,
    first_variation,
    increment_table,
    integrate,
    interpolate_on_fine,
    second_variation,
    solve,
    strong_error_study,
    terminal_state,
)
from pdsde.models import ConstantModel, DelayModel, DistributedDelayModel, MarkovianModel, ModelError
from pdsde.wiener_grid import coarsen, make_grid, sample_increment_block

DELAY = DelayModel(0.25, {"const": 1.0, "sin_u": 0.25}, {"cos_v": 0.25}, c=0.5625)
MARKOV = MarkovianModel({"const": 1.0, "sin_x": 0.25}, {"cos_x": 0.25}, c=0.5625)
DIST = DistributedDelayModel({"const": 1.0, "sin_v_cos_w": 0.3}, {"sin_w": 0.2})


def increments(n, P=3, seed=0, T=1.0):
    return sample_increment_block(seed, range(P), make_grid(T, n))


def bump_terminal(model, grid, dW, x0, cells, eps):
    out = dW.copy()
    for k in cells:
        out[..., k, 0] += eps
    return integrate(model, grid, out, x0).X[:, -1, 0]


class TestScheme:
    def test_brownian_path(self):
        p = solve(ConstantModel(1.0, 0.0), make_grid(1.0, 2), np.array([[0.3], [-0.1]]), 0.0)
        np.testing.assert_allclose(p.values[:, 0], [0.0, 0.3, 0.2])

    @given(st.integers(1, 200))
    def test_deterministic_ode_is_exact(self, n):
        grid = make_grid(1.0, n)
        X = solve(ConstantModel(0.0, 1.0), grid, np.zeros((n, 1)), 0.0)
        assert abs(X.terminal[0] - 1.0) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(2, 512),
        st.floats(-2, 2),
        st.floats(-2, 2),
        st.floats(-2, 2),
        st.integers(0, 2**32),
    )
    def test_constant_coefficients_exact_at_every_node(self, n, x0, b, s, seed):
        grid = make_grid(1.0, n)
        dW = sample_increment_block(seed, [0], grid)[0]
        X = solve(ConstantModel(s, b), grid, dW, x0).values[:, 0]
        W = np.concatenate([[0.0], np.cumsum(dW[:, 0])])
        np.testing.assert_allclose(X, x0 + b * grid.nodes + s * W, atol=1e-10, rtol=0)

    def test_divergence_reports_step(self):
        model = MarkovianModel({"const": 1.0}, {"lin_x": 1e300})
        with pytest.raises(SchemeDivergence) as exc:
            integrate(model, make_grid(1.0, 8), np.full((2, 8, 1), 0.5), 1.0)
        assert exc.value.step >= 0 and exc.value.path == 0

    @pytest.mark.parametrize("s, b", [(0.7, 0.3), ([[1.0, 0.2], [0.0, 0.5]], [0.1, -0.2])])
    def test_frozen_fast_path_matches_step_loop(self, s, b):
        class Stepped(ConstantModel):
            frozen = False

        grid = make_grid(1.0, 40)
        fast, slow = ConstantModel(s, b), Stepped(s, b)
        dW = sample_increment_block(3, range(6), grid, fast.m)
        a, c = integrate(fast, grid, dW, 0.5), integrate(slow, grid, dW, 0.5)
        np.testing.assert_allclose(a.X, c.X, atol=1e-13, rtol=0)
        np.testing.assert_array_equal(a.sigma, c.sigma)
        np.testing.assert_array_equal(a.drift, c.drift)

    def test_frozen_divergence_reports_step(self):
        dW = np.zeros((3, 8, 1))
        dW[2, 5, 0] = np.inf
        with pytest.raises(SchemeDivergence) as exc:
            integrate(ConstantModel(1.0, 0.0), make_grid(1.0, 8), dW, 0.0)
        assert (exc.value.step, exc.value.path) == (5, 2)

    def test_wrong_increment_shape(self):
        with pytest.raises(ValueError):
            integrate(MARKOV, make_grid(1.0, 4), np.zeros((1, 5, 1)), 0.0)

    def test_interpolation_hits_coarse_nodes(self):
        fine = increments(32, P=4)
        grid = make_grid(1.0, 8)
        traj = integrate(DELAY, grid, coarsen(fine, 4), 0.0)
        Xi = interpolate_on_fine(traj, fine)
        np.testing.assert_allclose(Xi[:, ::4], traj.X, atol=1e-14)

    def test_interpolation_constant_model_is_exact_solution(self):
        fine = increments(64, P=2)
        model = ConstantModel(0.7, 0.3)
        traj = integrate(model, make_grid(1.0, 4), coarsen(fine, 16), 0.5)
        exact = integrate(model, make_grid(1.0, 64), fine, 0.5)
        np.testing.assert_allclose(interpolate_on_fine(traj, fine), exact.X, atol=1e-12)


class TestFirstVariation:
    def test_constant_sigma(self):
        V = first_variation(ConstantModel(0.7, 0.2), make_grid(1.0, 6), increments(6, 1)[0], 0.0)
        np.testing.assert_allclose(V.terminal[:, 0, 0], 0.7)

    def test_linear_drift_closed_form(self):
        beta, n = 0.8, 7
        grid = make_grid(1.0, n)
        V = first_variation(MarkovianModel({"const": 1.0}, {"lin_x": beta}), grid, increments(n, 1)[0], 0.3)
        for l in range(n + 1):
            for k in range(n):
                want = (1 + beta * grid.dt) ** (l - k - 1) if k < l else 0.0
                assert V.first[k, l, 0, 0] == pytest.approx(want, rel=1e-13, abs=1e-15)

    @pytest.mark.parametrize("model", [DELAY, MARKOV, DIST], ids=["delay", "markov", "distributed"])
    def test_bump(self, model):
        n, eps = 32, 1e-5
        grid = make_grid(1.0, n)
        dW = increments(n, 2)
        V = first_variation(model, grid, dW, 0.1)
        base = integrate(model, grid, dW, 0.1).X[:, -1, 0]
        for k in (0, 5, 17, 31):
            fd = (bump_terminal(model, grid, dW, 0.1, [k], eps) - base) / eps
            np.testing.assert_allclose(fd, V.terminal[:, k, 0, 0], rtol=1e-4)

    def test_multidimensional_constant(self):
        sigma = np.array([[1.0, 0.5], [0.0, 2.0], [0.3, 0.0]])
        model = ConstantModel(sigma, np.zeros(3))
        grid = make_grid(1.0, 4)
        V = first_variation(model, grid, np.zeros((4, 2)), np.zeros(3))
        for k in range(4):
            np.testing.assert_allclose(V.terminal[k], sigma.T)

    def test_adjoint_gradient_matches_forward(self):
        grid = make_grid(1.0, 24)
        dW = increments(24, 3)
        F = terminal_state(DELAY, grid, dW, 0.0, order=1)
        V = first_variation(DELAY, grid, dW, 0.0)
        np.testing.assert_allclose(F.grad[:, 0, :, 0], V.terminal[:, :, 0, 0], rtol=1e-12, atol=1e-14)


class TestSecondVariation:
    def test_constant_is_zero(self):
        S = second_variation(ConstantModel(0.7, 0.2), make_grid(1.0, 5), increments(5, 1)[0], 0.0)
        assert not np.any(S.second)

    def test_geometric_against_central_differences(self):
        model = MarkovianModel({"lin_x": 1.0})
        T, n, eps = 0.25, 6, 1e-4
        grid = make_grid(T, n)
        dW = increments(n, 1, seed=3, T=T)
        x0 = 1.0
        S = second_variation(model, grid, dW, x0).second[0, :, :, -1, 0, 0, 0]
        for k in range(n):
            for k2 in range(n):
                def f(a, b):
                    w = dW.copy()
                    w[0, k, 0] += a
                    w[0, k2, 0] += b
                    return integrate(model, grid, w, x0).X[0, -1, 0]

                fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4 * eps**2)
                assert S[k, k2] == pytest.approx(fd, rel=1e-3, abs=1e-6)

    @pytest.mark.parametrize("model", [DELAY, MARKOV, DIST], ids=["delay", "markov", "distributed"])
    def test_symmetric(self, model):
        S = second_variation(model, make_grid(1.0, 16), increments(16, 2), 0.0).second[..., 0, 0, 0]
        assert np.max(np.abs(S - np.swapaxes(S, 1, 2))) < 1e-10

    def test_cap(self):
        grid = make_grid(1.0, 65)
        with pytest.raises(CapExceeded, match="n <= 64"):
            second_variation(DELAY, grid, np.zeros((65, 1)), 0.0)
        second_variation(DELAY, grid, np.zeros((65, 1)), 0.0, cap=65)

    def test_vector_model_rejected(self):
        model = ConstantModel(np.eye(2), np.zeros(2))
        with pytest.raises(ModelError):
            second_variation(model, make_grid(1.0, 2), np.zeros((2, 2)), np.zeros(2))


class TestTerminalState:
    def setup_method(self):
        self.grid = make_grid(1.0, 12)
        self.dW = increments(12, 3, seed=5)

    @pytest.mark.parametrize("model", [DELAY, MARKOV, DIST], ids=["delay", "markov", "distributed"])
    def test_lazy_operator_matches_dense(self, model):
        lazy = terminal_state(model, self.grid, self.dW, 0.2, order=2)
        dense = terminal_state(model, self.grid, self.dW, 0.2, order=2, dense=True)
        S = second_variation(model, self.grid, self.dW, 0.2).second[:, :, :, -1, 0, 0, 0]
        np.testing.assert_allclose(dense.hess[:, 0], S, atol=1e-13)
        op = lazy.second_order(0)
        rng = np.random.default_rng(0)
        u, v = rng.normal(size=(2, 3, 12, 1))
        np.testing.assert_allclose(op.trace(), np.trace(S, axis1=1, axis2=2), atol=1e-12)
        np.testing.assert_allclose(op.form(u, v), np.einsum("pi,pij,pj->p", u[..., 0], S, v[..., 0]), atol=1e-12)
        np.testing.assert_allclose(op.hvp(v)[..., 0], np.einsum("pij,pj->pi", S, v[..., 0]), atol=1e-12)
        np.testing.assert_allclose(op.dense(), S, atol=1e-13)

    def test_third_order_against_hessian_differences(self):
        grid = make_grid(1.0, 5)
        dW = increments(5, 2, seed=9)
        F = terminal_state(MARKOV, grid, dW, 0.3, order=3)
        eps = 1e-5
        for k in range(5):
            up, dn = dW.copy(), dW.copy()
            up[:, k, 0] += eps
            dn[:, k, 0] -= eps
            hu = terminal_state(MARKOV, grid, up, 0.3, order=3).hess[:, 0]
            hd = terminal_state(MARKOV, grid, dn, 0.3, order=3).hess[:, 0]
            np.testing.assert_allclose(F.third[:, 0, :, :, k], (hu - hd) / (2 * eps), atol=1e-7)
        D = terminal_state(MARKOV, grid, dW, 0.3, order=2, dense=True)
        np.testing.assert_allclose(F.hess, D.hess, atol=1e-13)

    def test_third_order_needs_markovian(self):
        with pytest.raises(ModelError):
            terminal_state(DELAY, self.grid, self.dW, 0.0, order=3)

    def test_third_order_cap(self):
        grid = make_grid(1.0, 17)
        with pytest.raises(CapExceeded):
            terminal_state(MARKOV, grid, np.zeros((1, 17, 1)), 0.0, order=3)

    def test_lazy_cap(self):
        grid = make_grid(1.0, 257)
        with pytest.raises(CapExceeded, match="256"):
            terminal_state(MARKOV, grid, np.zeros((1, 257, 1)), 0.0, order=2)


class TestStudies:
    def test_constant_model_exact(self):
        table = strong_error_study(ConstantModel(0.7, 0.3), 0.5, [2, 8, 32], 512, 50, seed=1)
        assert all(r.error <= 1e-10 for r in table.rows)
        assert table.exact and table.fit is None

    def test_error_stable_under_doubling_paths(self):
        a = strong_error_study(DELAY, 0.0, [4, 8], 64, 400, seed=3)
        b = strong_error_study(DELAY, 0.0, [4, 8], 64, 800, seed=3)
        for ra, rb in zip(a.rows, b.rows):
            assert abs(ra.error - rb.error) < 3 * math.hypot(ra.stderr, rb.stderr)

    def test_block_layout_does_not_change_result(self):
        a = strong_error_study(DELAY, 0.0, [8], 64, 400, seed=3, block_size=64)
        b = strong_error_study(DELAY, 0.0, [8], 64, 400, seed=3, block_size=400)
        assert a.rows[0].error == b.rows[0].error

    def test_increment_tables(self):
        table = strong_error_study(DELAY, 0.0, [4, 8, 16], 128, 200, seed=2)
        inc = increment_table(table)
        assert [r.steps for r in inc.rows] == [4, 8, 16]
        assert all(r.error > 0 for r in inc.rows)
        mm = increment_table(table, "mean_max")
        assert all(m.error >= i.error for m, i in zip(mm.rows, inc.rows))

    def test_level_validation(self):
        with pytest.raises(ValueError):
            strong_error_study(DELAY, 0.0, [3], 64, 10)
        with pytest.raises(ValueError):
            strong_error_study(DELAY, 0.0, [16], 64, 10)

    def test_derivative_study_constant_model(self):
        table = derivative_error_study(ConstantModel(0.7, 0.3), 0.0, [2, 4], 32, 20, seed=0)
        assert all(r.error <= 1e-12 for r in table.rows)

    def test_derivative_study_components(self):
        table = derivative_error_study(MARKOV, 0.0, [4, 8], 64, 100, seed=0)
        for r in table.rows:
            c = table.extras["components"][r.steps]
            assert r.error == pytest.approx(c["path_error"] + c["derivative_error"])
            assert c["derivative_error"] > 0
