import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsde.models import (
    ConstantModel,
    DelayModel,
    DiscretePath,
    DistributedDelayModel,
    MarkovianModel,
    ModelError,
    SmoothCoefficient,
    check_ellipticity,
    coeff_gradients,
    coeff_hessians,
    eval_coeffs,
    lipschitz_constants,
    model_from_config,
)
from pdsde.wiener_grid import make_grid

MARKOV = MarkovianModel({"const": 1.0, "sin_x": 0.25})
DELAY = DelayModel(0.25, {"const": 1.0, "sin_u": 0.25}, {"cos_v": 0.25}, c=0.5625)


def path(values, T=1.0):
    v = np.asarray(values, dtype=float)[:, None]
    return DiscretePath(v, make_grid(T, len(v) - 1))


def test_markovian_at_zero():
    s, b = eval_coeffs(MARKOV, 2, path([0.3, -0.2, 0.0, 1.0]))
    assert s[0, 0] == 1.0 and b[0] == 0.0


def test_delay_uses_constant_prehistory():
    p = path([0.0, 2.0, -1.0, 0.5, 1.5, 0.0, 0.0, 0.0, 0.0])
    s, _ = eval_coeffs(DELAY, 1, p)
    assert s[0, 0] == 1.0


def test_delay_reads_interpolated_past():
    # tau = 0.3 on dt = 0.25: u = X(0.2) = 0.8 X(0.25) + 0.2 X(0)
    model = DelayModel(0.3, {"lin_u": 1.0})
    p = path([1.0, 2.0, 5.0, 7.0, 9.0])
    s, _ = eval_coeffs(model, 2, p)
    assert s[0, 0] == pytest.approx(0.2 * 1.0 + 0.8 * 2.0)


def test_constant_model_ignores_path():
    m = ConstantModel(0.7, 0.3)
    a = eval_coeffs(m, 1, path([0.0, 5.0, 1.0]))
    b = eval_coeffs(m, 1, path([3.0, -2.0, 9.0]))
    assert a[0][0, 0] == b[0][0, 0] == 0.7
    assert a[1][0] == b[1][0] == 0.3
    assert coeff_gradients(m, 1, path([0.0, 5.0, 1.0])) == {}
    assert coeff_hessians(m, 1, path([0.0, 5.0, 1.0])) == {}


def test_markovian_gradient_single_entry():
    g = coeff_gradients(MARKOV, 1, path([0.4, 0.0, 1.0]))
    assert list(g) == [(1, 0)]
    assert g[(1, 0)][0][0, 0] == pytest.approx(0.25)


def test_markovian_second_partial_vanishes_at_zero():
    h = coeff_hessians(MARKOV, 1, path([0.4, 0.0, 1.0]))
    assert h.get((1, 1), (0.0, 0.0))[0] == 0.0


def test_delay_gradient_support_and_finite_differences():
    model = DelayModel(0.25, {"const": 1.0, "sin_u": 0.25, "sin_v": 0.1}, {"cos_v": 0.25})
    rng = np.random.default_rng(0)
    p = path(rng.normal(size=9))
    g = coeff_gradients(model, 6, p)
    assert sorted(s for s, _ in g) == [4, 6]
    eps = 1e-6
    for (s, _), (ds, db) in g.items():
        up, dn = p.values.copy(), p.values.copy()
        up[s] += eps
        dn[s] -= eps
        su, bu = eval_coeffs(model, 6, DiscretePath(up, p.grid))
        sd, bd = eval_coeffs(model, 6, DiscretePath(dn, p.grid))
        assert ds[0, 0] == pytest.approx((su - sd)[0, 0] / (2 * eps), abs=1e-6)
        assert db[0] == pytest.approx((bu - bd)[0] / (2 * eps), abs=1e-6)


@pytest.mark.parametrize("v, expected", [(0.0, 0.0), (math.pi / 2, -0.2)])
def test_delay_cross_partial(v, expected):
    model = DelayModel(0.5, {"const": 1.0, "sin_u_cos_v": 0.2})
    p = path([0.0, 0.0, v])
    h = coeff_hessians(model, 2, p)
    # u = X(t_1), v = X(t_2)
    assert h.get((1, 2), (0.0, 0.0))[0] == pytest.approx(expected, abs=1e-15)
    assert h.get((2, 1), (0.0, 0.0))[0] == pytest.approx(expected, abs=1e-15)


def test_hessians_match_finite_differences():
    model = DistributedDelayModel({"const": 1.0, "sin_v_cos_w": 0.3}, {"lin_w": 0.2, "sin_v": 0.4})
    rng = np.random.default_rng(4)
    p = path(rng.normal(size=5))
    l = 3
    h = coeff_hessians(model, l, p)
    eps = 1e-5
    for (s, s2), (hs, _) in h.items():
        up, dn = p.values.copy(), p.values.copy()
        up[s2] += eps
        dn[s2] -= eps
        gu = coeff_gradients(model, l, DiscretePath(up, p.grid)).get((s, 0), (np.zeros((1, 1)), None))[0]
        gd = coeff_gradients(model, l, DiscretePath(dn, p.grid)).get((s, 0), (np.zeros((1, 1)), None))[0]
        assert hs == pytest.approx((gu - gd)[0, 0] / (2 * eps), abs=1e-7)


def test_index_outside_grid():
    with pytest.raises(ModelError):
        eval_coeffs(MARKOV, 5, path([0.0, 1.0]))


def test_ellipticity_markovian():
    paths = [path(np.linspace(-4, 4, 201))]
    rep = check_ellipticity(MarkovianModel({"const": 1.0, "sin_x": 0.25}, c=0.5), paths)
    assert rep.min_eigenvalue >= 0.5625 - 1e-3
    assert rep.passed


def test_ellipticity_degenerate():
    rep = check_ellipticity(ConstantModel(0.0, 0.0, c=0.1), [path([0.0, 1.0])])
    assert rep.min_eigenvalue == 0.0
    assert not rep.passed


def test_ellipticity_delay_grid_search():
    # tau = T = dt, so step 1 reads u = X(0) and v = X(1)
    model = DelayModel(1.0, {"const": 1.0, "sin_u": 0.2, "cos_v": 0.2}, c=0.36)
    vals = np.linspace(-2 * math.pi, 2 * math.pi, 41)
    paths = [path([u, v]) for u in vals for v in vals]
    rep = check_ellipticity(model, paths)
    assert rep.min_eigenvalue >= 0.36 - 1e-12
    # the bound is attained at u = -pi/2, v = pi
    assert rep.min_eigenvalue < 0.37


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_sine_model_elliptic_everywhere(u, v):
    s, _ = eval_coeffs(DELAY, 4, path([u, 0.0, 0.0, 0.0, v]))
    assert s[0, 0] ** 2 >= DELAY.c - 1e-12


def test_smooth_coefficient_rejects_bad_terms():
    with pytest.raises(ModelError):
        SmoothCoefficient(("x",), {"tan_x": 1.0})
    with pytest.raises(ModelError):
        SmoothCoefficient(("x",), {"sin_u": 1.0})


def test_lipschitz_constants():
    lc = lipschitz_constants(DELAY, 1.0)
    assert lc["lipschitz"] == pytest.approx(0.25)
    assert lipschitz_constants(ConstantModel(0.7, 0.3), 1.0)["lipschitz"] == 0.0


def test_model_from_config():
    m = model_from_config({"kind": "delay", "tau": 0.25, "sigma": {"const": 1.0, "sin_u": 0.25}, "c": 0.5})
    assert m.kind == "delay" and m.c == 0.5 and not m.markovian
    assert model_from_config({"kind": "markovian", "sigma": {"const": 1.0}}).markovian
    with pytest.raises(ModelError):
        model_from_config({"kind": "delay", "sigma": {"const": 1.0}})
    with pytest.raises(ModelError):
        model_from_config({"kind": "bogus"})
    with pytest.raises(ModelError):
        DelayModel(0.0, {"const": 1.0})
