"""Malliavin covariance, integration-by-parts weights and localization.

All routines act on batches: a :class:`FunctionalState` with batch shape
``(P,)`` yields per-sample arrays of shape ``(P,)``.

The first-order weight is

    H_i(F, G) = sum_j delta(gamma^{ij} G DF_j)
              = sum_j [gamma^{ij} G delta(DF_j) - G <D gamma^{ij}, DF_j> - gamma^{ij} <DG, DF_j>]

with ``D gamma = -gamma (D Sigma) gamma``. Only traces and bilinear forms of
``D^2 F`` enter, so a lazy second-order operator suffices. The gradient of
the weight, needed to iterate, is assembled densely from third derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .wiener_grid import FunctionalState, MissingDerivativeError, TimeGrid, malliavin_inner

__all__ = [
    "CovarianceMatrix",
    "CutoffSpec",
    "DegenerateSampleError",
    "WeightSample",
    "covariance",
    "ibp_weight_first",
    "ibp_weight_iterated",
    "ou_apply",
    "localization_R",
    "localization_weight",
    "cutoff",
    "cutoff_derivative",
    "DET_FLOOR",
]

# relative floor: det below DET_FLOOR * (trace / d)^d counts as degenerate
DET_FLOOR = 1e-12


class DegenerateSampleError(ValueError):
    def __init__(self, count: int, first: int):
        super().__init__(
            f"{count} sample(s) have a singular Malliavin covariance (first at batch index {first}) "
            "and a weight G that does not vanish there; localize G or use policy='drop'"
        )
        self.count = count
        self.first = first


@dataclass
class CovarianceMatrix:
    """``Sigma^{ij} = <DF^i, DF^j>_H`` per sample with a guarded inverse.

    ``gamma`` is zero on degenerate samples.
    """

    sigma: np.ndarray
    det: np.ndarray
    gamma: np.ndarray
    degenerate: np.ndarray

    @property
    def degenerate_count(self) -> int:
        return int(np.count_nonzero(self.degenerate))


def covariance(F: FunctionalState, grid: TimeGrid) -> CovarianceMatrix:
    g = F.grad
    sigma = np.einsum("...inm,...jnm->...ij", g, g) * grid.dt
    d = F.d
    det = np.linalg.det(sigma)
    scale = np.maximum(np.trace(sigma, axis1=-2, axis2=-1) / d, 0.0) ** d
    degenerate = ~(det > DET_FLOOR * scale) | ~(det > 0)
    safe = np.where(degenerate[..., None, None], np.eye(d), sigma)
    gamma = np.linalg.inv(safe)
    gamma = np.where(degenerate[..., None, None], 0.0, gamma)
    return CovarianceMatrix(sigma, det, gamma, degenerate)


@dataclass
class WeightSample:
    """Per-sample weights ``h`` for the multi-index ``alpha``.

    ``localization`` is the value of the weight ``G`` the computation started
    from; ``degenerate`` counts samples whose covariance was singular.
    """

    h: np.ndarray
    alpha: tuple
    localization: np.ndarray
    degenerate: int = 0
    grad: np.ndarray | None = None
    degenerate_mask: np.ndarray | None = None

    def as_functional(self) -> FunctionalState:
        """The weight as a scalar functional (value and gradient)."""
        if self.grad is None:
            raise MissingDerivativeError("weight was computed without its gradient")
        return FunctionalState(self.h[..., None], self.grad[..., None, :, :])


def _g_parts(G: FunctionalState | None, F: FunctionalState):
    batch = F.batch_shape
    if G is None:
        return np.ones(batch), None
    if G.d != 1:
        raise ValueError("G must be a scalar functional")
    if G.grad.shape[-2:] != F.grad.shape[-2:]:
        raise ValueError("F and G live on different grids")
    return np.broadcast_to(G.value[..., 0], batch), np.broadcast_to(G.grad[..., 0, :, :], F.grad.shape[:-3] + F.grad.shape[-2:])


def _check_degenerate(cov, g_val, g_grad, policy):
    if not cov.degenerate.any():
        return np.zeros(cov.det.shape, dtype=bool)
    live = g_val != 0
    if g_grad is not None:
        live = live | np.any(g_grad != 0, axis=(-2, -1))
    bad = cov.degenerate & live
    if bad.any() and policy == "raise":
        flat = np.flatnonzero(bad.reshape(-1))
        raise DegenerateSampleError(len(flat), int(flat[0]))
    return cov.degenerate


def _validate(F, i, dW, grid):
    if not F.has_second_order():
        raise MissingDerivativeError("the weight needs the second Malliavin derivative of F")
    if not 0 <= i < F.d:
        raise ValueError(f"component index {i} outside [0, {F.d})")
    if F.d > 2:
        raise ValueError("weights are supported for d <= 2")
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-2:] != F.grad.shape[-2:] or F.n != grid.n:
        raise ValueError("increments, grid and functional disagree in shape")
    return dW


def ibp_weight_first(
    F: FunctionalState,
    G: FunctionalState | None,
    i: int,
    dW,
    grid: TimeGrid,
    *,
    policy: str = "raise",
    with_grad: bool = False,
) -> WeightSample:
    """``H_i(F, G)`` with ``E[d_i g(F) G] = E[g(F) H_i(F, G)]``; ``G=None`` means ``G = 1``.

    ``policy`` decides what happens on samples with singular covariance where
    ``G`` does not vanish: ``"raise"`` or ``"drop"`` (weight set to zero and
    counted). ``with_grad`` also returns ``D H_i`` and needs dense second and
    third derivatives of ``F`` and a dense Hessian of ``G``.
    """
    if policy not in ("raise", "drop"):
        raise ValueError("policy must be 'raise' or 'drop'")
    dW = _validate(F, i, dW, grid)
    if with_grad:
        return _weight_with_grad(F, G, i, dW, grid, policy)
    dt = grid.dt
    cov = covariance(F, grid)
    g_val, g_grad = _g_parts(G, F)
    zero = _check_degenerate(cov, g_val, g_grad, policy)
    gam = cov.gamma
    DF = F.grad
    ops = [F.second_order(a) for a in range(F.d)]
    d = F.d
    h = np.zeros(F.batch_shape)
    for j in range(d):
        DFj = DF[..., j, :, :]
        delta_j = np.sum(DFj * dW, axis=(-2, -1)) - dt * ops[j].trace()
        # <D Sigma^{ab}, DF_j> = dt^2 [D^2F_a(DF_j, DF_b) + D^2F_b(DF_j, DF_a)]
        forms = [[ops[a].form(DFj, DF[..., b, :, :]) for b in range(d)] for a in range(d)]
        dgam = np.zeros(F.batch_shape)
        for a in range(d):
            for b in range(d):
                pair = dt * dt * (forms[a][b] + forms[b][a])
                dgam -= gam[..., i, a] * gam[..., b, j] * pair
        term = gam[..., i, j] * g_val * delta_j - g_val * dgam
        if g_grad is not None:
            term = term - gam[..., i, j] * malliavin_inner(g_grad, DFj, grid)
        h = h + term
    h = np.where(zero, 0.0, h)
    return WeightSample(h, (i + 1,), np.asarray(g_val, dtype=float), int(np.count_nonzero(zero)), None, zero)


def _weight_with_grad(F, G, i, dW, grid, policy):
    if F.third is None:
        raise MissingDerivativeError(
            "the gradient of a weight needs third derivatives of F "
            "(provided by terminal_state(order=3) for Markovian models)"
        )
    dt = grid.dt
    d = F.d
    P = F.batch_shape
    N = F.n * F.m
    DF = F.grad.reshape(P + (d, N))
    H2 = F.dense_hessian()
    H3 = F.third
    w = dW.reshape(dW.shape[:-2] + (N,))
    cov = covariance(F, grid)
    if G is None:
        g0, g1, g2 = np.ones(P), np.zeros(P + (N,)), np.zeros(P + (N, N))
    else:
        if G.hess is None:
            raise MissingDerivativeError("G needs a dense Hessian for the weight gradient")
        g0 = G.value[..., 0]
        g1 = G.grad[..., 0, :, :].reshape(P + (N,))
        g2 = G.hess[..., 0, :, :]
    zero = _check_degenerate(cov, g0, g1.reshape(P + (F.n, F.m)), policy)
    gam = cov.gamma
    DS = dt * (np.einsum("...acn,...bn->...abc", H2, DF) + np.einsum("...an,...bcn->...abc", DF, H2))
    D2S = dt * (
        np.einsum("...acen,...bn->...abce", H3, DF)
        + np.einsum("...acn,...ben->...abce", H2, H2)
        + np.einsum("...aen,...bcn->...abce", H2, H2)
        + np.einsum("...an,...bcen->...abce", DF, H3)
    )
    Dg = -np.einsum("...ax,...xyc,...yb->...abc", gam, DS, gam)
    D2g = (
        -np.einsum("...axe,...xyc,...yb->...abce", Dg, DS, gam)
        - np.einsum("...ax,...xyce,...yb->...abce", gam, D2S, gam)
        - np.einsum("...ax,...xyc,...ybe->...abce", gam, DS, Dg)
    )
    h = np.zeros(P)
    dh = np.zeros(P + (N,))
    for j in range(d):
        f1 = DF[..., j, :]
        f2 = H2[..., j, :, :]
        f3 = H3[..., j, :, :, :]
        c = gam[..., i, j]
        # jet of phi = gamma^{ij} G
        p0 = c * g0
        p1 = Dg[..., i, j, :] * g0[..., None] + c[..., None] * g1
        p2 = (
            D2g[..., i, j, :, :] * g0[..., None, None]
            + Dg[..., i, j, :, None] * g1[..., None, :]
            + g1[..., :, None] * Dg[..., i, j, None, :]
            + c[..., None, None] * g2
        )
        diag2 = np.einsum("...kk->...", f2)
        h = h + p0 * np.sum(f1 * w, axis=-1) - dt * (np.sum(p1 * f1, axis=-1) + p0 * diag2)
        # D_c delta(u) with u_k = phi f1_k
        du = p1[..., :, None] * f1[..., None, :] + p0[..., None, None] * f2
        dh = dh + p0[..., None] * f1 + np.einsum("...ck,...k->...c", du, w)
        dh = dh - dt * (
            np.einsum("...ck,...k->...c", p2, f1)
            + np.einsum("...k,...ck->...c", p1, f2)
            + p1 * diag2[..., None]
            + p0[..., None] * np.einsum("...ckk->...c", f3)
        )
    h = np.where(zero, 0.0, h)
    dh = np.where(zero[..., None], 0.0, dh)
    return WeightSample(h, (i + 1,), np.asarray(g0, dtype=float), int(np.count_nonzero(zero)), dh.reshape(P + (F.n, F.m)), zero)


def ibp_weight_iterated(
    F: FunctionalState,
    G: FunctionalState | None,
    alpha: tuple,
    dW,
    grid: TimeGrid,
    *,
    policy: str = "raise",
) -> WeightSample:
    """``H_alpha(F, G)`` for ``|alpha| <= 2`` with 1-based component indices.

    ``H_(i1, i2)(F, G) = H_i2(F, H_i1(F, G))``. The second level needs the
    gradient of the first weight, hence third derivatives of ``F``.
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) > 2:
        raise ValueError("multi-indices of length > 2 are not supported")
    if any(a < 1 or a > F.d for a in alpha):
        raise ValueError(f"multi-index entries must lie in 1..{F.d}")
    if not alpha:
        g_val, _ = _g_parts(G, F)
        return WeightSample(np.array(g_val, dtype=float), (), np.array(g_val, dtype=float))
    if len(alpha) == 1:
        return ibp_weight_first(F, G, alpha[0] - 1, dW, grid, policy=policy)
    inner = ibp_weight_first(F, G, alpha[0] - 1, dW, grid, policy=policy, with_grad=True)
    outer = ibp_weight_first(F, inner.as_functional(), alpha[1] - 1, dW, grid, policy=policy)
    g_val, _ = _g_parts(G, F)
    return WeightSample(outer.h, alpha, np.asarray(g_val, dtype=float), max(inner.degenerate, outer.degenerate))


def ou_apply(F: FunctionalState, dW, grid: TimeGrid) -> np.ndarray:
    """``L F = -delta(DF)`` per sample, shape ``(..., d)``."""
    if not F.has_second_order():
        raise MissingDerivativeError("L F needs the second Malliavin derivative of F")
    dW = np.asarray(dW, dtype=float)
    out = [
        -(np.sum(F.grad[..., a, :, :] * dW, axis=(-2, -1)) - grid.dt * F.second_order(a).trace()) for a in range(F.d)
    ]
    return np.stack(out, axis=-1)


def localization_R(F1: FunctionalState, F2: FunctionalState, grid: TimeGrid) -> np.ndarray:
    """``||D(F1 - F2)||_H^2 (1 + ||Sigma_F1||_HS^2)^((d - 1) / 2) / det Sigma_F1``; ``inf`` if singular."""
    if F1.grad.shape != F2.grad.shape:
        raise ValueError("F1 and F2 must share a grid; refine the coarse functional first")
    diff = F1.grad - F2.grad
    num = np.sum(diff**2, axis=(-3, -2, -1)) * grid.dt
    cov = covariance(F1, grid)
    d = F1.d
    hs2 = np.sum(cov.sigma**2, axis=(-2, -1))
    with np.errstate(divide="ignore", invalid="ignore"):
        R = num * (1.0 + hs2) ** ((d - 1) / 2) / cov.det
    return np.where(cov.degenerate | ~(cov.det > 0), np.inf, np.where(num == 0, 0.0, R))


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class CutoffSpec:
    """Transition bands of the cutoffs: ``Psi`` on ``psi``, ``Psi_1`` on ``psi1``."""

    psi: tuple = (0.125, 0.25)
    psi1: tuple = (0.25, 0.5)

    def __post_init__(self):
        for a, b in (self.psi, self.psi1):
            if not 0 <= a < b:
                raise ValueError(f"invalid transition band ({a}, {b})")
        if self.psi[1] > self.psi1[0]:
            raise ValueError("Psi must vanish before Psi_1 starts to decrease")

    def band(self, which: str) -> tuple:
        if which in ("psi", "Psi"):
            return self.psi
        if which in ("psi1", "Psi1", "Psi_1"):
            return self.psi1
        raise ValueError(f"unknown cutoff {which!r}; use 'psi' or 'psi1'")


def _q(s):
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / (1.0 + np.exp(1.0 / s - 1.0 / (1.0 - s)))


def _prep(spec, which, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("cutoff argument must be non-negative")
    a, b = spec.band(which)
    inside = (x > a) & (x < b)
    s = np.where(inside, (b - np.where(inside, x, a)) / (b - a), 0.5)
    return x, a, b, inside, s


def cutoff(spec: CutoffSpec, which: str, x):
    """Smooth nonincreasing cutoff: 1 up to ``a``, 0 from ``b`` on, glued by ``q``."""
    x, a, b, inside, s = _prep(spec, which, x)
    out = np.where(x <= a, 1.0, np.where(inside, _q(s), 0.0))
    return float(out) if out.ndim == 0 else out


def cutoff_derivative(spec: CutoffSpec, which: str, x):
    x, a, b, inside, s = _prep(spec, which, x)
    q = _q(s)
    dq = q * (1.0 - q) * (1.0 / s**2 + 1.0 / (1.0 - s) ** 2)
    out = np.where(inside, -dq / (b - a), 0.0)
    return float(out) if out.ndim == 0 else out


def localization_weight(
    F1: FunctionalState, F2: FunctionalState, grid: TimeGrid, spec: CutoffSpec = CutoffSpec(), which: str = "psi"
) -> FunctionalState:
    """``G = Psi(R_{F1,F2})`` as a scalar functional with its gradient (``d = 1``).

    With ``N = ||D(F1 - F2)||^2`` and ``S = ||DF1||^2``,
    ``DR = (DN - R DS) / S``, ``DN = 2 dt D^2(F1 - F2) D(F1 - F2)`` and
    ``DS = 2 dt D^2F1 DF1``.
    """
    if F1.d != 1:
        raise ValueError("the localization weight gradient is implemented for d = 1")
    R = localization_R(F1, F2, grid)
    finite = np.isfinite(R)
    Rs = np.where(finite, R, 1.0)
    val = np.where(finite, cutoff(spec, which, Rs), 0.0)
    dpsi = np.where(finite, cutoff_derivative(spec, which, Rs), 0.0)
    grad = np.zeros(F1.grad.shape)
    active = dpsi != 0
    if np.any(active):
        diff = F1 - F2
        g1 = F1.grad[..., 0, :, :]
        gd = diff.grad[..., 0, :, :]
        S = np.sum(g1**2, axis=(-2, -1)) * grid.dt
        dN = 2 * grid.dt * diff.second_order(0).hvp(gd)
        dS = 2 * grid.dt * F1.second_order(0).hvp(g1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dR = (dN - Rs[..., None, None] * dS) / S[..., None, None]
        grad[..., 0, :, :] = np.where(active[..., None, None], dpsi[..., None, None] * dR, 0.0)
    return FunctionalState(val[..., None], grad, dW=F1.dW)
