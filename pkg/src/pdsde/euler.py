"""Euler scheme for path-dependent SDEs and its Malliavin variations.

Layouts used internally for batches of ``P`` paths:

- paths ``X (P, n + 1, d)``, increments ``dW (P, n, m)``
- scalar first variation ``J (P, n + 1, n)`` with ``J[p, l, k] = dX(t_l)/d dW_k``
- scalar second variation ``S (P, n + 1, n, n)``

The public tensors follow the cell-first layout ``first[k, l, j, i]`` and
``second[k, k', l, j, j', i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .harness.engine import mc_map_reduce
from .harness.rates import RateRow, RateTable
from .models import CoefficientModel, DiscretePath, ModelError
from .wiener_grid import FunctionalState, TimeGrid, coarsen, make_grid, sample_increment_block

__all__ = [
    "SchemeDivergence",
    "CapExceeded",
    "Trajectory",
    "VariationTensor",
    "SecondVariationTensor",
    "EulerSecondOrder",
    "integrate",
    "solve",
    "interpolate_on_fine",
    "first_variation",
    "second_variation",
    "terminal_state",
    "strong_error_study",
    "derivative_error_study",
    "increment_table",
    "IncrementStats",
    "SECOND_VARIATION_CAP",
    "LAZY_SECOND_ORDER_CAP",
    "THIRD_VARIATION_CAP",
]

SECOND_VARIATION_CAP = 64
LAZY_SECOND_ORDER_CAP = 256
THIRD_VARIATION_CAP = 16


class SchemeDivergence(FloatingPointError):
    def __init__(self, step: int, path: int | None = None):
        where = f" on path {path}" if path is not None else ""
        super().__init__(f"non-finite value produced at step {step}{where}")
        self.step = step
        self.path = path


class CapExceeded(ValueError):
    """A derivative computation was refused because ``n`` exceeds its cap."""

    def __init__(self, what: str, n: int, cap: int, cost: str):
        super().__init__(f"{what} needs n <= {cap} (got n = {n}); estimated cost {cost}. Raise the cap explicitly to override.")
        self.n = n
        self.cap = cap


def _batch_increments(dW, grid: TimeGrid, m: int):
    dW = np.asarray(dW, dtype=float)
    single = dW.ndim == 2
    if single:
        dW = dW[None]
    if dW.ndim != 3 or dW.shape[1:] != (grid.n, m):
        raise ValueError(f"increments of shape {dW.shape[-2:]} do not match grid n={grid.n}, m={m}")
    return dW, single


@dataclass
class Trajectory:
    """A batch of Euler paths with the coefficients frozen at each step."""

    grid: TimeGrid
    X: np.ndarray
    sigma: np.ndarray
    drift: np.ndarray
    dW: np.ndarray


def integrate(model: CoefficientModel, grid: TimeGrid, dW, x0) -> Trajectory:
    """Run the scheme on a batch of increment matrices ``(P, n, m)``."""
    dW, _ = _batch_increments(dW, grid, model.m)
    P, n, d, dt = dW.shape[0], grid.n, model.d, grid.dt
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,))
    X = np.zeros((P, n + 1, d))
    X[:, 0] = x0
    sig = np.empty((P, n, d, model.m))
    drift = np.empty((P, n, d))
    scalar = d == 1 and model.m == 1
    if model.frozen:
        s, b = model.coefficients(0, grid, X)
        sig[:] = s[:, None]
        drift[:] = b[:, None]
        # one cumulative sum; agrees with the loop to rounding
        X[:, 1:] = b[:, None] * dt + np.einsum("pij,plj->pli", s, dW)
        np.cumsum(X, axis=1, out=X)
        if not np.isfinite(X).all():
            bad = ~np.isfinite(X).all(axis=-1)
            l = int(np.argmax(bad.any(axis=0))) - 1
            raise SchemeDivergence(l, int(np.argmax(bad[:, l + 1])) if P > 1 else None)
        return Trajectory(grid, X, sig, drift, dW)
    with np.errstate(all="ignore"):
        for l in range(n):
            s, b = model.coefficients(l, grid, X)
            sig[:, l] = s
            drift[:, l] = b
            if scalar:
                X[:, l + 1, 0] = X[:, l, 0] + b[:, 0] * dt + s[:, 0, 0] * dW[:, l, 0]
            else:
                X[:, l + 1] = X[:, l] + b * dt + np.einsum("pij,pj->pi", s, dW[:, l])
            bad = ~np.isfinite(X[:, l + 1]).all(axis=-1)
            if bad.any():
                raise SchemeDivergence(l, int(np.argmax(bad)) if P > 1 else None)
    return Trajectory(grid, X, sig, drift, dW)


def solve(model: CoefficientModel, grid: TimeGrid, dW, x0) -> DiscretePath:
    """Euler path; ``dW`` is ``(n, m)`` or a batch ``(P, n, m)``."""
    single = np.ndim(dW) == 2
    traj = integrate(model, grid, dW, x0)
    return DiscretePath(traj.X[0] if single else traj.X, grid)


def interpolate_on_fine(traj: Trajectory, fine_dW: np.ndarray) -> np.ndarray:
    """Coarse scheme evaluated at fine nodes with its own linear-in-``(t, W)`` rule.

    Between ``t_K`` and ``t_{K+1}`` the scheme is
    ``X(t_K) + b_K (t - t_K) + sigma_K (W(t) - W(t_K))``.
    """
    P, n_f, m = fine_dW.shape
    n_c = traj.grid.n
    f = n_f // n_c
    d = traj.X.shape[-1]
    W = np.concatenate([np.zeros((P, 1, m)), np.cumsum(fine_dW, axis=1)], axis=1)
    Wc = W[:, :n_f].reshape(P, n_c, f, m) - W[:, 0:n_f:f, None, :]
    r = np.arange(f) * (traj.grid.dt / f)
    out = np.empty((P, n_f + 1, d))
    body = traj.X[:, :n_c, None, :] + traj.drift[:, :, None, :] * r[None, None, :, None]
    body = body + np.einsum("pkim,pkrm->pkri", traj.sigma, Wc)
    out[:, :n_f] = body.reshape(P, n_f, d)
    out[:, n_f] = traj.X[:, n_c]
    return out


# ---------------------------------------------------------------------------
# linearisation of the scalar recursion


@dataclass
class Linearization:
    """Padded per-step stencils of a scalar model along a batch of paths.

    ``A[p, l, q] = db/dx_s dt + dsigma/dx_s dW_l`` and ``B = dsigma/dx_s`` for
    ``s = idx[l, q]``; ``C[p, l, q, r]`` is the analogous second partial.
    Padding entries have index 0 and zero coefficients.
    """

    idx: np.ndarray
    A: np.ndarray
    B: np.ndarray
    src: np.ndarray
    C: np.ndarray | None = None


def _require_scalar(model: CoefficientModel, what: str):
    if not model.scalar:
        raise ModelError(f"{what} is implemented for d = m = 1 models")


def linearize(model: CoefficientModel, traj: Trajectory, order: int = 1) -> Linearization:
    _require_scalar(model, "the scalar linearisation")
    grid = traj.grid
    P, n = traj.X.shape[0], grid.n
    dt = grid.dt
    steps = [model.gradients(l, grid, traj.X) for l in range(n)]
    Q = max(1, max(len(st.idx) for st in steps))
    idx = np.zeros((n, Q), dtype=np.int64)
    A = np.zeros((P, n, Q))
    B = np.zeros((P, n, Q))
    C = np.zeros((P, n, Q, Q)) if order >= 2 else None
    dW = traj.dW[:, :, 0]
    for l, st in enumerate(steps):
        k = len(st.idx)
        if not k:
            continue
        idx[l, :k] = st.idx
        gs = st.sigma[:, :, 0, 0, 0]
        A[:, l, :k] = st.drift[:, :, 0, 0] * dt + gs * dW[:, l, None]
        B[:, l, :k] = gs
        if C is not None:
            hidx, hs, hb = model.hessians(l, grid, traj.X)
            if not np.array_equal(hidx, st.idx):
                raise ModelError("first and second partial stencils disagree")
            C[:, l, :k, :k] = hb * dt + hs * dW[:, l, None, None]
    return Linearization(idx, A, B, traj.sigma[:, :, 0, 0].copy(), C)


def adjoint(lin: Linearization) -> np.ndarray:
    """``lam[p, l] = dX(T) / dX(t_l)`` through the recursion, shape ``(P, n + 1)``."""
    P, n, Q = lin.A.shape
    lam = np.zeros((P, n + 1))
    lam[:, n] = 1.0
    for l in range(n - 1, -1, -1):
        nxt = lam[:, l + 1]
        lam[:, l] += nxt
        for q in range(Q):
            a = lin.A[:, l, q]
            if a.any():
                lam[:, lin.idx[l, q]] += nxt * a
    return lam


class EulerSecondOrder:
    """Second derivative of ``X(T)`` without forming the Hessian.

    With ``lam`` the adjoint and ``J`` the first variation,
    ``D^2 X(T) = sum_l lam_{l+1} [sum_qr C_lqr J_s (x) J_r + sum_q B_lq (J_s (x) e_l + e_l (x) J_s)]``.
    Vectors use the gradient layout ``(P, n, 1)``.
    """

    def __init__(self, lin: Linearization, J: np.ndarray, lam: np.ndarray):
        self.lin = lin
        self.J = J
        self.w = lam[:, 1:]
        self.n = J.shape[-1]
        self.m = 1
        P, n, Q = lin.A.shape
        # one-hot scatter from (step, stencil slot) to grid index
        E = np.zeros((n * Q, n + 1))
        E[np.arange(n * Q), lin.idx.reshape(-1)] = 1.0
        self._scatter = E
        self._active = [(q, r) for q in range(Q) for r in range(Q) if np.any(lin.C[:, :, q, r])]

    def _gather(self, V):
        return V[:, self.lin.idx]

    def trace(self) -> np.ndarray:
        P, n, Q = self.lin.A.shape
        total = np.zeros(P)
        for q, r in self._active:
            Jq = self.J[:, self.lin.idx[:, q], :]
            Jr = Jq if q == r else self.J[:, self.lin.idx[:, r], :]
            total += np.einsum("pl,pl->p", self.w * self.lin.C[:, :, q, r], np.einsum("plk,plk->pl", Jq, Jr))
        return total

    def form(self, u, v) -> np.ndarray:
        u = np.asarray(u)[..., 0]
        v = np.asarray(v)[..., 0]
        Ju = self._gather(np.einsum("plk,pk->pl", self.J, u))
        Jv = self._gather(np.einsum("plk,pk->pl", self.J, v))
        quad = np.einsum("plqr,plq,plr->pl", self.lin.C, Ju, Jv)
        cross = np.einsum("plq,plq->pl", self.lin.B, Ju * v[:, :, None] + u[:, :, None] * Jv)
        return np.sum(self.w * (quad + cross), axis=1)

    def hvp(self, v) -> np.ndarray:
        v = np.asarray(v)[..., 0]
        P, n, Q = self.lin.A.shape
        Jv = self._gather(np.einsum("plk,pk->pl", self.J, v))
        alpha = self.w[:, :, None] * (np.einsum("plqr,plr->plq", self.lin.C, Jv) + self.lin.B * v[:, :, None])
        beta = alpha.reshape(P, n * Q) @ self._scatter
        out = np.einsum("ps,psk->pk", beta, self.J)
        out += self.w * np.einsum("plq,plq->pl", self.lin.B, Jv)
        return out[..., None]

    def dense(self) -> np.ndarray:
        P, n, Q = self.lin.A.shape
        K = np.zeros((P, n + 1, n + 1))
        for q, r in self._active:
            np.add.at(K, (slice(None), self.lin.idx[:, q], self.lin.idx[:, r]), self.w * self.lin.C[:, :, q, r])
        H = np.transpose(self.J, (0, 2, 1)) @ K @ self.J
        Z = np.einsum("plq,plqk->pkl", self.w[:, :, None] * self.lin.B, self.J[:, self.lin.idx, :])
        return H + Z + np.transpose(Z, (0, 2, 1))


# ---------------------------------------------------------------------------
# variation tensors


@dataclass
class VariationTensor:
    """``first[..., k, l, j, i] = D_k^j X^i(t_l)``; zero for ``k >= l``."""

    first: np.ndarray
    grid: TimeGrid

    @property
    def terminal(self) -> np.ndarray:
        """``D X(T)`` in gradient layout ``(..., n, m, d)``."""
        return self.first[..., :, -1, :, :]


@dataclass
class SecondVariationTensor:
    """``second[..., k, k', l, j, j', i]``; symmetric in ``(k, j) <-> (k', j')``."""

    second: np.ndarray
    grid: TimeGrid


def _first_generic(model: CoefficientModel, traj: Trajectory) -> np.ndarray:
    """``Jt[p, l, k, j, i]`` for general ``d, m``."""
    grid = traj.grid
    P, n, d, m = traj.X.shape[0], grid.n, model.d, model.m
    Jt = np.zeros((P, n + 1, n, m, d))
    for l in range(n):
        if l:
            acc = Jt[:, l, :l].copy()
            st = model.gradients(l, grid, traj.X)
            for q, s in enumerate(st.idx):
                A = st.drift[:, q] * grid.dt + np.einsum("pijk,pj->pik", st.sigma[:, q], traj.dW[:, l])
                acc += np.einsum("pik,pajk->paji", A, Jt[:, s, :l])
            Jt[:, l + 1, :l] = acc
        Jt[:, l + 1, l] = np.transpose(traj.sigma[:, l], (0, 2, 1))
    return Jt


def _scalar_first(model, grid, dW, x0, backend=None, order=1):
    traj = integrate(model, grid, dW, x0)
    lin = linearize(model, traj, order)
    J = kernels.backend(backend).propagate_first(lin.A, lin.idx, lin.src)
    return traj, lin, J


def first_variation(model: CoefficientModel, grid: TimeGrid, dW, x0, *, backend: str | None = None) -> VariationTensor:
    """Malliavin derivative of the Euler path at every grid time."""
    dW3, single = _batch_increments(dW, grid, model.m)
    if model.scalar and model.d == 1:
        _, _, J = _scalar_first(model, grid, dW3, x0, backend)
        Jt = J[..., None, None]
    else:
        Jt = _first_generic(model, integrate(model, grid, dW3, x0))
    first = np.swapaxes(Jt, 1, 2)
    return VariationTensor(first[0] if single else first, grid)


def _cost(n: int, P: int = 1) -> str:
    return f"~{P * (n + 1) * n * n * 8 / 2**20:.1f} MiB and ~{n**3:.2g} multiply-adds per path"


def second_variation(
    model: CoefficientModel, grid: TimeGrid, dW, x0, *, cap: int = SECOND_VARIATION_CAP, backend: str | None = None
) -> SecondVariationTensor:
    """Second Malliavin derivative of the Euler path at every grid time (``d = m = 1``)."""
    _require_scalar(model, "the second variation")
    dW3, single = _batch_increments(dW, grid, model.m)
    if grid.n > cap:
        raise CapExceeded("second_variation", grid.n, cap, _cost(grid.n, dW3.shape[0]))
    _, lin, J = _scalar_first(model, grid, dW3, x0, backend, order=2)
    S = kernels.backend(backend).propagate_second(lin.A, lin.idx, lin.B, lin.C, J)
    second = np.transpose(S, (0, 2, 3, 1))[..., None, None, None]
    return SecondVariationTensor(second[0] if single else second, grid)


def _third_markovian(model, traj: Trajectory):
    """Dense ``J, S, T`` of ``X(T)`` for a scalar Markovian model."""
    grid = traj.grid
    P, n, dt = traj.X.shape[0], grid.n, grid.dt
    J = np.zeros((P, n))
    S = np.zeros((P, n, n))
    T3 = np.zeros((P, n, n, n))
    for l in range(n):
        X = traj.X
        st = model.gradients(l, grid, X)
        dw = traj.dW[:, l, 0]
        if len(st.idx):
            s1 = st.sigma[:, 0, 0, 0, 0]
            b1 = st.drift[:, 0, 0, 0]
            _, hs, hb = model.hessians(l, grid, X)
            s2, b2 = hs[:, 0, 0], hb[:, 0, 0]
        else:
            s1 = b1 = s2 = b2 = np.zeros(P)
        s3, b3 = model.third_partials(l, grid, X)
        g = 1.0 + b1 * dt + s1 * dw
        c = b2 * dt + s2 * dw
        e = b3 * dt + s3 * dw
        JJ = J[:, :, None] * J[:, None, :]
        SJ = S[:, :, :, None] * J[:, None, None, :]
        T_new = g[:, None, None, None] * T3 + c[:, None, None, None] * (
            SJ + np.transpose(SJ, (0, 1, 3, 2)) + np.transpose(SJ, (0, 3, 1, 2))
        )
        T_new += e[:, None, None, None] * JJ[:, :, :, None] * J[:, None, None, :]
        # terms carrying a Kronecker delta on the new cell l
        T_new[:, :, :, l] += s1[:, None, None] * S + s2[:, None, None] * JJ
        T_new[:, :, l, :] += s1[:, None, None] * S + s2[:, None, None] * JJ
        T_new[:, l, :, :] += s1[:, None, None] * S + s2[:, None, None] * JJ
        S_new = g[:, None, None] * S + c[:, None, None] * JJ
        S_new[:, :, l] += s1[:, None] * J
        S_new[:, l, :] += s1[:, None] * J
        J_new = g[:, None] * J
        J_new[:, l] += traj.sigma[:, l, 0, 0]
        J, S, T3 = J_new, S_new, T_new
    return J, S, T3


def terminal_state(
    model: CoefficientModel,
    grid: TimeGrid,
    dW,
    x0,
    order: int = 1,
    *,
    dense: bool = False,
    cap: int | None = None,
    backend: str | None = None,
) -> FunctionalState:
    """``X(T)`` as a scalar :class:`FunctionalState` over a batch of paths.

    ``order=1`` gives the gradient (by the adjoint recursion, ``O(n)``),
    ``order=2`` adds a lazy :class:`EulerSecondOrder` operator (``O(n^2)``;
    ``dense=True`` materialises the Hessian), ``order=3`` gives dense second
    and third derivatives for Markovian models only.
    """
    _require_scalar(model, "terminal_state")
    dW3, _ = _batch_increments(dW, grid, 1)
    P, n = dW3.shape[0], grid.n
    if order == 3:
        if not getattr(model, "markovian", False):
            raise ModelError("third-order sensitivities are available for Markovian models only")
        cap = THIRD_VARIATION_CAP if cap is None else cap
        if n > cap:
            raise CapExceeded("third-order sensitivities", n, cap, f"~{P * n**3 * 8 / 2**20:.1f} MiB")
        traj = integrate(model, grid, dW3, x0)
        J, S, T3 = _third_markovian(model, traj)
        return FunctionalState(
            value=traj.X[:, -1],
            grad=J[:, None, :, None],
            hess=S[:, None],
            third=T3[:, None],
            dW=dW3,
        )
    if order == 1:
        traj = integrate(model, grid, dW3, x0)
        lin = linearize(model, traj, 1)
        lam = adjoint(lin)
        return FunctionalState(traj.X[:, -1], (lam[:, 1:] * lin.src)[:, None, :, None], dW=dW3)
    if order != 2:
        raise ValueError(f"order must be 1, 2 or 3, got {order}")
    cap = (SECOND_VARIATION_CAP if dense else LAZY_SECOND_ORDER_CAP) if cap is None else cap
    if n > cap:
        raise CapExceeded("second-order sensitivities", n, cap, _cost(n, P))
    traj, lin, J = _scalar_first(model, grid, dW3, x0, backend, order=2)
    lam = adjoint(lin)
    op = EulerSecondOrder(lin, J, lam)
    grad = J[:, -1, :][:, None, :, None]
    if dense:
        return FunctionalState(traj.X[:, -1], grad, hess=op.dense()[:, None], dW=dW3)
    return FunctionalState(traj.X[:, -1], grad, second=(op,), dW=dW3)


# ---------------------------------------------------------------------------
# strong-error studies


def _check_levels(coarse_list, fine_n):
    if not coarse_list:
        raise ValueError("coarse_list is empty")
    for n in coarse_list:
        if n < 1 or fine_n % n:
            raise ValueError(f"coarse n={n} does not divide fine_n={fine_n}")
    if fine_n < 8 * max(coarse_list):
        raise ValueError(f"fine_n={fine_n} must be at least 8 x the largest coarse n ({max(coarse_list)})")


def _lp_error(sup_vals: np.ndarray, p: float) -> tuple[float, float, np.ndarray]:
    """``(mean sup^p)^(1/p)``, its delta-method stderr and per-path linearisation."""
    y = sup_vals**p
    mu = float(y.mean())
    err = mu ** (1.0 / p)
    slope = (1.0 / p) * mu ** (1.0 / p - 1.0) if mu > 0 else 0.0
    lin = slope * y
    se = float(lin.std(ddof=1) / math.sqrt(len(y))) if len(y) > 1 else 0.0
    return err, se, lin


@dataclass
class IncrementStats:
    """Cell-increment moments of the scheme at one resolution."""

    steps: int
    max_cell_mean: float
    max_cell_stderr: float
    mean_max: float
    mean_max_stderr: float


def strong_error_study(
    model: CoefficientModel,
    x0,
    coarse_list,
    fine_n: int,
    num_paths: int,
    p: float = 2.0,
    seed: int = 0,
    *,
    T: float = 1.0,
    workers: int = 1,
    block_size: int = 500,
) -> RateTable:
    """``(E sup_t |X_n - X_fine|^p)^(1/p)`` per coarse ``n`` with common random numbers.

    The sup runs over the fine nodes, with the coarse scheme interpolated by
    its own rule between its nodes. The returned table carries, in
    ``extras``, cell-increment statistics and fourth moments of the sup.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    coarse_list = sorted(set(int(n) for n in coarse_list))
    _check_levels(coarse_list, fine_n)
    fine = make_grid(T, fine_n)
    m = model.m

    def block(indices):
        dW = sample_increment_block(seed, indices, fine, m)
        ref = integrate(model, fine, dW, x0)
        out = {}
        for n in coarse_list:
            f = fine_n // n
            traj = integrate(model, make_grid(T, n), coarsen(dW, f), x0)
            Xi = interpolate_on_fine(traj, dW)
            out[f"sup{n}"] = np.linalg.norm(Xi - ref.X, axis=-1).max(axis=1)
            # sup over each coarse cell of |X(s) - X(t_K)|^2, endpoints included by continuity
            inc = Xi[:, 1:].reshape(len(indices), n, f, -1) - traj.X[:, :n, None, :]
            out[f"inc{n}"] = (np.sum(inc**2, axis=-1)).max(axis=2)
            out[f"mom{n}"] = np.linalg.norm(traj.X, axis=-1).max(axis=1) ** 4
        return out

    res = mc_map_reduce(num_paths, block, workers=workers, block_size=block_size)
    vals = res.values
    rows, incs, moments = [], [], {}
    for level, n in enumerate(coarse_list):
        err, se, _ = _lp_error(vals[f"sup{n}"], p)
        rows.append(RateRow(level, n, err, se))
        cells = vals[f"inc{n}"]
        cm = cells.mean(axis=0)
        k = int(np.argmax(cm))
        mx = cells.max(axis=1)
        incs.append(
            IncrementStats(
                n,
                float(cm[k]),
                float(cells[:, k].std(ddof=1) / math.sqrt(num_paths)),
                float(mx.mean()),
                float(mx.std(ddof=1) / math.sqrt(num_paths)),
            )
        )
        moments[n] = float(vals[f"mom{n}"].mean())
    table = RateTable(rows, seed=seed)
    table.extras = {"increments": incs, "moments": moments}
    return table


def increment_table(table: RateTable, statistic: str = "max_cell_mean") -> RateTable:
    """Rate table of a cell-increment statistic recorded by :func:`strong_error_study`."""
    err_field = statistic
    se_field = statistic.replace("mean", "stderr") if statistic == "max_cell_mean" else "mean_max_stderr"
    rows = [
        RateRow(i, s.steps, getattr(s, err_field), getattr(s, se_field)) for i, s in enumerate(table.extras["increments"])
    ]
    return RateTable(rows, seed=table.seed)


def derivative_error_study(
    model: CoefficientModel,
    x0,
    coarse_list,
    fine_n: int,
    num_paths: int,
    p: float = 2.0,
    seed: int = 0,
    *,
    T: float = 1.0,
    workers: int = 1,
    block_size: int = 16,
    backend: str | None = None,
) -> RateTable:
    """Strong error of ``X`` plus ``sup_t ||D X_n(t) - D X_fine(t)||_H`` (``d = m = 1``).

    The derivative term is evaluated at coarse nodes, comparing the coarse
    field cell by cell with the fine field averaged over each coarse cell.
    Each error is an ``L^p`` norm of the per-path sup; the reported error is
    their sum with a joint delta-method standard error.
    """
    _require_scalar(model, "derivative_error_study")
    coarse_list = sorted(set(int(n) for n in coarse_list))
    _check_levels(coarse_list, fine_n)
    fine = make_grid(T, fine_n)

    def block(indices):
        dW = sample_increment_block(seed, indices, fine, 1)
        ref, _, Jf = _scalar_first(model, fine, dW, x0, backend)
        out = {}
        P = len(indices)
        for n in coarse_list:
            f = fine_n // n
            grid = make_grid(T, n)
            traj, _, Jc = _scalar_first(model, grid, coarsen(dW, f), x0, backend)
            Xi = interpolate_on_fine(traj, dW)
            out[f"x{n}"] = np.abs(Xi - ref.X).max(axis=(1, 2))
            Jf_nodes = Jf[:, ::f, :].reshape(P, n + 1, n, f).mean(axis=-1)
            h = np.sqrt(grid.dt * np.sum((Jc - Jf_nodes) ** 2, axis=-1))
            out[f"d{n}"] = h.max(axis=1)
        return out

    res = mc_map_reduce(num_paths, block, workers=workers, block_size=block_size)
    rows = []
    parts = {}
    for level, n in enumerate(coarse_list):
        ex, _, lx = _lp_error(res.values[f"x{n}"], p)
        ed, _, ld = _lp_error(res.values[f"d{n}"], p)
        lin = lx + ld
        se = float(lin.std(ddof=1) / math.sqrt(num_paths)) if num_paths > 1 else 0.0
        rows.append(RateRow(level, n, ex + ed, se))
        parts[n] = {"path_error": ex, "derivative_error": ed}
    table = RateTable(rows, seed=seed)
    table.extras = {"components": parts}
    return table
