"""Density estimators, grid Hoelder norms and density-convergence studies."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .euler import LAZY_SECOND_ORDER_CAP, CapExceeded, integrate, terminal_state
from .harness.engine import mc_map_reduce
from .harness.rates import RateRow, RateTable
from .malliavin_weights import CutoffSpec, ibp_weight_first, localization_R, localization_weight
from .models import CoefficientModel, ModelError
from .wiener_grid import FunctionalState, TimeGrid, coarsen, make_grid, sample_increment_block

__all__ = [
    "DensityEstimate",
    "HolderNormResult",
    "ibp_density",
    "kernel_density",
    "silverman_bandwidth",
    "holder_norm",
    "default_query_points",
    "density_rate_study",
    "localized_density_difference",
    "localization_ladder_study",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class DensityEstimate:
    query_points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    method: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["y", "p_hat", "stderr", "method"])
        for y, p, s in zip(self.query_points, self.values, self.stderr):
            w.writerow([repr(float(y)), repr(float(p)), repr(float(s)), self.method])
        return buf.getvalue()


def _query(query_points) -> np.ndarray:
    y = np.asarray(query_points, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("no query points")
    if np.any(np.diff(y) < 0):
        raise ValueError("query points must be sorted")
    return y


def _ibp_terms(F, H, y) -> np.ndarray:
    """Per-sample contributions ``1{F > y} H``, shape ``(N, len(y))``."""
    return np.where(F[:, None] > y[None, :], H[:, None], 0.0)


def _kernel_terms(F, y, h) -> np.ndarray:
    z = (y[None, :] - F[:, None]) / h
    return np.exp(-0.5 * z * z) / (_SQRT_2PI * h)


def _split_samples(samples, H):
    if H is None:
        arr = np.asarray(samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("samples must be (F, H) pairs or pass the weights separately")
        return arr[:, 0], arr[:, 1]
    return np.asarray(samples, dtype=float).reshape(-1), np.asarray(H, dtype=float).reshape(-1)


def ibp_density(samples, query_points, weights=None, *, chunk: int = 1 << 16) -> DensityEstimate:
    """``p(y) = E[1{F > y} H]`` from samples of ``(F, H)``.

    ``samples`` is an ``(N, 2)`` array of pairs, or the ``F`` values with
    ``weights`` holding ``H``.
    """
    F, H = _split_samples(samples, weights)
    if F.size == 0:
        raise ValueError("empty sample set")
    if F.shape != H.shape:
        raise ValueError("F and H sample counts differ")
    y = _query(query_points)
    N = F.size
    s1 = np.zeros(y.size)
    s2 = np.zeros(y.size)
    for start in range(0, N, chunk):
        t = _ibp_terms(F[start : start + chunk], H[start : start + chunk], y)
        s1 += t.sum(axis=0)
        s2 += (t * t).sum(axis=0)
    mean = s1 / N
    var = np.maximum(s2 / N - mean**2, 0.0) * N / max(N - 1, 1)
    return DensityEstimate(y, mean, np.sqrt(var / N), "ibp")


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float).reshape(-1)
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-0.2)


def kernel_density(samples, query_points, bandwidth: float | None = None, *, chunk: int = 1 << 15) -> DensityEstimate:
    """Gaussian kernel estimate; default bandwidth by Silverman's rule.

    The standard error uses the asymptotic variance
    ``(p(y) R(K) / h - p(y)^2) / N`` with ``R(K) = 1 / (2 sqrt(pi))``.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < 100:
        raise ValueError(f"kernel estimate needs at least 100 samples, got {x.size}")
    if bandwidth is None:
        if np.ptp(x) == 0:
            raise ValueError("samples have zero variance; no default bandwidth")
        bandwidth = silverman_bandwidth(x)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    y = _query(query_points)
    acc = np.zeros(y.size)
    for start in range(0, x.size, chunk):
        acc += _kernel_terms(x[start : start + chunk], y, bandwidth).sum(axis=0)
    p = acc / x.size
    var = np.maximum(p / (2.0 * math.sqrt(math.pi) * bandwidth) - p * p, 0.0) / x.size
    return DensityEstimate(y, p, np.sqrt(var), "kernel")


@dataclass
class HolderNormResult:
    """``total = sup |f| + max_{x != y} |f(x) - f(y)| / |x - y|^beta`` on a grid.

    ``sup_index``/``sup_sign`` and ``pair``/``pair_sign`` locate the maximisers,
    which lets callers linearise the norm for standard errors.
    """

    beta: float
    sup_term: float
    holder_quotient_term: float
    total: float
    sup_index: int = 0
    sup_sign: float = 1.0
    pair: tuple = (0, 1)
    pair_sign: float = 1.0
    pair_scale: float = 1.0

    def functional(self, size: int) -> np.ndarray:
        """Coefficient vector ``c`` with ``total = c . f`` at the maximisers."""
        c = np.zeros(size)
        c[self.sup_index] += self.sup_sign
        i, j = self.pair
        c[i] += self.pair_sign / self.pair_scale
        c[j] -= self.pair_sign / self.pair_scale
        return c


def holder_norm(values, spacing: float, beta: float) -> HolderNormResult:
    f = np.asarray(values, dtype=float).reshape(-1)
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1); derivative orders are not supported")
    if f.size < 2:
        raise ValueError("need at least 2 grid points")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    k = int(np.argmax(np.abs(f)))
    sup = float(abs(f[k]))
    i, j = np.triu_indices(f.size, k=1)
    dist = (j - i) * spacing
    scale = dist**beta
    q = np.abs(f[i] - f[j]) / scale
    a = int(np.argmax(q))
    return HolderNormResult(
        beta,
        sup,
        float(q[a]),
        sup + float(q[a]),
        k,
        1.0 if f[k] >= 0 else -1.0,
        (int(i[a]), int(j[a])),
        1.0 if f[i[a]] >= f[j[a]] else -1.0,
        float(scale[a]),
    )


def default_query_points(reference_samples, num: int = 41, width: float = 4.0) -> np.ndarray:
    x = np.asarray(reference_samples, dtype=float)
    mu, sd = float(x.mean()), float(x.std(ddof=1))
    if sd == 0:
        raise ValueError("reference samples have zero spread; give query points explicitly")
    return np.linspace(mu - width * sd, mu + width * sd, num)


# ---------------------------------------------------------------------------
# density-convergence study


def _norm_with_se(terms_diff: np.ndarray, spacing: float, beta: float):
    """Hoelder norm of the mean of per-path rows and its linearised stderr."""
    mean = terms_diff.mean(axis=0)
    res = holder_norm(mean, spacing, beta)
    lin = terms_diff @ res.functional(mean.size)
    return res, lin


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _rate_from_terms(levels, terms, ref_terms, spacing, beta, seed, label):
    rows, lins = [], []
    for n, t in zip(levels, terms):
        res, lin = _norm_with_se(t - ref_terms, spacing, beta)
        rows.append(RateRow(n, 2 ** (2 * n), res.total, _se(lin)))
        lins.append(lin)
    table = RateTable(rows, abscissa="level", seed=seed)
    # consecutive errors compared with the paired per-path difference of their linearisations
    steps = []
    for a in range(len(rows) - 1):
        diff = lins[a] - lins[a + 1]
        gap = rows[a].error - rows[a + 1].error
        steps.append({"from": rows[a].level, "to": rows[a + 1].level, "gap": gap, "stderr": _se(diff)})
    table.flags.update(
        method=label,
        beta=beta,
        decreasing_3sigma=all(s["gap"] > 3 * s["stderr"] for s in steps),
        steps=steps,
        theta_hat=-table.slope if table.fit else None,
    )
    return table


def density_rate_study(
    model: CoefficientModel,
    x0: float,
    T: float,
    n_levels,
    reference_level: int,
    num_paths: int,
    beta: float = 0.0,
    query_points=None,
    seed: int = 0,
    *,
    method: str = "auto",
    extra_betas=(),
    weight_cap: int = LAZY_SECOND_ORDER_CAP,
    bandwidth: float | None = None,
    workers: int = 1,
    block_size: int = 200,
) -> RateTable:
    """Errors ``||p_{k_n} - p_ref||_{C^beta}`` on a query grid for ``k_n = 2^(2n)``.

    All levels share the increments of the reference level (coarsened), so
    the per-path differences of the estimators carry the error with small
    variance. ``method`` is ``"ibp"``, ``"kernel"`` or ``"auto"`` (IBP when
    every level is within ``weight_cap`` steps, kernel otherwise with a
    warning). When IBP runs the kernel table is reported alongside.
    The table's ``extras`` hold the tables for ``extra_betas`` and the
    estimated densities.
    """
    if not model.scalar:
        raise ModelError("density studies need d = m = 1")
    levels = sorted(set(int(n) for n in n_levels))
    if reference_level < max(levels) + 1:
        raise ValueError("reference_level must exceed every level by at least one")
    if len(levels) < 1 or min(levels) < 0:
        raise ValueError("levels must be non-negative integers")
    if method not in ("auto", "ibp", "kernel"):
        raise ValueError(f"unknown method {method!r}")
    k_ref = 2 ** (2 * reference_level)
    warnings_out = []
    use_ibp = method != "kernel"
    if use_ibp and k_ref > weight_cap:
        if method == "ibp":
            raise CapExceeded("IBP density weights", k_ref, weight_cap, f"~{k_ref**2 * 8 * block_size / 2**20:.0f} MiB per block")
        use_ibp = False
        msg = f"IBP weights need k <= {weight_cap} steps (reference has {k_ref}); falling back to the kernel estimator"
        warnings.warn(msg)
        warnings_out.append(msg)
    fine = make_grid(T, k_ref)
    all_levels = levels + [reference_level]

    def block(indices):
        dW = sample_increment_block(seed, indices, fine, 1)
        out = {}
        for n in all_levels:
            k = 2 ** (2 * n)
            grid = make_grid(T, k)
            dWc = coarsen(dW, k_ref // k)
            if use_ibp:
                F = terminal_state(model, grid, dWc, x0, order=2, cap=weight_cap)
                w = ibp_weight_first(F, None, 0, dWc, grid, policy="drop")
                out[f"F{n}"] = F.value[:, 0]
                out[f"H{n}"] = w.h
                out[f"deg{n}"] = w.degenerate_mask
            else:
                out[f"F{n}"] = integrate(model, grid, dWc, x0).X[:, -1, 0]
        return out

    res = mc_map_reduce(num_paths, block, workers=workers, block_size=block_size)
    vals = res.values
    F_ref = vals[f"F{reference_level}"]
    y = default_query_points(F_ref) if query_points is None else _query(query_points)
    spacing = float(y[1] - y[0]) if y.size > 1 else 1.0
    if y.size > 1 and not np.allclose(np.diff(y), spacing, rtol=1e-9, atol=0):
        raise ValueError("query points must be uniformly spaced for the Hoelder norm")
    h = silverman_bandwidth(F_ref) if bandwidth is None else float(bandwidth)
    betas = [beta] + [b for b in extra_betas if b != beta]

    def tables_for(kind):
        if kind == "ibp":
            terms = {n: _ibp_terms(vals[f"F{n}"], vals[f"H{n}"], y) for n in all_levels}
        else:
            terms = {n: _kernel_terms(vals[f"F{n}"], y, h) for n in all_levels}
        tabs = {
            b: _rate_from_terms(levels, [terms[n] for n in levels], terms[reference_level], spacing, b, seed, kind)
            for b in betas
        }
        dens = {
            n: DensityEstimate(y, terms[n].mean(axis=0), terms[n].std(axis=0, ddof=1) / math.sqrt(num_paths), kind)
            for n in all_levels
        }
        return tabs, dens

    primary = "ibp" if use_ibp else "kernel"
    tabs, dens = tables_for(primary)
    table = tabs[beta]
    extras = {"tables": {primary: tabs}, "densities": {primary: dens}, "query_points": y, "bandwidth": h}
    if use_ibp:
        ktabs, kdens = tables_for("kernel")
        extras["tables"]["kernel"] = ktabs
        extras["densities"]["kernel"] = kdens
        deg = int(sum(np.count_nonzero(vals[f"deg{n}"]) for n in all_levels))
        table.flags["degenerate_samples"] = deg
    table.flags["warnings"] = warnings_out
    table.flags["exact_scheme"] = table.exact
    table.extras = extras
    return table


# ---------------------------------------------------------------------------
# localization


def _same_increments(F1: FunctionalState, F2: FunctionalState):
    if F1.dW is None or F2.dW is None:
        raise ValueError("both functionals must carry their increments")
    if F1.dW.shape != F2.dW.shape or not np.array_equal(F1.dW, F2.dW):
        raise ValueError("F1 and F2 are not driven by the same increments")


def localized_density_difference(
    F1: FunctionalState,
    F2: FunctionalState,
    grid: TimeGrid,
    query_points,
    beta: float = 0.0,
    spec: CutoffSpec = CutoffSpec(),
) -> dict:
    """Compare ``p_{F1,G}`` and ``p_{F2,G}`` for ``G = Psi(R_{F1,F2})`` and ``G = 1``.

    Both functionals must live on ``grid`` with identical increments (refine
    a coarse functional first). Returns per-path terms as well as the norms so
    that callers can pool batches.
    """
    if F1.d != 1 or F2.d != 1:
        raise ValueError("density differences are implemented for d = 1")
    _same_increments(F1, F2)
    dW = F1.dW
    y = _query(query_points)
    G = localization_weight(F1, F2, grid, spec)
    out = {"R": localization_R(F1, F2, grid), "G": G.value[..., 0]}
    for tag, g in (("loc", G), ("plain", None)):
        h1 = ibp_weight_first(F1, g, 0, dW, grid, policy="drop").h
        h2 = ibp_weight_first(F2, g, 0, dW, grid, policy="drop").h
        out[f"terms_{tag}"] = _ibp_terms(F1.value[:, 0], h1, y) - _ibp_terms(F2.value[:, 0], h2, y)
    out["dF"] = F1.value[:, 0] - F2.value[:, 0]
    out["dDF"] = np.sum((F1.grad - F2.grad) ** 2, axis=(-3, -2, -1)) * grid.dt
    spacing = float(y[1] - y[0]) if y.size > 1 else 1.0
    out["norm_loc"] = holder_norm(out["terms_loc"].mean(axis=0), spacing, beta).total
    out["norm_plain"] = holder_norm(out["terms_plain"].mean(axis=0), spacing, beta).total
    return out


@dataclass
class LadderRow:
    coarse_n: int
    frac_psi_below_one: float
    frac_stderr: float
    strong_distance: float
    density_diff_localized: float
    density_diff_plain: float
    ratio_localized: float
    ratio_plain: float
    ratio_localized_stderr: float = 0.0
    max_R_identity: float = 0.0


@dataclass
class LadderReport:
    fine_n: int
    rows: list = field(default_factory=list)
    monotone_3sigma: bool = False
    steps: list = field(default_factory=list)
    identity_R_max: float = 0.0
    ratio_steps: list = field(default_factory=list)
    ratio_bounded_3sigma: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(LadderRow.__dataclass_fields__)
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(float(getattr(r, c))) if isinstance(getattr(r, c), float) else getattr(r, c) for c in cols])
        return buf.getvalue()


def localization_ladder_study(
    model: CoefficientModel,
    x0: float,
    T: float,
    fine_n: int,
    coarse_list,
    num_paths: int,
    seed: int = 0,
    *,
    beta: float = 0.0,
    query_points=None,
    spec: CutoffSpec = CutoffSpec(),
    workers: int = 1,
    block_size: int = 250,
) -> LadderReport:
    """Euler ladder ``F1 = X_fine(T)``, ``F2 = X_coarse(T)`` under common increments.

    For each coarse ``n`` reports the fraction of paths with
    ``Psi(R_{F1,F2}) < 1``, the strong distance
    ``(E|F1 - F2|^2)^(1/2) + (E||D(F1 - F2)||_H^2)^(1/2)``, the localized and
    plain density differences and their ratios to the strong distance.
    """
    if not model.scalar:
        raise ModelError("the localization ladder needs d = m = 1")
    coarse_list = sorted(set(int(n) for n in coarse_list))
    for n in coarse_list:
        if fine_n % n:
            raise ValueError(f"coarse n={n} does not divide fine_n={fine_n}")
    fine = make_grid(T, fine_n)

    def block(indices):
        dW = sample_increment_block(seed, indices, fine, 1)
        F1 = terminal_state(model, fine, dW, x0, order=2)
        out = {"F1": F1.value[:, 0], "Rself": localization_R(F1, F1, fine)}
        for n in coarse_list:
            grid = make_grid(T, n)
            F2 = terminal_state(model, grid, coarsen(dW, fine_n // n), x0, order=2).refine(dW)
            G = localization_weight(F1, F2, fine, spec)
            out[f"G{n}"] = G.value[:, 0]
            out[f"F2_{n}"] = F2.value[:, 0]
            out[f"dDF{n}"] = np.sum((F1.grad - F2.grad) ** 2, axis=(-3, -2, -1)) * fine.dt
            for tag, g in (("loc", G), ("plain", None)):
                out[f"h1{tag}{n}"] = ibp_weight_first(F1, g, 0, dW, fine, policy="drop").h
                out[f"h2{tag}{n}"] = ibp_weight_first(F2, g, 0, dW, fine, policy="drop").h
        return out

    res = mc_map_reduce(num_paths, block, workers=workers, block_size=block_size)
    v = res.values
    F1 = v["F1"]
    y = default_query_points(F1) if query_points is None else _query(query_points)
    spacing = float(y[1] - y[0]) if y.size > 1 else 1.0
    report = LadderReport(fine_n, identity_R_max=float(np.max(v["Rself"])))
    ind, ratio_lins = [], []
    for n in coarse_list:
        below = (v[f"G{n}"] < 1.0).astype(float)
        ind.append(below)
        sq = (F1 - v[f"F2_{n}"]) ** 2
        a, b = math.sqrt(np.mean(sq)), math.sqrt(np.mean(v[f"dDF{n}"]))
        dist = a + b
        norms, lins = {}, {}
        for tag in ("loc", "plain"):
            terms = _ibp_terms(F1, v[f"h1{tag}{n}"], y) - _ibp_terms(v[f"F2_{n}"], v[f"h2{tag}{n}"], y)
            res, lins[tag] = _norm_with_se(terms, spacing, beta)
            norms[tag] = res.total
        if dist > 0:
            # delta method for norm / (sqrt(E sq) + sqrt(E dDF))
            lin_d = (sq / (2 * a) if a > 0 else 0.0) + (v[f"dDF{n}"] / (2 * b) if b > 0 else 0.0)
            ratio_lin = lins["loc"] / dist - norms["loc"] * lin_d / dist**2
        else:
            ratio_lin = np.zeros_like(F1)
        ratio_lins.append(ratio_lin)
        report.rows.append(
            LadderRow(
                n,
                float(below.mean()),
                _se(below),
                dist,
                norms["loc"],
                norms["plain"],
                norms["loc"] / dist if dist > 0 else 0.0,
                norms["plain"] / dist if dist > 0 else 0.0,
                _se(ratio_lin),
            )
        )
    for a in range(len(coarse_list) - 1):
        diff = ind[a] - ind[a + 1]
        gap = float(diff.mean())
        report.steps.append({"from": coarse_list[a], "to": coarse_list[a + 1], "gap": gap, "stderr": _se(diff)})
        growth = report.rows[a + 1].ratio_localized - report.rows[a].ratio_localized
        report.ratio_steps.append(
            {"from": coarse_list[a], "to": coarse_list[a + 1], "growth": growth, "stderr": _se(ratio_lins[a + 1] - ratio_lins[a])}
        )
    report.ratio_bounded_3sigma = all(s["growth"] <= 3 * s["stderr"] for s in report.ratio_steps)
    report.monotone_3sigma = all(s["gap"] > 3 * s["stderr"] for s in report.steps)
    return report
