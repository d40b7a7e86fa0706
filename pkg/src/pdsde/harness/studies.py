"""Dispatch from a validated config to a study and its report bundle."""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..density import (
    default_query_points,
    density_rate_study,
    holder_norm,
    ibp_density,
    kernel_density,
    localization_ladder_study,
)
from ..euler import derivative_error_study, increment_table, integrate, strong_error_study, terminal_state
from ..malliavin_weights import covariance, ibp_weight_first
from ..models import model_from_config
from ..wiener_grid import Polynomial, gh_expectation, make_grid, sample_increment_block
from .config import config_hash

EXPERIMENTS = ("strong-rate", "derivative-rate", "ibp-check", "density-rate", "holder-norm", "ellipticity-check")


@dataclass
class ReportBundle:
    experiment: str
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in sorted(self.files.items()):
            path = out / name
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            written.append(path)
        path = out / "summary.json"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        written.append(path)
        return written


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def artifact_version() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if sha.returncode == 0 and sha.stdout.strip():
            return f"{__version__}+g{sha.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _in_range(value, lo, hi) -> bool:
    if value is None or not math.isfinite(value):
        return False
    return (lo is None or value >= lo) and (hi is None or value <= hi)


# ---------------------------------------------------------------------------
# individual experiments


def _strong(cfg, workers, bundle):
    model = model_from_config(cfg["model"])
    table = strong_error_study(
        model,
        cfg["x0"],
        cfg["levels"],
        cfg["fine_n"],
        cfg["num_paths"],
        cfg["p"],
        cfg["seed"],
        T=cfg["T"],
        workers=workers,
        block_size=cfg.get("block_size", 500),
    )
    acc = cfg.get("acceptance", {})
    table.exact_tol = acc.get("exact_tol", table.exact_tol)
    table.refit()
    inc = increment_table(table, "max_cell_mean")
    inc_mean_max = increment_table(table, "mean_max")
    bundle.files["strong_rate.csv"] = table.to_csv()
    bundle.files["increments.csv"] = inc.to_csv()
    bundle.files["increments_mean_max.csv"] = inc_mean_max.to_csv()
    bundle.summary["results"] = {
        "strong": table.summary(),
        "increments": inc.summary(),
        "increments_mean_max": inc_mean_max.summary(),
        "moments_sup4": {str(k): v for k, v in table.extras["moments"].items()},
    }
    if table.exact:
        bundle.summary["results"]["flag"] = "exact"
    if acc:
        if "exact_tol" in acc:
            bundle.checks["exact"] = table.exact
        if "slope_min" in acc or "slope_max" in acc:
            bundle.checks["slope"] = _in_range(table.slope, acc.get("slope_min"), acc.get("slope_max"))
        if "r2_min" in acc:
            bundle.checks["r2"] = table.fit is not None and table.fit.r2 >= acc["r2_min"]
        if "increment_slope_min" in acc or "increment_slope_max" in acc:
            bundle.checks["increment_slope"] = _in_range(
                inc.slope, acc.get("increment_slope_min"), acc.get("increment_slope_max")
            )


def bump_test(model, x0, T, n, probes, epsilon, seed):
    """Forward-difference check of ``D X(T)`` at random (path, cell) probes."""
    from ..euler import first_variation, solve

    grid = make_grid(T, n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    rows = []
    for probe in range(probes):
        path = int(rng.integers(0, 1 << 31))
        k = int(rng.integers(0, n))
        j = int(rng.integers(0, model.m))
        dW = sample_increment_block(seed, [path], grid, model.m)[0]
        base = solve(model, grid, dW, x0).terminal
        bumped = dW.copy()
        bumped[k, j] += epsilon
        fd = (solve(model, grid, bumped, x0).terminal - base) / epsilon
        exact = first_variation(model, grid, dW, x0).terminal[k, j]
        rel = float(np.max(np.abs(fd - exact) / np.maximum(np.abs(exact), 1e-300)))
        rows.append((probe, path, k, j, float(exact[0]), float(fd[0]), rel))
    return rows


def _derivative(cfg, workers, bundle):
    model = model_from_config(cfg["model"])
    table = derivative_error_study(
        model,
        cfg["x0"],
        cfg["levels"],
        cfg["fine_n"],
        cfg["num_paths"],
        cfg["p"],
        cfg["seed"],
        T=cfg["T"],
        workers=workers,
        block_size=cfg.get("block_size", 16),
    )
    acc = cfg.get("acceptance", {})
    table.exact_tol = acc.get("exact_tol", table.exact_tol)
    table.refit()
    bundle.files["derivative_rate.csv"] = table.to_csv()
    res = {"derivative": table.summary(), "components": {str(k): v for k, v in table.extras["components"].items()}}
    decreasing = all(
        a.error - b.error > -3 * math.hypot(a.stderr, b.stderr) for a, b in zip(table.rows, table.rows[1:])
    )
    res["monotone_within_3sigma"] = decreasing
    if table.exact:
        res["flag"] = "exact"
    bump = cfg.get("bump")
    if bump:
        rows = bump_test(
            model, cfg["x0"], cfg["T"], bump.get("steps", 32), bump.get("probes", 100), bump.get("epsilon", 1e-5), cfg["seed"]
        )
        bundle.files["bump_test.csv"] = _csv(["probe", "path", "cell", "noise", "exact", "finite_difference", "rel_error"], rows)
        res["bump_max_rel_error"] = max(r[-1] for r in rows)
    bundle.summary["results"] = res
    if "exact_tol" in acc:
        bundle.checks["exact"] = table.exact
    if "slope_min" in acc or "slope_max" in acc:
        bundle.checks["slope"] = _in_range(table.slope, acc.get("slope_min"), acc.get("slope_max"))
    if acc.get("require_decreasing"):
        bundle.checks["monotone"] = decreasing
    if "bump_rel_tol" in acc:
        bundle.checks["bump"] = bump is not None and res["bump_max_rel_error"] < acc["bump_rel_tol"]


# polynomial functionals for the duality matrix, keyed by (n, m)
_DUALITY_F = [
    ("x0+0.1x0^3", 1, 1, {(1,): 1.0, (3,): 0.1}),
    ("x0+0.1x0^3+0.5x1+0.2x0x1", 2, 1, {(1, 0): 1.0, (3, 0): 0.1, (0, 1): 0.5, (1, 1): 0.2}),
    ("x0+0.5x1+0.5x2+0.1x1^2+0.1x0x2", 3, 1, {(1, 0, 0): 1.0, (0, 1, 0): 0.5, (0, 0, 1): 0.5, (0, 2, 0): 0.1, (1, 0, 1): 0.1}),
    ("x0+0.3x1+0.1x0x1^2 (m=2)", 1, 2, {(1, 0): 1.0, (0, 1): 0.3, (1, 2): 0.1}),
]
_DUALITY_G = [("1", None), ("1+0.3x0^2", 0.3)]
_DUALITY_g = [("x", lambda x: x, lambda x: np.ones_like(x)), ("x^2", lambda x: x**2, lambda x: 2 * x), ("x^3", lambda x: x**3, lambda x: 3 * x**2)]


def duality_matrix(model, x0, nodes, model_steps):
    """``E[g'(F) G]`` against ``E[g(F) H_1(F, G)]`` by Gauss-Hermite quadrature."""
    rows = []
    budget = nodes**3
    for fname, n, m, terms in _DUALITY_F:
        grid = make_grid(1.0, n)
        # same total node budget in every dimension
        k = min(max(nodes, int(round(budget ** (1.0 / (n * m))))), 200)
        poly = Polynomial(terms)
        N = n * m
        for gname, gcoef in _DUALITY_G:
            Gpoly = None
            if gcoef is not None:
                e0 = tuple(2 if i == 0 else 0 for i in range(N))
                Gpoly = Polynomial({(0,) * N: 1.0, e0: gcoef})
            for name, g, dg in _DUALITY_g:

                def lhs(dW, poly=poly, Gpoly=Gpoly, dg=dg):
                    v = poly(dW)
                    return dg(v) * (1.0 if Gpoly is None else Gpoly(dW))

                def rhs(dW, poly=poly, Gpoly=Gpoly, g=g, grid=grid):
                    F = poly.state(dW, order=2)
                    G = None if Gpoly is None else Gpoly.state(dW, order=1)
                    return g(F.value[:, 0]) * ibp_weight_first(F, G, 0, dW, grid).h

                a = gh_expectation(lhs, grid, m, k)
                b = gh_expectation(rhs, grid, m, k)
                rows.append((f"F={fname}; G={gname}; g={name}", n, m, a, b, abs(a - b)))
    for n in range(2, model_steps + 1):
        grid = make_grid(1.0, n)
        k = min(max(nodes, int(round(budget ** (1.0 / n)))), 200)
        for name, g, dg in _DUALITY_g:

            def lhs(dW, grid=grid, dg=dg):
                return dg(integrate(model, grid, dW, x0).X[:, -1, 0])

            def rhs(dW, grid=grid, g=g):
                F = terminal_state(model, grid, dW, x0, order=2)
                return g(F.value[:, 0]) * ibp_weight_first(F, None, 0, dW, grid).h

            a = gh_expectation(lhs, grid, 1, k)
            b = gh_expectation(rhs, grid, 1, k)
            rows.append((f"F=Euler X(T) {model.kind}; G=1; g={name}", n, 1, a, b, abs(a - b)))
    return rows


def _ibp_check(cfg, workers, bundle):
    model = model_from_config(cfg["model"])
    dual = cfg.get("duality", {})
    rows = duality_matrix(model, cfg["x0"], dual.get("nodes_per_dim", 40), dual.get("model_steps", 3))
    bundle.files["duality.csv"] = _csv(["case", "n", "m", "lhs", "rhs", "abs_diff"], rows)
    res = {"duality_cases": len(rows), "duality_max_abs_diff": max(r[-1] for r in rows)}
    acc = cfg.get("acceptance", {})
    if "duality_tol" in acc:
        bundle.checks["duality"] = res["duality_max_abs_diff"] < acc["duality_tol"]
    lad = cfg.get("ladder")
    if lad:
        lmodel = model_from_config(lad.get("model", cfg["model"]))
        rep = localization_ladder_study(
            lmodel,
            cfg["x0"],
            cfg["T"],
            lad.get("fine_n", 64),
            lad.get("levels", [1, 2, 4, 8]),
            lad.get("num_paths", cfg.get("num_paths", 10000)),
            cfg["seed"],
            beta=lad.get("beta", cfg["beta"]),
            workers=workers,
            block_size=cfg.get("block_size", 250),
        )
        bundle.files["localization_ladder.csv"] = rep.to_csv()
        res["ladder"] = {
            "fine_n": rep.fine_n,
            "rows": [vars(r) for r in rep.rows],
            "steps": rep.steps,
            "monotone_3sigma": rep.monotone_3sigma,
            "ratio_steps": rep.ratio_steps,
            "ratio_bounded_3sigma": rep.ratio_bounded_3sigma,
            "identity_R_max": rep.identity_R_max,
            "localization_activations": {str(r.coarse_n): r.frac_psi_below_one for r in rep.rows},
        }
        if acc.get("require_ladder_monotone"):
            bundle.checks["ladder_monotone"] = rep.monotone_3sigma
            bundle.checks["ladder_identity_zero"] = rep.identity_R_max == 0.0
    bundle.summary["results"] = res


def _density(cfg, workers, bundle):
    model = model_from_config(cfg["model"])
    betas = cfg.get("betas", [cfg["beta"]])
    q = cfg.get("query", {})
    query = None
    if "lo" in q and "hi" in q:
        query = np.linspace(q["lo"], q["hi"], q.get("num", 41))
    table = density_rate_study(
        model,
        cfg["x0"],
        cfg["T"],
        cfg["levels"],
        cfg["reference_level"],
        cfg["num_paths"],
        betas[0],
        query,
        cfg["seed"],
        method=cfg["method"],
        extra_betas=betas[1:],
        weight_cap=cfg.get("weight_cap", 256),
        bandwidth=cfg.get("bandwidth"),
        workers=workers,
        block_size=cfg.get("block_size", 200),
    )
    acc = cfg.get("acceptance", {})
    res = {"tables": {}, "warnings": table.flags.get("warnings", []), "bandwidth": table.extras["bandwidth"]}
    for method, tabs in table.extras["tables"].items():
        for b, t in tabs.items():
            t.exact_tol = acc.get("exact_tol", t.exact_tol)
            t.refit()
            if t.fit:
                t.flags["theta_hat"] = -t.slope
            bundle.files[f"density_rate_{method}_beta{b:g}.csv"] = t.to_csv()
            res["tables"][f"{method}/beta={b:g}"] = t.summary()
    for method, dens in table.extras["densities"].items():
        for n, est in dens.items():
            bundle.files[f"density_{method}_level{n}.csv"] = est.to_csv()
    res["degenerate_samples"] = table.flags.get("degenerate_samples", 0)
    primary = "ibp" if "ibp" in table.extras["tables"] else "kernel"
    res["primary_method"] = primary
    prim = table.extras["tables"][primary]
    if all(t.exact for t in prim.values()):
        res["flag"] = "exact scheme"
    bundle.summary["results"] = res
    if "exact_tol" in acc:
        bundle.checks["exact"] = all(t.exact for t in prim.values())
    for b, t in prim.items():
        if "theta_min" in acc:
            bundle.checks[f"theta_beta{b:g}"] = t.fit is not None and -t.slope > acc["theta_min"]
        if acc.get("require_decreasing"):
            bundle.checks[f"decreasing_beta{b:g}"] = bool(t.flags["decreasing_3sigma"])


def _normal_pdf(y, mu, sd):
    return np.exp(-0.5 * ((y - mu) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))


def _holder(cfg, workers, bundle):
    from .engine import mc_map_reduce

    model = model_from_config(cfg["model"])
    grid = make_grid(cfg["T"], cfg["steps"])
    x0 = cfg["x0"]

    def block(indices):
        dW = sample_increment_block(cfg["seed"], indices, grid, 1)
        F = terminal_state(model, grid, dW, x0, order=2, cap=cfg.get("weight_cap", 256))
        w = ibp_weight_first(F, None, 0, dW, grid, policy="drop")
        return F.value[:, 0], w.h, w.degenerate_mask

    res = mc_map_reduce(cfg["num_paths"], block, workers=workers, block_size=cfg.get("block_size", 2000))
    F, H, deg = res.values
    q = cfg.get("query", {})
    if "lo" in q and "hi" in q:
        y = np.linspace(q["lo"], q["hi"], q.get("num", 41))
    else:
        y = default_query_points(F, q.get("num", 41), q.get("width", 4.0))
    ibp = ibp_density(F, y, H)
    ker = kernel_density(F, y, cfg.get("bandwidth"))
    bundle.files["density_ibp.csv"] = ibp.to_csv()
    bundle.files["density_kernel.csv"] = ker.to_csv()
    spacing = float(y[1] - y[0])
    rows = []
    betas = cfg.get("betas", [cfg["beta"]])
    for est in (ibp, ker):
        for b in betas:
            r = holder_norm(est.values, spacing, b)
            rows.append((est.method, float(b), r.sup_term, r.holder_quotient_term, r.total))
    bundle.files["holder.csv"] = _csv(["method", "beta", "sup_term", "holder_quotient_term", "total"], rows)
    joint = np.abs(ibp.values - ker.values) / np.sqrt(ibp.stderr**2 + ker.stderr**2 + 1e-300)
    out = {
        "holder": [dict(zip(("method", "beta", "sup", "quotient", "total"), r)) for r in rows],
        "ibp_vs_kernel_max_abs_z": float(joint.max()),
        "num_query_points": int(y.size),
        "degenerate_samples": int(np.count_nonzero(deg)),
    }
    acc = cfg.get("acceptance", {})
    if model.kind == "constant":
        # F = x0 + b T + s W(T) is Gaussian
        s = float(model.sigma[0, 0])
        mu = x0 + float(model.drift[0]) * cfg["T"]
        sd = abs(s) * math.sqrt(cfg["T"])
        exact = _normal_pdf(y, mu, sd)
        z = np.abs(ibp.values - exact) / np.maximum(ibp.stderr, 1e-300)
        at_x0 = ibp_density(F, [mu], H)
        out["analytic"] = {
            "max_abs_z": float(z.max()),
            "p_at_mean": float(at_x0.values[0]),
            "p_at_mean_stderr": float(at_x0.stderr[0]),
            "p_at_mean_exact": 1.0 / (sd * math.sqrt(2 * math.pi)),
            "p_at_mean_rel_error": float(abs(at_x0.values[0] * sd * math.sqrt(2 * math.pi) - 1.0)),
        }
        bundle.files["density_analytic.csv"] = _csv(
            ["y", "p_hat", "stderr", "p_exact", "z"], zip(y, ibp.values, ibp.stderr, exact, z)
        )
        if "max_abs_z" in acc:
            bundle.checks["analytic_z"] = out["analytic"]["max_abs_z"] < acc["max_abs_z"]
    bundle.summary["results"] = out


def _ellipticity(cfg, workers, bundle):
    from .engine import mc_map_reduce

    model = model_from_config(cfg["model"])
    grid = make_grid(cfg["T"], cfg["steps"])

    def block(indices):
        dW = sample_increment_block(cfg["seed"], indices, grid, model.m)
        traj = integrate(model, grid, dW, cfg["x0"])
        lo = np.full(len(indices), np.inf)
        for l in range(grid.n + 1):
            s, _ = model.coefficients(l, grid, traj.X)
            lo = np.minimum(lo, np.linalg.eigvalsh(np.einsum("pij,pkj->pik", s, s)).min(axis=-1))
        if model.scalar:
            F = terminal_state(model, grid, dW, cfg["x0"], order=1)
        else:
            from ..euler import first_variation
            from ..wiener_grid import FunctionalState

            V = first_variation(model, grid, dW, cfg["x0"])
            F = FunctionalState(traj.X[:, -1], np.moveaxis(V.terminal, -1, 1))
        cov = covariance(F, grid)
        return cov.det, cov.degenerate.astype(float), lo

    res = mc_map_reduce(cfg["num_paths"], block, workers=workers, block_size=cfg.get("block_size", 1000))
    det, deg, lo = res.values
    c = model.c
    out = {
        "min_det": float(det.min()),
        "mean_det": float(det.mean()),
        "declared_c": c,
        "threshold": 0.1 * c * cfg["T"] ** model.d,
        "degenerate_samples": int(deg.sum()),
        "min_eig_sigma_sigmaT": float(lo.min()),
        "ellipticity_passed": bool(lo.min() >= c),
    }
    bundle.files["ellipticity.csv"] = _csv(
        ["quantity", "value"], [(k, v) for k, v in out.items() if isinstance(v, float)]
    )
    acc = cfg.get("acceptance", {})
    if "det_factor" in acc:
        bundle.checks["min_det"] = out["min_det"] > acc["det_factor"] * c * cfg["T"] ** model.d
    if "max_degenerate" in acc:
        bundle.checks["degenerate"] = out["degenerate_samples"] <= acc["max_degenerate"]
    bundle.checks["ellipticity"] = out["ellipticity_passed"]
    bundle.summary["results"] = out


_DISPATCH = {
    "strong-rate": _strong,
    "derivative-rate": _derivative,
    "ibp-check": _ibp_check,
    "density-rate": _density,
    "holder-norm": _holder,
    "ellipticity-check": _ellipticity,
}


def run_experiment(cfg: dict, workers: int | None = None) -> ReportBundle:
    """Run the study named by ``cfg["experiment"]`` and collect its outputs.

    CSV contents depend only on the semantic part of the config; the JSON
    summary additionally records timing and scheduling.
    """
    kind = cfg["experiment"]
    workers = int(workers or cfg.get("workers", 1))
    bundle = ReportBundle(kind)
    start = time.perf_counter()
    _DISPATCH[kind](cfg, workers, bundle)
    bundle.summary.update(
        experiment=kind,
        version=artifact_version(),
        config_hash=config_hash(cfg),
        seed=cfg["seed"],
        workers=workers,
        wall_clock_s=time.perf_counter() - start,
        model=model_from_config(cfg["model"]).describe(),
    )
    if bundle.checks:
        bundle.summary["acceptance"] = {"checks": dict(bundle.checks), "passed": bundle.passed}
    return bundle
