"""Log-log rate fitting and the rate table container."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RateFit:
    slope: float
    slope_stderr: float
    r2: float
    intercept: float
    num_points: int

    def slope_ci(self, level: float = 0.95) -> tuple[float, float]:
        dof = self.num_points - 2
        if dof < 1 or not math.isfinite(self.slope_stderr):
            return (math.nan, math.nan)
        q = stats.t.ppf(0.5 + level / 2, dof)
        return (self.slope - q * self.slope_stderr, self.slope + q * self.slope_stderr)


def fit_rate(points: Sequence[tuple[float, float]]) -> RateFit:
    """Ordinary least squares line through ``(x, y)`` points.

    Needs at least three points with distinct abscissae. The slope standard
    error comes from the residual variance with ``n - 2`` degrees of freedom.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 (x, y) points to fit a rate")
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) != len(x):
        raise ValueError("abscissae must be distinct")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point in rate fit")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    ssr = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    se = math.sqrt(ssr / (len(x) - 2) / sxx)
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    return RateFit(slope, se, r2, intercept, len(x))


@dataclass
class RateRow:
    level: int
    steps: int
    error: float
    stderr: float


@dataclass
class RateTable:
    """Errors per resolution with a fitted log2-log2 slope.

    ``abscissa`` is ``"log2_steps"`` (fit against ``log2(steps)``) or
    ``"level"`` (fit against the level index, as for ``k_n = 2^(2n)``).
    """

    rows: list[RateRow]
    abscissa: str = "log2_steps"
    seed: int | None = None
    config_hash: str | None = None
    exact_tol: float = 1e-10
    fit: RateFit | None = field(default=None)
    flags: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.steps)
        if self.fit is None:
            self.refit()

    @property
    def exact(self) -> bool:
        return all(r.error <= self.exact_tol for r in self.rows)

    def refit(self):
        self.fit = None
        if self.exact or len(self.rows) < 3 or any(r.error <= 0 for r in self.rows):
            return
        xs = [math.log2(r.steps) if self.abscissa == "log2_steps" else float(r.level) for r in self.rows]
        self.fit = fit_rate([(x, math.log2(r.error)) for x, r in zip(xs, self.rows)])

    @property
    def slope(self) -> float:
        return self.fit.slope if self.fit else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "steps", "error", "stderr"])
        for r in self.rows:
            w.writerow([r.level, r.steps, repr(float(r.error)), repr(float(r.stderr))])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "abscissa": self.abscissa,
            "exact": self.exact,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "rows": [vars(r).copy() for r in self.rows],
        }
        if self.fit:
            lo, hi = self.fit.slope_ci()
            out.update(slope=self.fit.slope, slope_stderr=self.fit.slope_stderr, slope_ci=[lo, hi], r2=self.fit.r2)
        else:
            out.update(slope=None, slope_stderr=None, slope_ci=None, r2=None)
        out.update(self.flags)
        return out
