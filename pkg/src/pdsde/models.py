"""Path-dependent coefficient models.

A model supplies ``sigma(t_l, X|[0, t_l])`` and ``b(t_l, X|[0, t_l])`` for the
Euler scheme together with sparse partial derivatives with respect to the
grid values of the stopped path they read.

The scalar built-ins (``d = m = 1``) are smooth functions of a few *arguments*,
each a fixed linear functional of the stopped path:

- ``x``/``v``: the current value ``X(t_l)``
- ``u``: the delayed value ``X(t_l - tau)``, linearly interpolated between
  grid nodes, with constant pre-history ``X(s) = X(0)`` for ``s < 0``
- ``w``: the running integral of the piecewise-linear path over ``[0, t_l]``

Coefficient functions are sums of products of ``lin``, ``sin`` and ``cos``
factors, written as term names such as ``"const"``, ``"sin_u"`` or
``"sin_u_cos_v"``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .wiener_grid import TimeGrid

__all__ = [
    "CoefficientModel",
    "SmoothCoefficient",
    "ScalarPathModel",
    "MarkovianModel",
    "DelayModel",
    "DistributedDelayModel",
    "ConstantModel",
    "DiscretePath",
    "Stencil",
    "eval_coeffs",
    "coeff_gradients",
    "coeff_hessians",
    "check_ellipticity",
    "EllipticityReport",
    "lipschitz_constants",
    "model_from_config",
    "ModelError",
]


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# smooth coefficient functions

_FACTOR_DERIVS = {
    # derivative k of each factor, k = 0..3
    "lin": (lambda a: a, lambda a: np.ones_like(a), np.zeros_like, np.zeros_like),
    "sin": (np.sin, np.cos, lambda a: -np.sin(a), lambda a: -np.cos(a)),
    "cos": (np.cos, lambda a: -np.sin(a), lambda a: -np.cos(a), np.sin),
}
# sup |f^(k)| over the real line
_FACTOR_BOUNDS = {"lin": (math.inf, 1.0, 0.0, 0.0), "sin": (1.0,) * 4, "cos": (1.0,) * 4}


class SmoothCoefficient:
    """``f(a_1, ..., a_R) = sum_t c_t prod_r g_{t,r}(a_r)`` with analytic derivatives."""

    def __init__(self, args: Sequence[str], terms: Mapping[str, float] | None = None):
        self.args = tuple(args)
        self.terms = []
        for name, coef in (terms or {}).items():
            self.terms.append((float(coef), self._parse(name)))
        self.spec = {name: float(c) for name, c in (terms or {}).items()}

    def _parse(self, name: str) -> dict[int, str]:
        if name == "const":
            return {}
        tokens = name.split("_")
        if len(tokens) % 2:
            raise ModelError(f"cannot parse coefficient term {name!r}")
        factors: dict[int, str] = {}
        for kind, arg in zip(tokens[0::2], tokens[1::2]):
            if kind not in _FACTOR_DERIVS:
                raise ModelError(f"unknown factor {kind!r} in term {name!r}; use lin, sin or cos")
            if arg not in self.args:
                raise ModelError(f"term {name!r} uses argument {arg!r}; model arguments are {self.args}")
            r = self.args.index(arg)
            if r in factors:
                raise ModelError(f"argument {arg!r} repeated in term {name!r}")
            factors[r] = kind
        return factors

    @property
    def is_constant(self) -> bool:
        return all(not f for _, f in self.terms)

    def derivative(self, a: np.ndarray, multi: tuple) -> np.ndarray:
        """Partial derivative indexed by argument positions ``multi`` at ``a`` (``(P, R)``)."""
        counts = [multi.count(r) for r in range(len(self.args))]
        out = np.zeros(a.shape[:-1])
        for coef, factors in self.terms:
            if any(counts[r] and r not in factors for r in range(len(self.args))):
                continue
            val = np.full(a.shape[:-1], coef)
            for r, kind in factors.items():
                val = val * _FACTOR_DERIVS[kind][counts[r]](a[..., r])
            out = out + val
        return out

    def jet(self, a: np.ndarray, order: int) -> list[np.ndarray]:
        """``[f, grad f, hess f, third f]`` up to ``order`` at points ``a``."""
        R = len(self.args)
        out = [self.derivative(a, ())]
        for k in range(1, order + 1):
            arr = np.empty(a.shape[:-1] + (R,) * k)
            for multi in itertools.product(range(R), repeat=k):
                arr[(...,) + multi] = self.derivative(a, multi)
            out.append(arr)
        return out

    def sup_abs(self) -> float:
        return sum(abs(c) * math.prod(_FACTOR_BOUNDS[k][0] for k in f.values()) for c, f in self.terms)

    def lipschitz(self, r: int) -> float:
        """Bound on ``sup |df/da_r|``."""
        total = 0.0
        for coef, factors in self.terms:
            if r not in factors:
                continue
            bound = abs(coef) * _FACTOR_BOUNDS[factors[r]][1]
            for other, kind in factors.items():
                if other != r:
                    bound *= _FACTOR_BOUNDS[kind][0]
            total += bound
        return total


# ---------------------------------------------------------------------------
# path containers and stencils


@dataclass
class DiscretePath:
    """Grid values ``X(t_k)``, shape ``(n + 1, d)`` or batched ``(P, n + 1, d)``."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-2] != self.grid.n + 1:
            raise ValueError(f"path has {self.values.shape[-2]} nodes, grid has {self.grid.n + 1}")

    def __call__(self, s: float) -> np.ndarray:
        """Piecewise-linear evaluation; constant pre-history for ``s < 0``."""
        if s <= 0:
            return self.values[..., 0, :]
        if s > self.grid.T * (1 + 1e-12):
            raise ValueError(f"time {s} beyond horizon {self.grid.T}")
        pos = min(s / self.grid.dt, float(self.grid.n))
        k = min(int(math.floor(pos)), self.grid.n - 1)
        frac = pos - k
        return (1 - frac) * self.values[..., k, :] + frac * self.values[..., k + 1, :]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[..., -1, :]


class Stencil(NamedTuple):
    """Sparse first partials at one step.

    ``idx`` lists the consulted grid indices; ``sigma[..., q, i, j, i2]`` is
    ``d sigma^i_j / d x^{i2}_{idx[q]}`` and ``drift[..., q, i, i2]`` is
    ``d b^i / d x^{i2}_{idx[q]}``.
    """

    idx: np.ndarray
    sigma: np.ndarray
    drift: np.ndarray


class CoefficientModel:
    """Interface for path-dependent coefficients.

    All evaluators take the step ``l`` and a batch of paths ``X`` with shape
    ``(P, n + 1, d)``; only ``X[:, :l + 1]`` may be read.
    """

    d: int = 1
    m: int = 1
    c: float = 0.0
    kind: str = "abstract"
    scalar: bool = False
    markovian: bool = False
    # coefficients ignore both l and X
    frozen: bool = False

    def coefficients(self, l: int, grid: TimeGrid, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(sigma (P, d, m), b (P, d))``."""
        raise NotImplementedError

    def gradients(self, l: int, grid: TimeGrid, X: np.ndarray) -> Stencil:
        raise NotImplementedError

    def hessians(self, l: int, grid: TimeGrid, X: np.ndarray):
        """``(idx, d2sigma (P, Q, Q), d2b (P, Q, Q))``; scalar models only."""
        raise ModelError(f"{self.kind} model does not provide second partials")

    def third_partials(self, l: int, grid: TimeGrid, X: np.ndarray):
        raise ModelError(f"{self.kind} model does not provide third partials")

    def describe(self) -> dict:
        return {"kind": self.kind}


# argument specs: ("current",), ("delayed", tau), ("integral",)


@lru_cache(maxsize=65536)
def _arg_functional(spec: tuple, l: int, T: float, n: int) -> tuple[tuple, tuple]:
    dt = T / n
    kind = spec[0]
    if kind == "current":
        return (l,), (1.0,)
    if kind == "delayed":
        pos = l - spec[1] / dt
        nearest = round(pos)
        if abs(pos - nearest) < 1e-9:
            pos = float(nearest)
        if pos <= 0:
            return (0,), (1.0,)
        s0 = int(math.floor(pos))
        frac = pos - s0
        if frac == 0.0:
            return (s0,), (1.0,)
        return (s0, s0 + 1), (1.0 - frac, frac)
    if kind == "integral":
        if l == 0:
            return (0,), (0.0,)
        w = [dt] * (l + 1)
        w[0] = w[-1] = 0.5 * dt
        return tuple(range(l + 1)), tuple(w)
    raise ModelError(f"unknown argument kind {kind!r}")


@lru_cache(maxsize=65536)
def _stencil_matrix(specs: tuple, l: int, T: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Union stencil ``idx (Q,)`` and weight matrix ``W (R, Q)`` with ``a = W @ x[idx]``."""
    funcs = [_arg_functional(s, l, T, n) for s in specs]
    idx = sorted({i for ids, _ in funcs for i in ids})
    pos = {i: q for q, i in enumerate(idx)}
    W = np.zeros((len(specs), len(idx)))
    for r, (ids, ws) in enumerate(funcs):
        for i, w in zip(ids, ws):
            W[r, pos[i]] += w
    idx_arr = np.array(idx, dtype=np.int64)
    idx_arr.setflags(write=False)
    W.setflags(write=False)
    return idx_arr, W


@dataclass(frozen=True, eq=False)
class ScalarPathModel(CoefficientModel):
    """``d = m = 1`` model whose coefficients are smooth functions of path arguments."""

    sigma_fn: SmoothCoefficient
    drift_fn: SmoothCoefficient
    arg_specs: tuple
    c: float = 0.0
    kind: str = "scalar"
    params: dict = field(default_factory=dict)

    d = 1
    m = 1
    scalar = True

    @property
    def markovian(self) -> bool:
        return all(s[0] == "current" for s in self.arg_specs)

    def _args(self, l, grid, X):
        if l < 0 or l > grid.n:
            raise ModelError(f"step index {l} outside [0, {grid.n}]")
        idx, W = _stencil_matrix(self.arg_specs, l, grid.T, grid.n)
        return idx, W, X[:, idx, 0] @ W.T

    def coefficients(self, l, grid, X):
        _, _, a = self._args(l, grid, X)
        s = self.sigma_fn.derivative(a, ())
        b = self.drift_fn.derivative(a, ())
        return s[:, None, None], b[:, None]

    def gradients(self, l, grid, X):
        idx, W, a = self._args(l, grid, X)
        gs = self.sigma_fn.jet(a, 1)[1] @ W
        gb = self.drift_fn.jet(a, 1)[1] @ W
        return Stencil(idx, gs[:, :, None, None, None], gb[:, :, None, None])

    def hessians(self, l, grid, X):
        idx, W, a = self._args(l, grid, X)
        hs = np.einsum("rq,prs,st->pqt", W, self.sigma_fn.jet(a, 2)[2], W)
        hb = np.einsum("rq,prs,st->pqt", W, self.drift_fn.jet(a, 2)[2], W)
        return idx, hs, hb

    def third_partials(self, l, grid, X):
        if not self.markovian:
            raise ModelError("third-order partials are provided for Markovian models only")
        _, _, a = self._args(l, grid, X)
        return self.sigma_fn.derivative(a, (0, 0, 0)), self.drift_fn.derivative(a, (0, 0, 0))

    def describe(self):
        out = {"kind": self.kind, "sigma": self.sigma_fn.spec, "drift": self.drift_fn.spec, "c": self.c}
        out.update(self.params)
        return out


def MarkovianModel(sigma: Mapping[str, float], drift: Mapping[str, float] | None = None, c: float = 0.0):
    """``dX = b(X) dt + sigma(X) dW`` with coefficient terms in the argument ``x``."""
    args = ("x",)
    return ScalarPathModel(
        SmoothCoefficient(args, sigma), SmoothCoefficient(args, drift), (("current",),), c=c, kind="markovian"
    )


def DelayModel(
    tau: float, sigma: Mapping[str, float], drift: Mapping[str, float] | None = None, c: float = 0.0
):
    """``dX = b(u, v) dt + sigma(u, v) dW`` with ``u = X(t - tau)`` and ``v = X(t)``."""
    if tau <= 0:
        raise ModelError(f"delay tau must be positive, got {tau}")
    args = ("u", "v")
    return ScalarPathModel(
        SmoothCoefficient(args, sigma),
        SmoothCoefficient(args, drift),
        (("delayed", float(tau)), ("current",)),
        c=c,
        kind="delay",
        params={"tau": float(tau)},
    )


def DistributedDelayModel(sigma: Mapping[str, float], drift: Mapping[str, float] | None = None, c: float = 0.0):
    """Coefficients in ``v = X(t)`` and ``w = int_0^t X(s) ds``."""
    args = ("v", "w")
    return ScalarPathModel(
        SmoothCoefficient(args, sigma),
        SmoothCoefficient(args, drift),
        (("current",), ("integral",)),
        c=c,
        kind="distributed_delay",
    )


@dataclass(frozen=True, eq=False)
class ConstantModel(CoefficientModel):
    """``sigma`` (``d x m``) and ``b`` (``d``) independent of time and path."""

    sigma: np.ndarray
    drift: np.ndarray
    c: float = 0.0
    kind: str = "constant"
    markovian = True
    frozen = True

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        b = np.atleast_1d(np.asarray(self.drift, dtype=float))
        if b.shape != (s.shape[0],):
            raise ModelError(f"drift of shape {b.shape} does not match sigma {s.shape}")
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "drift", b)

    @property
    def d(self):
        return self.sigma.shape[0]

    @property
    def m(self):
        return self.sigma.shape[1]

    @property
    def scalar(self):
        return self.sigma.shape == (1, 1)

    def coefficients(self, l, grid, X):
        P = X.shape[0]
        return np.broadcast_to(self.sigma, (P,) + self.sigma.shape), np.broadcast_to(self.drift, (P, self.d))

    def gradients(self, l, grid, X):
        P, d, m = X.shape[0], self.d, self.m
        return Stencil(np.zeros(0, dtype=np.int64), np.zeros((P, 0, d, m, d)), np.zeros((P, 0, d, d)))

    def hessians(self, l, grid, X):
        if not self.scalar:
            raise ModelError("second partials are provided for d = m = 1 only")
        P = X.shape[0]
        return np.zeros(0, dtype=np.int64), np.zeros((P, 0, 0)), np.zeros((P, 0, 0))

    def third_partials(self, l, grid, X):
        P = X.shape[0]
        return np.zeros(P), np.zeros(P)

    def describe(self):
        return {"kind": "constant", "sigma": self.sigma.tolist(), "drift": self.drift.tolist(), "c": self.c}


# ---------------------------------------------------------------------------
# single-path evaluation


def _batch(path: DiscretePath) -> np.ndarray:
    v = path.values
    return v[None] if v.ndim == 2 else v


def _check_index(t_index: int, grid: TimeGrid):
    if not 0 <= t_index <= grid.n:
        raise ModelError(f"time index {t_index} outside [0, {grid.n}]")


def eval_coeffs(model: CoefficientModel, t_index: int, path: DiscretePath):
    """``(sigma (d, m), b (d,))`` on the path stopped at ``t_index``."""
    _check_index(t_index, path.grid)
    s, b = model.coefficients(t_index, path.grid, _batch(path))
    return np.array(s[0]), np.array(b[0])


def coeff_gradients(model: CoefficientModel, t_index: int, path: DiscretePath) -> dict:
    """Nonzero first partials ``{(s, i): (dsigma (d, m), db (d,))}`` w.r.t. ``x^i_s``."""
    _check_index(t_index, path.grid)
    st = model.gradients(t_index, path.grid, _batch(path))
    out = {}
    for q, s in enumerate(st.idx):
        for i in range(model.d):
            ds = st.sigma[0, q, :, :, i]
            db = st.drift[0, q, :, i]
            if np.any(ds) or np.any(db):
                out[(int(s), i)] = (np.array(ds), np.array(db))
    return out


def coeff_hessians(model: CoefficientModel, t_index: int, path: DiscretePath) -> dict:
    """Nonzero second partials ``{(s, s2): (d2sigma, d2b)}`` of a scalar model."""
    _check_index(t_index, path.grid)
    idx, hs, hb = model.hessians(t_index, path.grid, _batch(path))
    out = {}
    for q, s in enumerate(idx):
        for q2, s2 in enumerate(idx):
            if hs[0, q, q2] != 0.0 or hb[0, q, q2] != 0.0:
                out[(int(s), int(s2))] = (float(hs[0, q, q2]), float(hb[0, q, q2]))
    return out


@dataclass
class EllipticityReport:
    min_eigenvalue: float
    declared_c: float

    @property
    def passed(self) -> bool:
        return self.min_eigenvalue >= self.declared_c


def check_ellipticity(model: CoefficientModel, sample_paths: Sequence[DiscretePath]) -> EllipticityReport:
    """Smallest eigenvalue of ``sigma sigma^*`` over every step of the sample paths."""
    lo = math.inf
    for path in sample_paths:
        X = _batch(path)
        for l in range(path.grid.n + 1):
            s, _ = model.coefficients(l, path.grid, X)
            ss = np.einsum("pij,pkj->pik", s, s)
            lo = min(lo, float(np.linalg.eigvalsh(ss).min()))
    return EllipticityReport(lo, model.c)


def lipschitz_constants(model: CoefficientModel, T: float) -> dict:
    """Bounds ``C0`` for the Lipschitz and linear-growth conditions in the sup norm."""
    if isinstance(model, ConstantModel):
        growth = max(np.linalg.norm(model.sigma), np.linalg.norm(model.drift))
        return {"lipschitz": 0.0, "growth": float(growth)}
    # each argument is a linear functional of the path with sup-norm weight 1 (or T for the integral)
    weights = [T if s[0] == "integral" else 1.0 for s in model.arg_specs]
    lip = max(
        sum(fn.lipschitz(r) * w for r, w in enumerate(weights)) for fn in (model.sigma_fn, model.drift_fn)
    )
    growth = max(fn.sup_abs() for fn in (model.sigma_fn, model.drift_fn))
    return {"lipschitz": float(lip), "growth": float(max(growth, lip))}


def model_from_config(block: Mapping) -> CoefficientModel:
    """Build a model from the JSON config ``model`` block."""
    kind = block["kind"]
    c = float(block.get("c", 0.0))
    if kind == "constant":
        return ConstantModel(np.asarray(block.get("sigma", 1.0)), np.asarray(block.get("drift", 0.0)), c=c)
    sigma = block.get("sigma", {})
    drift = block.get("drift", {})
    if not isinstance(sigma, Mapping) or not isinstance(drift, Mapping):
        raise ModelError(f"{kind} model expects sigma and drift as term maps")
    if kind == "markovian":
        return MarkovianModel(sigma, drift, c=c)
    if kind == "delay":
        if "tau" not in block:
            raise ModelError("delay model needs tau")
        return DelayModel(float(block["tau"]), sigma, drift, c=c)
    if kind == "distributed_delay":
        return DistributedDelayModel(sigma, drift, c=c)
    raise ModelError(f"unknown model kind {kind!r}")
