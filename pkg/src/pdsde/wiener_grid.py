"""Time grids, Brownian increments and exact Malliavin calculus on the
finite-dimensional Gaussian space spanned by the grid increments.

A sample point is an increment array ``dW`` of shape ``(..., n, m)`` whose
entry ``[k, j]`` is ``W^j(t_{k+1}) - W^j(t_k)``. Leading axes are batch axes.
A Malliavin derivative ``D_r F`` is piecewise constant on the cells
``(t_k, t_{k+1}]`` and equals ``dF/d(dW[k, j])`` there, so gradients share the
``(n, m)`` layout of the increments. Second-order data is stored over the
flattened cell index ``N = n * m`` (cell-major, noise-minor).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "make_grid",
    "sample_increments",
    "sample_increment_block",
    "coarsen",
    "refine_field",
    "malliavin_inner",
    "skorohod",
    "gh_expectation",
    "FunctionalState",
    "DenseSecondOrder",
    "RefinedSecondOrder",
    "CombinedSecondOrder",
    "Polynomial",
    "MissingDerivativeError",
    "GH_DIMENSION_CAP",
]

GH_DIMENSION_CAP = 4


class MissingDerivativeError(ValueError):
    """Raised when an operation needs derivative data a functional lacks."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n`` on ``[0, T]``."""

    T: float
    n: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive, got {self.T!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"number of steps n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n", int(self.n))

    @property
    def dt(self) -> float:
        return self.T / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.n + 1) * self.dt
        nodes[-1] = self.T
        return nodes

    def cell_index(self, t: float) -> int:
        """``k_n(t)``: index of the last node at or before ``t``.

        The right endpoint maps to ``n``.
        """
        if t < 0 or t > self.T * (1 + 1e-12):
            raise ValueError(f"time {t!r} outside [0, {self.T}]")
        # snap values within rounding of a node onto it
        k = math.floor(t / self.dt + 1e-9)
        return min(k, self.n)

    def eta(self, t: float) -> float:
        """Grid time ``eta_n(t) = k_n(t) T / n``."""
        return float(self.nodes[self.cell_index(t)])

    def coarsened(self, factor: int) -> "TimeGrid":
        if self.n % factor:
            raise ValueError(f"n={self.n} not divisible by factor {factor}")
        return TimeGrid(self.T, self.n // factor)


def make_grid(T: float, n: int) -> TimeGrid:
    return TimeGrid(T, n)


def _philox(seed: int, traj_index: int) -> np.random.Generator:
    if seed < 0 or traj_index < 0:
        raise ValueError("seed and trajectory index must be non-negative")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, traj_index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_increments(seed: int, traj_index: int, grid: TimeGrid, m: int = 1) -> np.ndarray:
    """Increments of one trajectory, shape ``(n, m)``.

    The stream is a Philox counter-based generator keyed by
    ``(seed, traj_index)``, so the draw for a trajectory does not depend on
    which worker produces it or on what was drawn before.
    """
    if m < 1:
        raise ValueError(f"noise dimension m must be >= 1, got {m}")
    z = _philox(seed, traj_index).standard_normal((grid.n, m))
    return z * math.sqrt(grid.dt)


def sample_increment_block(seed: int, indices: Sequence[int], grid: TimeGrid, m: int = 1) -> np.ndarray:
    """Stack of :func:`sample_increments` for several trajectories, shape ``(B, n, m)``."""
    out = np.empty((len(indices), grid.n, m))
    for row, idx in enumerate(indices):
        out[row] = sample_increments(seed, int(idx), grid, m)
    return out


def _sum_groups(x: np.ndarray, r: int) -> np.ndarray:
    acc = x[..., 0::r, :].copy()
    for off in range(1, r):
        acc += x[..., off::r, :]
    return acc


def coarsen(dW: np.ndarray, factor: int) -> np.ndarray:
    """Coarse-grid increments: sums of ``factor`` consecutive fine increments.

    Powers of two are summed by repeated pairwise halving, which makes
    ``coarsen(coarsen(x, 2), 2)`` bit-identical to ``coarsen(x, 4)``.
    """
    dW = np.asarray(dW, dtype=float)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"coarsening factor must be a positive integer, got {factor!r}")
    n = dW.shape[-2]
    if n % factor:
        raise ValueError(f"cannot coarsen {n} cells by factor {factor}")
    out = dW
    f = int(factor)
    while f % 2 == 0:
        out = out[..., 0::2, :] + out[..., 1::2, :]
        f //= 2
    if f > 1:
        out = _sum_groups(out, f)
    return out if out is not dW else dW.copy()


def refine_field(grad: np.ndarray, factor: int) -> np.ndarray:
    """Lift a coarse gradient field onto a grid with ``factor`` times more cells.

    A coarse increment is the sum of the fine increments it covers, so the
    derivative with respect to each fine increment equals the coarse one.
    """
    return np.repeat(grad, factor, axis=-2)


def malliavin_inner(a: np.ndarray, b: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``<a, b>_H`` for piecewise-constant fields: ``sum a[k, j] b[k, j] dt``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2 or a.shape[-2] != grid.n:
        raise ValueError(f"gradient field must have {grid.n} cells on axis -2, got shape {a.shape}")
    return np.sum(a * b, axis=(-2, -1)) * grid.dt


def skorohod(
    u: np.ndarray,
    dW: np.ndarray,
    grid: TimeGrid,
    grad: np.ndarray | None = None,
    *,
    deterministic: bool = False,
) -> np.ndarray:
    """Divergence ``delta(u) = sum u dW - dt * sum_k,j du[k, j] / d dW[k, j]``.

    ``u`` has the increment layout ``(..., n, m)``; ``grad`` holds
    ``du[k, j] / d dW[k', j']`` with shape ``(..., n, m, n, m)``. A random
    integrand must come with its gradient; pass ``deterministic=True`` to
    integrate a non-random ``u`` (the Wiener integral).
    """
    u = np.asarray(u, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if u.shape[-2:] != dW.shape[-2:] or u.shape[-2] != grid.n:
        raise ValueError(f"integrand shape {u.shape} does not match increments {dW.shape}")
    ito = np.sum(u * dW, axis=(-2, -1))
    if grad is None:
        if not deterministic:
            raise MissingDerivativeError(
                "random integrand needs its gradient; pass grad= or deterministic=True"
            )
        return ito
    n, m = u.shape[-2:]
    g = np.asarray(grad, dtype=float).reshape(grad.shape[:-4] + (n * m, n * m))
    return ito - grid.dt * np.trace(g, axis1=-2, axis2=-1)


def gh_expectation(
    functional: Callable[[np.ndarray], np.ndarray],
    grid: TimeGrid,
    m: int = 1,
    nodes_per_dim: int = 20,
    chunk: int = 65536,
) -> float:
    """``E[functional(dW)]`` by tensor-product Gauss-Hermite quadrature.

    ``functional`` receives a batch of increment arrays ``(B, n, m)`` and
    returns ``(B,)`` values. Exact for polynomials of degree below
    ``2 * nodes_per_dim`` in each increment.
    """
    dim = grid.n * m
    if dim > GH_DIMENSION_CAP:
        raise ValueError(f"quadrature oracle limited to n*m <= {GH_DIMENSION_CAP}, got {dim}")
    if nodes_per_dim < 10:
        raise ValueError("use at least 10 nodes per dimension")
    x, w = np.polynomial.hermite_e.hermegauss(nodes_per_dim)
    w = w / math.sqrt(2.0 * math.pi)
    scale = math.sqrt(grid.dt)
    total = 0.0
    points = itertools.product(range(nodes_per_dim), repeat=dim)
    while True:
        block = np.array(list(itertools.islice(points, chunk)), dtype=np.intp)
        if block.size == 0:
            break
        dW = (x[block] * scale).reshape(-1, grid.n, m)
        weights = np.prod(w[block], axis=1)
        vals = np.asarray(functional(dW), dtype=float).reshape(-1)
        total += float(np.dot(weights, vals))
    return total


# ---------------------------------------------------------------------------
# second-order operators


class DenseSecondOrder:
    """Second-order data from an explicit Hessian over flattened cells."""

    def __init__(self, hess: np.ndarray, n: int, m: int):
        self.hess = np.asarray(hess, dtype=float)
        self.n, self.m = n, m

    def _flat(self, v):
        return v.reshape(v.shape[:-2] + (self.n * self.m,))

    def trace(self) -> np.ndarray:
        return np.trace(self.hess, axis1=-2, axis2=-1)

    def form(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...ij,...j->...", self._flat(u), self.hess, self._flat(v))

    def hvp(self, v: np.ndarray) -> np.ndarray:
        out = np.einsum("...ij,...j->...i", self.hess, self._flat(v))
        return out.reshape(out.shape[:-1] + (self.n, self.m))

    def dense(self) -> np.ndarray:
        return self.hess


class RefinedSecondOrder:
    """Hessian of a coarse-grid functional seen on a finer grid."""

    def __init__(self, coarse, factor: int):
        self.coarse = coarse
        self.factor = factor

    def trace(self):
        return self.factor * self.coarse.trace()

    def form(self, u, v):
        return self.coarse.form(coarsen(u, self.factor), coarsen(v, self.factor))

    def hvp(self, v):
        return refine_field(self.coarse.hvp(coarsen(v, self.factor)), self.factor)

    def dense(self):
        h = self.coarse.dense()
        n_c, m = self.coarse.n, self.coarse.m
        h = h.reshape(h.shape[:-2] + (n_c, m, n_c, m))
        h = np.repeat(np.repeat(h, self.factor, axis=-4), self.factor, axis=-2)
        N = n_c * self.factor * m
        return h.reshape(h.shape[:-4] + (N, N))


class CombinedSecondOrder:
    """Linear combination ``sum c_i op_i`` of second-order operators."""

    def __init__(self, parts: Sequence[tuple[float, object]]):
        self.parts = list(parts)

    def trace(self):
        return sum(c * op.trace() for c, op in self.parts)

    def form(self, u, v):
        return sum(c * op.form(u, v) for c, op in self.parts)

    def hvp(self, v):
        return sum(c * op.hvp(v) for c, op in self.parts)

    def dense(self):
        return sum(c * op.dense() for c, op in self.parts)


@dataclass
class FunctionalState:
    """A vector Wiener functional evaluated on a batch of sample points.

    Shapes, with ``...`` the batch axes, ``d`` components, ``N = n * m``:

    - ``value``: ``(..., d)``
    - ``grad``: ``(..., d, n, m)``, the Malliavin derivative
    - ``hess``: optional ``(..., d, N, N)``
    - ``third``: optional ``(..., d, N, N, N)``
    - ``second``: optional per-component operators exposing ``trace``,
      ``form`` and ``hvp`` without materialising the Hessian
    - ``dW``: optional sample points ``(..., n, m)`` the values belong to
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None
    third: np.ndarray | None = None
    second: tuple | None = None
    dW: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.grad = np.asarray(self.grad, dtype=float)
        d = self.value.shape[-1]
        if self.grad.shape[:-2] != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} inconsistent with value {self.value.shape}")
        N = self.n * self.m
        if self.hess is not None:
            self.hess = np.asarray(self.hess, dtype=float)
            if self.hess.shape != self.value.shape + (N, N):
                raise ValueError(f"hess shape {self.hess.shape} inconsistent with grad {self.grad.shape}")
        if self.third is not None:
            self.third = np.asarray(self.third, dtype=float)
            if self.third.shape != self.value.shape + (N, N, N):
                raise ValueError(f"third shape {self.third.shape} inconsistent with grad {self.grad.shape}")
        if self.second is not None and len(self.second) != d:
            raise ValueError("need one second-order operator per component")

    @property
    def d(self) -> int:
        return self.value.shape[-1]

    @property
    def n(self) -> int:
        return self.grad.shape[-2]

    @property
    def m(self) -> int:
        return self.grad.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.value.shape[:-1]

    def has_second_order(self) -> bool:
        return self.hess is not None or self.second is not None

    def second_order(self, i: int):
        """Operator giving trace, bilinear form and Hessian-vector products of component ``i``."""
        if self.hess is not None:
            return DenseSecondOrder(self.hess[..., i, :, :], self.n, self.m)
        if self.second is not None:
            return self.second[i]
        raise MissingDerivativeError("functional carries no second-order derivative data")

    def component(self, i: int) -> "FunctionalState":
        sl = slice(i, i + 1)
        return FunctionalState(
            value=self.value[..., sl],
            grad=self.grad[..., sl, :, :],
            hess=None if self.hess is None else self.hess[..., sl, :, :],
            third=None if self.third is None else self.third[..., sl, :, :, :],
            second=None if self.second is None else (self.second[i],),
            dW=self.dW,
        )

    def dense_hessian(self) -> np.ndarray:
        if self.hess is not None:
            return self.hess
        ops = [self.second_order(i) for i in range(self.d)]
        return np.stack([op.dense() for op in ops], axis=-3)

    @classmethod
    def stack(cls, parts: Sequence["FunctionalState"]) -> "FunctionalState":
        """Concatenate scalar or vector functionals along the component axis."""
        hess = third = second = None
        if all(p.hess is not None for p in parts):
            hess = np.concatenate([p.hess for p in parts], axis=-3)
        if all(p.third is not None for p in parts):
            third = np.concatenate([p.third for p in parts], axis=-4)
        if hess is None and all(p.has_second_order() for p in parts):
            second = tuple(p.second_order(i) for p in parts for i in range(p.d))
        return cls(
            value=np.concatenate([p.value for p in parts], axis=-1),
            grad=np.concatenate([p.grad for p in parts], axis=-3),
            hess=hess,
            third=third,
            second=second,
            dW=parts[0].dW,
        )

    @classmethod
    def constant(cls, c: float, like: "FunctionalState") -> "FunctionalState":
        """Deterministic scalar functional with the batch and grid shape of ``like``."""
        N = like.n * like.m
        shape = like.batch_shape
        return cls(
            value=np.full(shape + (1,), float(c)),
            grad=np.zeros(shape + (1, like.n, like.m)),
            hess=np.zeros(shape + (1, N, N)),
            third=np.zeros(shape + (1, N, N, N)) if like.third is not None else None,
            dW=like.dW,
        )

    @classmethod
    def brownian(cls, dW: np.ndarray, j: int = 0) -> "FunctionalState":
        """``W^j(T)`` as a functional: gradient one on noise ``j``, Hessian zero."""
        dW = np.asarray(dW, dtype=float)
        n, m = dW.shape[-2:]
        grad = np.zeros(dW.shape)
        grad[..., j] = 1.0
        N = n * m
        batch = dW.shape[:-2]
        return cls(
            value=dW[..., j].sum(axis=-1)[..., None],
            grad=grad[..., None, :, :],
            hess=np.zeros(batch + (1, N, N)),
            third=np.zeros(batch + (1, N, N, N)),
            dW=dW,
        )

    def shifted(self, offset: float) -> "FunctionalState":
        return replace(self, value=self.value + offset)

    def scaled(self, c: float) -> "FunctionalState":
        second = None
        if self.second is not None:
            second = tuple(CombinedSecondOrder([(c, op)]) for op in self.second)
        return FunctionalState(
            value=c * self.value,
            grad=c * self.grad,
            hess=None if self.hess is None else c * self.hess,
            third=None if self.third is None else c * self.third,
            second=second,
            dW=self.dW,
        )

    def __sub__(self, other: "FunctionalState") -> "FunctionalState":
        if self.grad.shape != other.grad.shape:
            raise ValueError("functionals live on different grids; refine the coarse one first")
        hess = third = second = None
        if self.hess is not None and other.hess is not None:
            hess = self.hess - other.hess
        elif self.has_second_order() and other.has_second_order():
            second = tuple(
                CombinedSecondOrder([(1.0, self.second_order(i)), (-1.0, other.second_order(i))])
                for i in range(self.d)
            )
        if self.third is not None and other.third is not None:
            third = self.third - other.third
        return FunctionalState(
            value=self.value - other.value,
            grad=self.grad - other.grad,
            hess=hess,
            third=third,
            second=second,
            dW=self.dW,
        )

    def refine(self, fine_dW: np.ndarray) -> "FunctionalState":
        """View a coarse-grid functional as a functional of finer increments.

        ``fine_dW`` must coarsen exactly onto this functional's sample points.
        """
        fine_dW = np.asarray(fine_dW, dtype=float)
        n_f = fine_dW.shape[-2]
        if n_f % self.n:
            raise ValueError(f"fine grid of {n_f} cells does not refine {self.n} cells")
        factor = n_f // self.n
        if self.dW is not None and not np.array_equal(coarsen(fine_dW, factor), self.dW):
            raise ValueError("fine increments do not coarsen onto this functional's sample points")
        second = None
        if self.has_second_order():
            second = tuple(RefinedSecondOrder(self.second_order(i), factor) for i in range(self.d))
        return FunctionalState(
            value=self.value,
            grad=refine_field(self.grad, factor),
            second=second,
            dW=fine_dW,
        )


# ---------------------------------------------------------------------------
# polynomial functionals (exact oracles for the quadrature tests)


class Polynomial:
    """Polynomial in the flattened increments with exact derivatives.

    ``terms`` maps exponent tuples of length ``N = n * m`` to coefficients,
    e.g. ``{(1, 0): 1.0, (3, 0): 0.1, (0, 1): 0.5}`` for
    ``x0 + 0.1 x0**3 + 0.5 x1``.
    """

    def __init__(self, terms: Mapping[tuple, float]):
        if not terms:
            raise ValueError("empty polynomial")
        dims = {len(e) for e in terms}
        if len(dims) != 1:
            raise ValueError("all exponent tuples must have the same length")
        self.N = dims.pop()
        self.terms = {tuple(int(p) for p in e): float(c) for e, c in terms.items()}

    def _monomial(self, x: np.ndarray, exps: tuple, deriv: tuple) -> np.ndarray:
        out = np.ones(x.shape[:-1])
        for i, p in enumerate(exps):
            k = deriv.count(i)
            if k > p:
                return np.zeros(x.shape[:-1])
            if p - k:
                out = out * x[..., i] ** (p - k)
            out = out * math.perm(p, k)
        return out

    def _derivative(self, x: np.ndarray, deriv: tuple) -> np.ndarray:
        return sum(c * self._monomial(x, e, deriv) for e, c in self.terms.items())

    def __call__(self, dW: np.ndarray) -> np.ndarray:
        x = dW.reshape(dW.shape[:-2] + (-1,))
        return self._derivative(x, ())

    def state(self, dW: np.ndarray, order: int = 3) -> FunctionalState:
        """Scalar :class:`FunctionalState` with derivatives up to ``order``."""
        dW = np.asarray(dW, dtype=float)
        n, m = dW.shape[-2:]
        if n * m != self.N:
            raise ValueError(f"polynomial has {self.N} variables, increments have {n * m}")
        x = dW.reshape(dW.shape[:-2] + (self.N,))
        batch = x.shape[:-1]
        N = self.N
        grad = np.stack([self._derivative(x, (i,)) for i in range(N)], axis=-1)
        hess = third = None
        if order >= 2:
            hess = np.empty(batch + (N, N))
            for i, j in itertools.product(range(N), repeat=2):
                hess[..., i, j] = self._derivative(x, (i, j))
        if order >= 3:
            third = np.empty(batch + (N, N, N))
            for i, j, k in itertools.product(range(N), repeat=3):
                third[..., i, j, k] = self._derivative(x, (i, j, k))
        return FunctionalState(
            value=self._derivative(x, ())[..., None],
            grad=grad.reshape(batch + (1, n, m)),
            hess=None if hess is None else hess[..., None, :, :],
            third=None if third is None else third[..., None, :, :, :],
            dW=dW,
        )
