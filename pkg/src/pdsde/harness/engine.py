"""Deterministic Monte Carlo map-reduce.

Paths are split into fixed-size blocks that depend only on ``num_paths`` and
``block_size``. Each block is a pure function of its path indices, blocks are
collected in ascending index order and reduced once, so the result does not
depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_BLOCK_SIZE = 512


class PathComputationError(RuntimeError):
    """A per-path computation failed; ``index`` is the first failing path."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"path {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


@dataclass
class MCResult:
    """Per-path outputs in index order plus summary statistics of the first output."""

    values: object
    aggregate: object
    mean: np.ndarray
    variance: np.ndarray
    num_paths: int


def _blocks(num_paths: int, block_size: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + block_size, num_paths), dtype=np.int64) for s in range(0, num_paths, block_size)]


def _run_block(fn, indices):
    try:
        return fn(indices)
    except Exception as exc:
        # locate the offending path by re-running the block one path at a time
        for i in indices:
            try:
                fn(np.array([i], dtype=np.int64))
            except Exception as inner:
                raise PathComputationError(int(i), inner) from inner
        raise PathComputationError(int(indices[0]), exc) from exc


def _concat(parts: Sequence):
    first = parts[0]
    if isinstance(first, tuple):
        return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(len(first)))
    if isinstance(first, dict):
        return {k: np.concatenate([p[k] for p in parts], axis=0) for k in first}
    return np.concatenate(parts, axis=0)


def mc_map_reduce(
    num_paths: int,
    block_fn: Callable[[np.ndarray], object],
    reducer: Callable | None = None,
    *,
    workers: int = 1,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> MCResult:
    """Evaluate ``block_fn`` over all path indices and reduce in index order.

    ``block_fn(indices)`` returns an array (or tuple/dict of arrays) whose
    leading axis runs over ``indices``. ``reducer`` receives the concatenated
    per-path outputs. ``mean``/``variance`` (unbiased) describe the first
    output along the path axis.
    """
    if num_paths < 1:
        raise ValueError("num_paths must be positive")
    if workers < 1 or block_size < 1:
        raise ValueError("workers and block_size must be positive")
    blocks = _blocks(num_paths, block_size)
    if workers == 1 or len(blocks) == 1:
        parts = [_run_block(block_fn, b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _run_block(block_fn, b), blocks))
    values = _concat(parts)
    primary = values[0] if isinstance(values, tuple) else next(iter(values.values())) if isinstance(values, dict) else values
    primary = np.asarray(primary, dtype=float)
    mean = primary.mean(axis=0)
    variance = primary.var(axis=0, ddof=1) if num_paths > 1 else np.zeros_like(mean)
    aggregate = reducer(values) if reducer is not None else values
    return MCResult(values, aggregate, mean, variance, num_paths)
