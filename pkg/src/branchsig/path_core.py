"""Discretely observed paths, count-sampled prefix families and augmentations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Path:
    """Piecewise-linear path sampled at ``grid`` with ``values`` of shape (N+1, d)."""

    grid: np.ndarray
    values: np.ndarray

    def __init__(self, grid, values, *, _check: bool = True):
        grid = _frozen(np.ravel(grid))
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        values = _frozen(values)
        if _check:
            if values.ndim != 2 or values.shape[1] < 1:
                raise InvalidInputError(f"values must be (n, d) with d >= 1, got {values.shape}")
            if values.shape[0] != grid.shape[0]:
                raise InvalidInputError(
                    f"grid has {grid.shape[0]} times but values has {values.shape[0]} rows"
                )
            if grid.shape[0] >= 2 and not np.all(np.diff(grid) > 0):
                bad = int(np.argmin(np.diff(grid) > 0)) + 1
                raise InvalidInputError(f"grid must be strictly increasing (violated at index {bad})")
            if not (np.all(np.isfinite(grid)) and np.all(np.isfinite(values))):
                raise InvalidInputError("path contains non-finite entries")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return int(self.grid.shape[0])

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def restrict(self, start: int, stop: int) -> "Path":
        """Sub-path on samples ``start..stop`` inclusive."""
        return Path(self.grid[start : stop + 1], self.values[start : stop + 1])

    def concat_channels(self, extra) -> "Path":
        extra = np.asarray(extra, dtype=np.float64)
        if extra.ndim == 1:
            extra = extra[:, None]
        return Path(self.grid, np.hstack([self.values, extra]))


def prefix_index(grid, t: float) -> int:
    """Floor node ``max{j : t_j <= t}``; raises for queries before ``grid[0]``."""
    grid = np.asarray(grid)
    if t < grid[0]:
        raise InvalidInputError(f"query time {t} precedes the first node {grid[0]}")
    return int(np.searchsorted(grid, t, side="right") - 1)


@dataclass(frozen=True)
class PathFamily:
    """Nested prefixes f_0 ⊂ f_1 ⊂ ... ⊂ f_N of a single observed path.

    Prefix ``i`` covers samples ``0..i``; prefix 0 is the degenerate two-point
    path repeating the initial sample at ``t_0``.
    """

    base: Path

    def __len__(self) -> int:
        return len(self.base)

    def prefix(self, i: int) -> Path:
        n = len(self.base)
        if not 0 <= i < n:
            raise IndexError(f"prefix index {i} out of range for {n} prefixes")
        if i == 0:
            g = self.base.grid[[0, 0]]
            v = self.base.values[[0, 0]]
            return Path(g, v, _check=False)
        return self.base.restrict(0, i)

    def __iter__(self):
        return (self.prefix(i) for i in range(len(self)))

    def prefix_at(self, t: float) -> Path:
        return self.prefix(prefix_index(self.base.grid, t))


def count_sample(path: Path) -> PathFamily:
    if len(path) < 2:
        raise InvalidInputError("count sampling needs at least 2 samples")
    return PathFamily(path)


def augment_time(path: Path) -> Path:
    """Prepend the time channel: (t, X_t)."""
    return Path(path.grid, np.hstack([path.grid[:, None], path.values]))


def augment_time_power(path: Path, alpha: float) -> Path:
    """Insert a ``t**alpha`` channel right after the time channel.

    The input must already be time-augmented; channel order of the result is
    (t, t**alpha, original channels...).
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.array_equal(path.values[:, 0], path.grid):
        raise InvalidInputError("augment_time_power expects a time-augmented path (channel 0 == t)")
    if path.grid[0] < 0:
        raise InvalidInputError("time-power channel needs non-negative times")
    tp = np.power(path.grid, alpha)
    v = np.hstack([path.values[:, :1], tp[:, None], path.values[:, 1:]])
    return Path(path.grid, v)
