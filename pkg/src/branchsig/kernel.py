"""Signature-kernel Gram matrices over count-sampled prefixes.

``K[j, i] = k(f_i, f_j)``: the row index is the collocation (integration)
node, the column index the anchor prefix. Iterated integrals are taken down
each column with the cumulative trapezoid rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.spatial.distance import cdist

from .path_core import InvalidInputError, Path, prefix_index
from .signature import (
    RobustStats,
    SignatureMatrix,
    robust_stats,
    stream_prefix_signatures,
)


@dataclass(frozen=True)
class KernelSpec:
    flavor: str = "rbf"
    sigma: float = 1.0
    depth: int = 3
    normalization: str = "robust"

    def __post_init__(self):
        if self.flavor not in ("linear", "rbf"):
            raise InvalidInputError(f"unknown kernel flavor {self.flavor!r}")
        if self.normalization not in ("none", "robust"):
            raise InvalidInputError(f"unknown normalization {self.normalization!r}")
        if self.flavor == "rbf" and not self.sigma > 0:
            raise InvalidInputError(f"rbf kernel needs sigma > 0, got {self.sigma}")
        if self.depth < 1:
            raise InvalidInputError("signature depth must be >= 1")


def gram(S, spec: KernelSpec) -> np.ndarray:
    """Gram matrix of (already normalised) signature rows."""
    rows = S.rows if isinstance(S, SignatureMatrix) else np.asarray(S, dtype=np.float64)
    if rows.shape[0] == 0:
        raise InvalidInputError("empty signature matrix")
    return cross_gram(rows, rows, spec)


def cross_gram(rows_a: np.ndarray, rows_b: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """``out[p, q] = k(a_p, b_q)``."""
    if spec.flavor == "linear":
        return rows_a @ rows_b.T
    if not spec.sigma > 0:
        raise InvalidInputError(f"rbf kernel needs sigma > 0, got {spec.sigma}")
    d2 = cdist(np.atleast_2d(rows_a), np.atleast_2d(rows_b), "sqeuclidean")
    return np.exp(-d2 / (2.0 * spec.sigma**2))


def pointwise_rbf_gram(values: np.ndarray, sigma: float) -> np.ndarray:
    """Plain RBF kernel between samples (no path information); used as a baseline."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 1:
        values = values.T
    return np.exp(-cdist(values, values, "sqeuclidean") / (2.0 * sigma**2))


def cumtrapz(grid, values) -> np.ndarray:
    """Cumulative trapezoid along axis 0 with a leading zero."""
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != grid.shape[0]:
        raise InvalidInputError(
            f"cumtrapz: grid has {grid.shape[0]} nodes but values has {values.shape[0]}"
        )
    if grid.shape[0] == 1:
        return np.zeros_like(values)
    return cumulative_trapezoid(values, x=grid, axis=0, initial=0.0)


@dataclass(frozen=True)
class GramStack:
    """K together with its k-fold integrals K^(1..m) on the collocation grid."""

    grid: np.ndarray
    levels: tuple
    signatures: SignatureMatrix | None = None
    stats: RobustStats | None = None
    spec: KernelSpec | None = field(default=None, compare=False)

    @property
    def K(self) -> np.ndarray:
        return self.levels[0]

    @property
    def m(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return int(self.grid.shape[0])

    def level(self, k: int) -> np.ndarray:
        if k > self.m:
            raise InvalidInputError(f"gram stack holds levels 0..{self.m}, level {k} requested")
        return self.levels[k]


def integrated_gram_stack(K: np.ndarray, grid, m: int, **extra) -> GramStack:
    grid = np.asarray(grid, dtype=np.float64)
    levels = [np.asarray(K, dtype=np.float64)]
    for _ in range(m):
        levels.append(cumtrapz(grid, levels[-1]))
    return GramStack(grid, tuple(levels), **extra)


def signature_features(path: Path, spec: KernelSpec, stats: RobustStats | None = None):
    """Prefix signature matrix of ``path`` and the normalised rows fed to the kernel."""
    S = stream_prefix_signatures(path, spec.depth)
    if spec.normalization == "robust":
        if stats is None:
            stats = robust_stats(S.rows)
        return S, stats.apply(S.rows), stats
    return S, S.rows, None


def build_gram_stack(path: Path, spec: KernelSpec, m: int) -> GramStack:
    """Count-sample ``path``, build its Gram matrix and integrate it ``m`` times."""
    S, feats, stats = signature_features(path, spec)
    K = gram(feats, spec)
    return integrated_gram_stack(K, path.grid, m, signatures=S, stats=stats, spec=spec)


def query_rows(stack: GramStack, tau: float) -> list[np.ndarray]:
    """Per-level kernel vectors over anchors at query time ``tau`` (floor-node rule)."""
    j = prefix_index(stack.grid, tau)
    return [lvl[j] for lvl in stack.levels]
