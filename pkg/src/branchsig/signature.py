"""Truncated signatures of piecewise-linear paths.

Coefficients are flattened level by level (level 0 first), and within a level
in lexicographic word order, which is numpy's row-major ravel of the
``d x ... x d`` level tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .path_core import InvalidInputError, Path


def sig_length(dim: int, depth: int) -> int:
    return sum(dim**k for k in range(depth + 1))


def level_slices(dim: int, depth: int) -> list[slice]:
    out, start = [], 0
    for k in range(depth + 1):
        out.append(slice(start, start + dim**k))
        start += dim**k
    return out


@dataclass(frozen=True)
class TruncatedSignature:
    coeffs: np.ndarray
    dim: int
    depth: int

    def __post_init__(self):
        if self.coeffs.shape != (sig_length(self.dim, self.depth),):
            raise InvalidInputError(
                f"expected {sig_length(self.dim, self.depth)} coefficients, got {self.coeffs.shape}"
            )

    def level(self, k: int) -> np.ndarray:
        return self.coeffs[level_slices(self.dim, self.depth)[k]]

    def levels(self) -> list[np.ndarray]:
        return [self.coeffs[s] for s in level_slices(self.dim, self.depth)]

    @classmethod
    def from_levels(cls, levels, dim: int) -> "TruncatedSignature":
        return cls(np.concatenate([np.ravel(x) for x in levels]), dim, len(levels) - 1)

    @classmethod
    def identity(cls, dim: int, depth: int) -> "TruncatedSignature":
        c = np.zeros(sig_length(dim, depth))
        c[0] = 1.0
        return cls(c, dim, depth)


@dataclass(frozen=True)
class SignatureMatrix:
    """One flattened truncated signature per prefix; row ``i`` belongs to f_i."""

    rows: np.ndarray
    dim: int
    depth: int

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def row(self, i: int) -> TruncatedSignature:
        return TruncatedSignature(np.array(self.rows[i]), self.dim, self.depth)


def segment_signature(increment, depth: int) -> TruncatedSignature:
    """Tensor exponential of a linear segment: level k is ``increment^{⊗k} / k!``."""
    if depth < 1:
        raise InvalidInputError("depth must be >= 1")
    x = np.atleast_1d(np.asarray(increment, dtype=np.float64))
    levels = [np.ones(1)]
    for k in range(1, depth + 1):
        levels.append(np.multiply.outer(levels[-1], x).ravel() / k)
    return TruncatedSignature.from_levels(levels, x.shape[0])


def chen_concat(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Truncated tensor product ``a ⊗ b`` (signature of the concatenated path)."""
    if a.dim != b.dim or a.depth != b.depth:
        raise InvalidInputError(
            f"cannot concatenate signatures of (dim, depth) {(a.dim, a.depth)} and {(b.dim, b.depth)}"
        )
    la, lb = a.levels(), b.levels()
    out = []
    for n in range(a.depth + 1):
        acc = np.zeros(a.dim**n)
        for i in range(n + 1):
            acc += np.multiply.outer(la[i], lb[n - i]).ravel()
        out.append(acc)
    return TruncatedSignature.from_levels(out, a.dim)


def signature_by_fold(values, depth: int) -> TruncatedSignature:
    """Signature of a sampled path by folding Chen products over its segments."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    sig = TruncatedSignature.identity(values.shape[1], depth)
    for inc in np.diff(values, axis=0):
        sig = chen_concat(sig, segment_signature(inc, depth))
    return sig


def _increment_powers(delta: np.ndarray, depth: int) -> list[np.ndarray]:
    # P[r][j] = delta_j^{⊗r} / r!
    n = delta.shape[0]
    P = [np.ones((n, 1))]
    for r in range(1, depth + 1):
        P.append((P[-1][:, :, None] * delta[:, None, :]).reshape(n, -1) / r)
    return P


def prefix_signature_rows(values, depth: int) -> np.ndarray:
    """Signatures of every prefix of ``values`` via the Chen recurrence.

    Row ``j`` is the signature of samples ``0..j``; row 0 is the trivial
    signature. Each level is a running sum of one Chen increment per segment,
    so the whole matrix costs O(N d^M).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n, d = values.shape
    if depth < 1:
        raise InvalidInputError("depth must be >= 1")
    delta = np.diff(values, axis=0)
    P = _increment_powers(delta, depth)
    levels = [np.ones((n, 1))]
    for k in range(1, depth + 1):
        incr = P[k].copy()
        for i in range(1, k):
            incr += (levels[i][:-1, :, None] * P[k - i][:, None, :]).reshape(n - 1, -1)
        lev = np.zeros((n, d**k))
        np.cumsum(incr, axis=0, out=lev[1:])
        levels.append(lev)
    return np.hstack(levels)


def path_signature(path: Path | np.ndarray, depth: int) -> TruncatedSignature:
    values = path.values if isinstance(path, Path) else np.asarray(path, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    rows = prefix_signature_rows(values, depth)
    return TruncatedSignature(rows[-1].copy(), values.shape[1], depth)


def stream_prefix_signatures(path: Path, depth: int) -> SignatureMatrix:
    """Signature matrix of the count-sampled family of ``path``."""
    if len(path) < 2:
        raise InvalidInputError("need at least 2 samples to stream prefix signatures")
    return SignatureMatrix(prefix_signature_rows(path.values, depth), path.dim, depth)


def extend_signature_row(row: np.ndarray, increment, dim: int, depth: int) -> np.ndarray:
    """One Chen step: signature of a prefix extended by one linear segment."""
    sl = level_slices(dim, depth)
    x = np.asarray(increment, dtype=np.float64).ravel()
    P = [np.ones(1)]
    for r in range(1, depth + 1):
        P.append(np.multiply.outer(P[-1], x).ravel() / r)
    out = np.empty_like(row)
    out[0] = row[0]
    for k in range(1, depth + 1):
        acc = P[k].copy()
        for i in range(1, k):
            acc += np.multiply.outer(row[sl[i]], P[k - i]).ravel()
        # same summation order as prefix_signature_rows: previous value + increment
        out[sl[k]] = row[sl[k]] + acc
    return out


@dataclass(frozen=True)
class RobustStats:
    median: np.ndarray
    scale: np.ndarray

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.median) / self.scale


IQR_EPS = 1e-12


def robust_stats(rows: np.ndarray) -> RobustStats:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        raise InvalidInputError("robust normalisation needs at least 2 rows")
    med = np.median(rows, axis=0)
    q25, q75 = np.percentile(rows, [25.0, 75.0], axis=0, method="linear")
    iqr = q75 - q25
    scale = np.where(iqr < IQR_EPS, 1.0, iqr)
    return RobustStats(med, scale)


def robust_normalize(S: SignatureMatrix) -> SignatureMatrix:
    """Column-wise (x - median) / IQR; near-constant columns are only centred."""
    rows = robust_stats(S.rows).apply(S.rows)
    return SignatureMatrix(rows, S.dim, S.depth)


def shuffle_residual(sig: TruncatedSignature) -> float:
    """max over letter pairs of |S^i S^j - S^{ij} - S^{ji}|."""
    if sig.depth < 2:
        raise InvalidInputError("shuffle residual needs depth >= 2")
    s1 = sig.level(1)
    s2 = sig.level(2).reshape(sig.dim, sig.dim)
    return float(np.max(np.abs(np.outer(s1, s1) - s2 - s2.T)))
