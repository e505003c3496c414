"""Kernel collocation for linear ODE systems driven by one observed forcing path.

Method I places the kernel ansatz on the highest derivative ``u^(m)`` and
recovers lower derivatives by integrating the kernel. Method II integrates the
ODE m times (Volterra form) and places the ansatz on ``u`` itself. Both share
the block matrix ``L[j, i] = sum_r A_r(t_j) K^(m-r)[j, i]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .kernel import GramStack, cumtrapz
from .path_core import InvalidInputError, prefix_index


class ConditioningError(RuntimeError):
    pass


class ExtrapolationError(ValueError):
    pass


CoefFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LinearODESpec:
    """``sum_r A_r u^(r) = f`` with ``u^(p)(t_0) = g_p``.

    ``coeffs[r]`` is either a constant (scalar or ``d x d``) or a callable
    ``(grid, forcing) -> array`` giving node values of shape (n,), (n, d, d).
    ``g`` has shape (m, d).
    """

    coeffs: Sequence
    g: np.ndarray
    cond_limit: float = 1e12

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g, dtype=np.float64))
        if g.shape[0] != self.order:
            if g.shape[1] == self.order and g.shape[0] == 1:
                g = g.T
            else:
                raise InvalidInputError(f"need {self.order} initial values, got array {g.shape}")
        object.__setattr__(self, "g", g)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @property
    def dim(self) -> int:
        return int(np.atleast_2d(self.g).shape[1])

    def coefficient_nodes(self, grid, forcing) -> np.ndarray:
        """Node values of every A_r, shape (m+1, n, d, d)."""
        grid = np.asarray(grid, dtype=np.float64)
        n, d = grid.shape[0], self.dim
        out = np.empty((self.order + 1, n, d, d))
        for r, c in enumerate(self.coeffs):
            if callable(c):
                v = np.asarray(c(grid, forcing), dtype=np.float64)
                if v.ndim == 1:
                    v = v[:, None, None] * np.eye(d)
                out[r] = v.reshape(n, d, d)
            else:
                v = np.asarray(c, dtype=np.float64)
                if v.ndim == 0:
                    v = v * np.eye(d)
                out[r] = np.broadcast_to(v.reshape(d, d), (n, d, d))
        top = out[self.order]
        if d == 1:
            bad = np.abs(top[:, 0, 0]) < 1.0 / self.cond_limit
        else:
            bad = np.linalg.cond(top) > self.cond_limit
        if np.any(bad):
            raise InvalidInputError(
                f"leading coefficient A_m is singular at node {int(np.argmax(bad))}"
            )
        return out


def taylor_poly(g, m: int, k: int, t, t0: float = 0.0) -> np.ndarray:
    """p_{k-1}(t) = sum_{l<k} (t-t0)^l / l! * g_{m-k+l};  k = 0 gives zero."""
    if k > m or k < 0:
        raise InvalidInputError(f"taylor_poly needs 0 <= k <= m, got k={k}, m={m}")
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(t.shape + (g.shape[1],))
    s = t - t0
    for l in range(k):
        out += (s[..., None] ** l) / factorial(l) * g[m - k + l]
    return out


def q_poly(coef_nodes: np.ndarray, g, t, t0: float = 0.0) -> np.ndarray:
    """Initial-data polynomial of the Volterra form, evaluated at nodes ``t``.

    ``coef_nodes`` has shape (m+1, n, d, d) matching ``t`` of length n.
    """
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    m = coef_nodes.shape[0] - 1
    s = np.asarray(t, dtype=np.float64) - t0
    out = np.zeros((s.shape[0], g.shape[1]))
    for r in range(1, m + 1):
        inner = np.zeros_like(out)
        for l in range(r):
            p = m - r + l
            inner += (s[:, None] ** p) / factorial(p) * g[l]
        out += np.einsum("nab,nb->na", coef_nodes[r], inner)
    return out


def _block_matrix(coef_nodes: np.ndarray, stack: GramStack) -> np.ndarray:
    m = coef_nodes.shape[0] - 1
    n, d = coef_nodes.shape[1], coef_nodes.shape[2]
    if stack.m < m:
        raise InvalidInputError(f"gram stack has levels 0..{stack.m}; order {m} needs 0..{m}")
    L = np.zeros((n, d, n, d))
    for r in range(m + 1):
        L += np.einsum("jab,ji->jaib", coef_nodes[r], stack.level(m - r)[:n, :n])
    return L.reshape(n * d, n * d)


def _forcing_array(forcing, n: int) -> np.ndarray:
    f = np.asarray(forcing, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != n:
        raise InvalidInputError(f"forcing has {f.shape[0]} samples, grid has {n}")
    return f


def reduced_forcing(coef_nodes, g, grid, forcing) -> np.ndarray:
    """f(t_j) - sum_{r<m} A_r(t_j) p_{m-r-1}(t_j), shape (n, d)."""
    m = coef_nodes.shape[0] - 1
    grid = np.asarray(grid, dtype=np.float64)
    ft = _forcing_array(forcing, grid.shape[0]).copy()
    for r in range(m):
        p = taylor_poly(g, m, m - r, grid, grid[0])
        ft -= np.einsum("nab,nb->na", coef_nodes[r], p)
    return ft


def assemble_method1(spec: LinearODESpec, stack: GramStack, forcing):
    """Return (L, F_tilde, B) for the ansatz on u^(m)."""
    grid = stack.grid
    f = _forcing_array(forcing, len(grid))
    A = spec.coefficient_nodes(grid, f)
    L = _block_matrix(A, stack)
    Ft = reduced_forcing(A, spec.g, grid, f).ravel()
    m, d, n = spec.order, spec.dim, len(grid)
    B = np.zeros((m * d, n * d))
    eye = np.eye(d)
    for p in range(m):
        row0 = stack.level(m - p)[0, :n]
        B[p * d : (p + 1) * d] = np.kron(row0[None, :], eye)
    return L, Ft, B


def integrated_forcing(grid, forcing, m: int) -> np.ndarray:
    out = np.asarray(forcing, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    for _ in range(m):
        out = cumtrapz(grid, out)
    return out


def assemble_method2(spec: LinearODESpec, stack: GramStack, forcing):
    """Return (L, F_II) for the Volterra form with the ansatz on u."""
    grid = stack.grid
    f = _forcing_array(forcing, len(grid))
    A = spec.coefficient_nodes(grid, f)
    L = _block_matrix(A, stack)
    rhs = integrated_forcing(grid, f, spec.order) + q_poly(A, spec.g, grid, grid[0])
    return L, rhs.ravel()


@dataclass(frozen=True)
class LstsqResult:
    alpha: np.ndarray
    residual_norm: float
    rank: int
    route: str


SQRT_EPS_COND = 1.0 / np.sqrt(np.finfo(float).eps)


def solve_lstsq(L, Ft, B=None, gB=None, lam_B: float = 0.0, ridge: float = 0.0,
                *, on_singular: str = "lstsq", rcond: float | None = None) -> LstsqResult:
    """argmin ||L a - F||^2 + lam_B ||B a - gB||^2 + ridge ||a||^2."""
    L = np.asarray(L, dtype=np.float64)
    Ft = np.asarray(Ft, dtype=np.float64)
    if L.shape[0] != Ft.shape[0]:
        raise InvalidInputError(f"L has {L.shape[0]} rows but rhs has {Ft.shape[0]}")
    blocks, rhs = [L], [Ft]
    if B is not None and lam_B > 0 and B.size:
        blocks.append(np.sqrt(lam_B) * B)
        rhs.append(np.sqrt(lam_B) * (np.zeros(B.shape[0]) if gB is None else np.ravel(gB)))
    if ridge > 0:
        blocks.append(np.sqrt(ridge) * np.eye(L.shape[1]))
        rhs.append(np.zeros(L.shape[1]))
    A = np.vstack(blocks) if len(blocks) > 1 else L
    b = np.concatenate(rhs) if len(rhs) > 1 else Ft
    if not np.any(b):
        return LstsqResult(np.zeros(A.shape[1]), 0.0, A.shape[1], "zero-rhs")
    if A.shape[0] == A.shape[1]:
        cond = np.linalg.cond(A)
        if cond < SQRT_EPS_COND:
            x = scipy.linalg.solve(A, b)
            return LstsqResult(x, float(np.linalg.norm(L @ x - Ft)), A.shape[1], "direct")
    x, _, rank, sv = scipy.linalg.lstsq(A, b, cond=rcond, lapack_driver="gelsd")
    if rank < A.shape[1] and ridge == 0 and on_singular == "raise":
        raise ConditioningError(
            f"collocation system is singular to tolerance (rank {rank} of {A.shape[1]}); "
            "set a positive ridge to regularise"
        )
    return LstsqResult(x, float(np.linalg.norm(L @ x - Ft)), int(rank), "lstsq")


@dataclass(frozen=True)
class SolverFit:
    alpha: np.ndarray
    stack: GramStack
    spec: LinearODESpec
    method: str
    forcing: np.ndarray
    lam_B: float = 0.0
    ridge: float = 0.0
    residual_norm: float = 0.0
    rank: int = 0

    @property
    def grid(self) -> np.ndarray:
        return self.stack.grid

    @property
    def alpha_blocks(self) -> np.ndarray:
        return self.alpha.reshape(len(self.grid), self.spec.dim)


def solve_fit(spec: LinearODESpec, stack: GramStack, forcing, method: str = "I", *,
              lam_B: float = 0.0, ridge: float = 0.0, on_singular: str = "lstsq") -> SolverFit:
    """Assemble and solve the collocation system for ``method`` in {"I", "II"}."""
    f = _forcing_array(forcing, len(stack.grid))
    if method == "I":
        L, Ft, B = assemble_method1(spec, stack, f)
    elif method == "II":
        (L, Ft), B = assemble_method2(spec, stack, f), None
    else:
        raise InvalidInputError(f"method must be 'I' or 'II', got {method!r}")
    res = solve_lstsq(L, Ft, B, None, lam_B, ridge, on_singular=on_singular)
    return SolverFit(res.alpha, stack, spec, method, f, lam_B, ridge, res.residual_norm, res.rank)


def _coef_nodes(fit: SolverFit) -> np.ndarray:
    return fit.spec.coefficient_nodes(fit.grid, fit.forcing)


def node_derivatives(fit: SolverFit) -> list[np.ndarray]:
    """Method I reconstructions u^(p) at every node, p = 0..m (each (n, d))."""
    if fit.method != "I":
        raise InvalidInputError("derivative reconstructions need a Method I fit")
    m, grid = fit.spec.order, fit.grid
    a = fit.alpha_blocks
    out = [None] * (m + 1)
    for k in range(m + 1):
        out[m - k] = fit.stack.level(k) @ a + taylor_poly(fit.spec.g, m, k, grid, grid[0])
    return out


def node_solution(fit: SolverFit) -> np.ndarray:
    if fit.method == "I":
        return node_derivatives(fit)[0]
    return fit.stack.K @ fit.alpha_blocks


def forcing_reconstruction(fit: SolverFit) -> np.ndarray:
    """Fitted forcing (Method I) or fitted m-fold integrated forcing (Method II)."""
    A = _coef_nodes(fit)
    La = (_block_matrix(A, fit.stack) @ fit.alpha).reshape(-1, fit.spec.dim)
    grid = fit.grid
    if fit.method == "I":
        return La + (fit.forcing - reduced_forcing(A, fit.spec.g, grid, fit.forcing))
    return La - q_poly(A, fit.spec.g, grid, grid[0])


def predict(fit: SolverFit, tau: float):
    """Solution (and, for Method I, derivatives u^(0..m)) at query time ``tau``.

    Returns a list ``[u, u', ..., u^(m)]`` for Method I and ``[u]`` for Method II.
    """
    grid = fit.grid
    if tau < grid[0] or tau > grid[-1]:
        raise ExtrapolationError(f"query {tau} outside the fitted window [{grid[0]}, {grid[-1]}]")
    j = prefix_index(grid, tau)
    a = fit.alpha_blocks
    if fit.method == "II":
        return [fit.stack.K[j] @ a]
    m = fit.spec.order
    out = [None] * (m + 1)
    for k in range(m + 1):
        out[m - k] = fit.stack.level(k)[j] @ a + taylor_poly(fit.spec.g, m, k, tau, grid[0])
    return out


def relative_mse(pred, ref) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    den = float(np.sum(ref**2))
    num = float(np.sum((pred - ref) ** 2))
    return num / den if den > 0 else num
