"""Nonlinear kernel collocation: residual, loss, L-BFGS and block Newton.

The ansatz sits on the highest derivative as in Method I. Lower derivatives
``u^(r) = p_{m-r-1} + K^(m-r) alpha`` feed a nodewise nonlinear term.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import line_search

from .kernel import GramStack
from .linear_solver import (
    LinearODESpec,
    SolverFit,
    _block_matrix,
    reduced_forcing,
    solve_fit,
    taylor_poly,
    _forcing_array,
    predict,
)
from .path_core import InvalidInputError


class NumericError(ArithmeticError):
    pass


class NewtonError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


def _sin(x):
    # torch tensors carry their own sin; keeps evaluators usable on the gradient tape
    return x.sin() if hasattr(x, "sin") else np.sin(x)


def _const_like(x, c):
    return c if isinstance(x, np.ndarray) else x.new_tensor(c)


@dataclass(frozen=True)
class NonlinearODESpec:
    """``sum_r A_r u^(r) + N(u, ..., u^(m-1)) = f``.

    ``evaluator(U)`` receives the list ``[u, u', ..., u^(m-1)]`` of (n, d)
    node arrays and returns (n, d). ``jacobians[r](U)`` returns the (n, d, d)
    partial derivative in argument ``r``; ``None`` entries mean the term does
    not depend on that argument, a missing list means finite differences.
    ``linear_only`` marks a term that vanishes identically, so fits can use
    the closed-form linear solve.
    """

    linear: LinearODESpec
    evaluator: Callable
    jacobians: Sequence | None = None
    name: str = "custom"
    linear_only: bool = False

    @property
    def order(self) -> int:
        return self.linear.order

    @property
    def dim(self) -> int:
        return self.linear.dim

    @classmethod
    def duffing(cls, k0: float, k1: float, gamma: float, a: float, b: float):
        """u'' + k1 u' + k0 u + gamma u^3 = f with u(0) = a, u'(0) = b."""
        lin = LinearODESpec([k0, k1, 1.0], [[a], [b]])

        def ev(U):
            return gamma * U[0] ** 3

        def jac0(U):
            return (3.0 * gamma * U[0] ** 2)[:, :, None]

        return cls(lin, ev, [jac0, None], name="duffing", linear_only=gamma == 0.0)

    @classmethod
    def kuramoto(cls, omega, coupling: float, theta0):
        """theta' - omega - (K/n) sum_j sin(theta_j - theta_i) = eta."""
        omega = np.asarray(omega, dtype=np.float64)
        n = omega.shape[0]
        lin = LinearODESpec([np.zeros((n, n)), np.eye(n)], np.atleast_2d(theta0))

        def ev(U):
            th = U[0]
            omega_c = _const_like(th, omega)
            return -omega_c - coupling / n * _sin(th[:, None, :] - th[:, :, None]).sum(-1)

        def jac0(U):
            th = U[0]
            c = np.cos(th[:, None, :] - th[:, :, None])  # c[., i, j] = cos(th_j - th_i)
            J = -coupling / n * c
            diag = coupling / n * (c.sum(axis=-1) - 1.0)
            idx = np.arange(n)
            J[:, idx, idx] = diag
            return J

        return cls(lin, ev, [jac0], name="kuramoto")


@dataclass(frozen=True)
class NonlinearSystem:
    """Assembled collocation data for one window."""

    spec: NonlinearODESpec
    stack: GramStack
    forcing: np.ndarray
    L: np.ndarray
    Ft: np.ndarray
    taylor: tuple  # taylor[r] = p_{m-r-1} at nodes, r = 0..m-1

    @property
    def n(self) -> int:
        return len(self.stack.grid)


def assemble_nonlinear(spec: NonlinearODESpec, stack: GramStack, forcing) -> NonlinearSystem:
    grid = stack.grid
    f = _forcing_array(forcing, len(grid))
    A = spec.linear.coefficient_nodes(grid, f)
    L = _block_matrix(A, stack)
    Ft = reduced_forcing(A, spec.linear.g, grid, f).ravel()
    m = spec.order
    taylor = tuple(taylor_poly(spec.linear.g, m, m - r, grid, grid[0]) for r in range(m))
    return NonlinearSystem(spec, stack, f, L, Ft, taylor)


def reconstructions(alpha, system: NonlinearSystem) -> list[np.ndarray]:
    """[u, u', ..., u^(m-1)] at the nodes, each (n, d)."""
    m, d = system.spec.order, system.spec.dim
    a = np.asarray(alpha).reshape(-1, d)
    return [system.taylor[r] + system.stack.level(m - r) @ a for r in range(m)]


def _eval_nl(U, spec: NonlinearODESpec) -> np.ndarray:
    out = np.asarray(spec.evaluator(U), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0][0])
        raise NumericError(f"nonlinear term is not finite at node {bad}")
    return out


def _nl_jacobians(U, spec: NonlinearODESpec) -> list:
    if spec.jacobians is not None:
        return [None if j is None else np.asarray(j(U), dtype=np.float64) for j in spec.jacobians]
    # nodewise central differences, one column at a time for all nodes at once
    out = []
    n, d = U[0].shape
    for r in range(len(U)):
        J = np.empty((n, d, d))
        for c in range(d):
            h = 1e-6 * np.maximum(1.0, np.abs(U[r][:, c]))
            Up = [u.copy() for u in U]
            Um = [u.copy() for u in U]
            Up[r][:, c] += h
            Um[r][:, c] -= h
            J[:, :, c] = (_eval_nl(Up, spec) - _eval_nl(Um, spec)) / (2 * h[:, None])
        out.append(J)
    return out


def residual(alpha, system: NonlinearSystem) -> np.ndarray:
    """R = L alpha + Phi_nl(reconstructions) - F_tilde."""
    alpha = np.asarray(alpha, dtype=np.float64)
    U = reconstructions(alpha, system)
    R = system.L @ alpha + _eval_nl(U, system.spec).ravel() - system.Ft
    return R


def jacobian(alpha, system: NonlinearSystem) -> np.ndarray:
    """Dense dR/dalpha (small problems and tests)."""
    m, d, n = system.spec.order, system.spec.dim, system.n
    U = reconstructions(alpha, system)
    J = system.L.copy().reshape(n, d, n, d)
    for r, Jr in enumerate(_nl_jacobians(U, system.spec)):
        if Jr is not None:
            J += np.einsum("jab,ji->jaib", Jr, system.stack.level(m - r))
    return J.reshape(n * d, n * d)


def loss_and_grad(alpha, system: NonlinearSystem, ridge: float = 0.0):
    """||R||^2/(N+1) + ridge ||alpha||^2 and its gradient."""
    alpha = np.asarray(alpha, dtype=np.float64)
    m, d, n = system.spec.order, system.spec.dim, system.n
    U = reconstructions(alpha, system)
    R = system.L @ alpha + _eval_nl(U, system.spec).ravel() - system.Ft
    JtR = system.L.T @ R
    Rb = R.reshape(n, d)
    for r, Jr in enumerate(_nl_jacobians(U, system.spec)):
        if Jr is not None:
            JtR += (system.stack.level(m - r).T @ np.einsum("jab,ja->jb", Jr, Rb)).ravel()
    loss = float(R @ R) / n + ridge * float(alpha @ alpha)
    grad = 2.0 / n * JtR + 2.0 * ridge * alpha
    return loss, grad


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 10
    max_iter: int = 500
    gtol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    ridge: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise InvalidInputError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.history < 1 or self.max_iter < 0:
            raise InvalidInputError("history must be >= 1 and max_iter >= 0")


@dataclass
class LbfgsResult:
    x: np.ndarray
    loss: float
    grad_inf: float
    n_iter: int
    converged: bool
    degraded: bool
    history: list = field(default_factory=list)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _backtrack(fun, x, f, g, p, c1, max_halvings=40):
    slope = g @ p
    step = 1.0
    for _ in range(max_halvings):
        fn, gn = fun(x + step * p)
        if np.isfinite(fn) and fn <= f + c1 * step * slope:
            return step, fn, gn
        step *= 0.5
    return None, None, None


def lbfgs_minimize(fun: Callable, x0, config: LbfgsConfig = LbfgsConfig()) -> LbfgsResult:
    """Limited-memory BFGS with a strong Wolfe line search.

    ``fun(x)`` returns ``(loss, grad)``. Accepted steps never increase the loss;
    when no acceptable step exists the best iterate is returned with
    ``degraded=True``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericError("loss is not finite at the initial iterate")
    cache = {}

    def fval(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z)
        return cache[key][0]

    def gval(z):
        fval(z)
        return cache[z.tobytes()][1]

    s_hist, y_hist = [], []
    hist = [f]
    f_old = None
    degraded = False
    it = 0
    while it < config.max_iter:
        if np.max(np.abs(g)) <= config.gtol * (1.0 + abs(f)):
            return LbfgsResult(x, f, float(np.max(np.abs(g))), it, True, False, hist)
        p = _two_loop(g, s_hist, y_hist)
        if not g @ p < 0:
            s_hist.clear(), y_hist.clear()
            p = -g
        with warnings.catch_warnings():
            # a failed Wolfe search is handled below by backtracking
            warnings.filterwarnings("ignore", message=r"(?s).*line search")
            res = line_search(fval, gval, x, p, gfk=g, old_fval=f, old_old_fval=f_old,
                              c1=config.c1, c2=config.c2, maxiter=30)
        step = res[0]
        if step is not None:
            fn = fval(x + step * p)
            gn = gval(x + step * p)
        if step is None or not (np.isfinite(fn) and fn <= f):
            step, fn, gn = _backtrack(fun, x, f, g, p, config.c1)
            if step is None and s_hist:
                s_hist.clear(), y_hist.clear()
                p = -g
                step, fn, gn = _backtrack(fun, x, f, g, p, config.c1)
            if step is None:
                degraded = True
                break
        it += 1
        s = step * p
        y = gn - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > config.history:
                s_hist.pop(0), y_hist.pop(0)
        x = x + s
        f_old, f, g = f, fn, gn
        hist.append(f)
    ginf = float(np.max(np.abs(g)))
    return LbfgsResult(x, f, ginf, it, ginf <= config.gtol * (1.0 + abs(f)), degraded, hist)


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    n_iter: int
    residual_norm: float


def newton_block(g_fun: Callable, g_jac: Callable, x0, tol: float = 1e-12,
                 max_iter: int = 20) -> NewtonResult:
    """Newton's method for a small system g(x) = 0."""
    x = np.atleast_1d(np.array(x0, dtype=np.float64))
    r = np.atleast_1d(g_fun(x))
    for k in range(max_iter + 1):
        nr = float(np.linalg.norm(r))
        if nr <= tol:
            return NewtonResult(x, k, nr)
        if k == max_iter:
            break
        J = np.atleast_2d(g_jac(x))
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError
            dx = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            raise NewtonError(f"singular Jacobian at Newton iterate {k}", last=x) from None
        x = x - dx
        r = np.atleast_1d(g_fun(x))
        if not np.all(np.isfinite(r)):
            raise NewtonError(f"Newton iterate {k + 1} is not finite", last=x)
        if np.linalg.norm(dx) <= 4 * np.finfo(float).eps * (1.0 + np.linalg.norm(x)):
            return NewtonResult(x, k + 1, float(np.linalg.norm(r)))
    raise NewtonError(f"Newton did not reach |g| <= {tol:g} in {max_iter} iterations "
                      f"(last |g| = {float(np.linalg.norm(r)):.3e})", last=x)


@dataclass(frozen=True)
class NonlinearFit(SolverFit):
    nl_spec: NonlinearODESpec | None = None
    loss: float = 0.0
    n_iter: int = 0
    converged: bool = False
    degraded: bool = False
    loss_history: tuple = ()


def fit_nonlinear(spec: NonlinearODESpec, stack: GramStack, forcing,
                  config: LbfgsConfig = LbfgsConfig(), alpha0=None) -> NonlinearFit:
    """L-BFGS fit, warm-started from the linear-part solution unless ``alpha0`` is given.

    A spec flagged ``linear_only`` returns the linear least-squares solution as is.
    """
    system = assemble_nonlinear(spec, stack, forcing)
    if alpha0 is None or spec.linear_only:
        # loss-scale ridge r matches n * r on the plain sum of squares
        alpha0 = solve_fit(spec.linear, stack, system.forcing, "I", ridge=config.ridge * system.n).alpha
    fun = lambda a: loss_and_grad(a, system, config.ridge)  # noqa: E731
    if spec.linear_only:
        f0, g0 = fun(alpha0)
        res = LbfgsResult(np.asarray(alpha0), f0, float(np.max(np.abs(g0))), 0, True, False, [f0])
    else:
        res = lbfgs_minimize(fun, alpha0, config)
    R = residual(res.x, system)
    return NonlinearFit(res.x, stack, spec.linear, "I", system.forcing, 0.0, config.ridge,
                        float(np.linalg.norm(R)), 0, spec, res.loss, res.n_iter,
                        res.converged, res.degraded, tuple(res.history))


def nonlinear_forcing_reconstruction(fit: NonlinearFit) -> np.ndarray:
    """f_hat = L alpha + Phi_nl + (f - F_tilde), shape (n, d)."""
    system = assemble_nonlinear(fit.nl_spec, fit.stack, fit.forcing)
    R = residual(fit.alpha, system)
    return (R + system.Ft).reshape(-1, fit.spec.dim) + (fit.forcing - system.Ft.reshape(-1, fit.spec.dim))


def predict_nonlinear(fit: NonlinearFit, tau: float):
    """[u, u', ..., u^(m)] at ``tau`` from the integrated-kernel ansatz."""
    return predict(fit, tau)
