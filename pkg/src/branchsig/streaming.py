"""Test/train/retrain streaming protocol.

An initial batch fit on the first ``n0 + 1`` samples is followed by one
frozen-coefficient update per new sample. Every ``kappa``-th step instead
refits the sliding window of the last ``n0 + 1`` samples, re-anchoring the
count-sampled prefixes at the window start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import GramStack, KernelSpec, build_gram_stack, cross_gram, cumtrapz
from .linear_solver import (
    LinearODESpec,
    SolverFit,
    _block_matrix,
    q_poly,
    reduced_forcing,
    solve_fit,
    taylor_poly,
)
from .nonlinear_solver import (
    LbfgsConfig,
    NewtonError,
    NonlinearODESpec,
    _eval_nl,
    _nl_jacobians,
    fit_nonlinear,
    newton_block,
)
from .path_core import InvalidInputError, Path
from .signature import extend_signature_row


class DegenerateStepError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    n0: int
    kappa: float = 10
    method: str = "I"
    ridge: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)

    def __post_init__(self):
        if not self.kappa >= 1:
            raise InvalidInputError(f"cadence kappa must be >= 1, got {self.kappa}")
        if self.method not in ("I", "II"):
            raise InvalidInputError(f"method must be 'I' or 'II', got {self.method!r}")


class _Buffer:
    """Row/column-growable square and tall arrays with doubling capacity."""

    def __init__(self, shape_tail, cap, square=False):
        self.square = square
        self.tail = tuple(shape_tail)
        self.n = 0
        shape = (cap, cap) if square else (cap,) + self.tail
        self.data = np.zeros(shape)

    def _grow(self, need):
        cap = self.data.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap)
        shape = (new, new) if self.square else (new,) + self.tail
        d = np.zeros(shape)
        if self.square:
            d[: self.n, : self.n] = self.data[: self.n, : self.n]
        else:
            d[: self.n] = self.data[: self.n]
        self.data = d

    def view(self):
        return self.data[: self.n, : self.n] if self.square else self.data[: self.n]

    def set(self, arr):
        arr = np.asarray(arr)
        self.n = 0
        self._grow(arr.shape[0])
        self.n = arr.shape[0]
        if self.square:
            self.data[: self.n, : self.n] = arr
        else:
            self.data[: self.n] = arr

    def append(self):
        self._grow(self.n + 1)
        self.n += 1


def _is_nonlinear(spec) -> bool:
    return isinstance(spec, NonlinearODESpec)


def _linear_part(spec) -> LinearODESpec:
    return spec.linear if _is_nonlinear(spec) else spec


def _with_fixed_coeffs(spec, A_window: np.ndarray, g) -> object:
    """Copy of ``spec`` whose coefficients are the given node values on a window."""
    lin = _linear_part(spec)
    coeffs = [(lambda grid, forcing, Ar=Ar: Ar) for Ar in A_window]
    new_lin = LinearODESpec(coeffs, g, lin.cond_limit)
    return replace(spec, linear=new_lin) if _is_nonlinear(spec) else new_lin


@dataclass
class StepRecord:
    t: float
    u: np.ndarray
    f_hat: np.ndarray
    kind: str  # init | online | retrain | fallback
    newton_iters: int = 0
    row_residual: float = 0.0
    f_target: np.ndarray | None = None  # what f_hat estimates: f (Method I) or I^m f in the window frame


class StreamState:
    """Single-owner mutable state of the streaming protocol."""

    def __init__(self, spec, kspec: KernelSpec, config: StreamConfig):
        self.spec = spec
        self.kspec = kspec
        self.config = config
        self.m = _linear_part(spec).order
        self.d = _linear_part(spec).dim
        self.grid: list[float] = []
        self.values: list[np.ndarray] = []
        self.forcing: list[np.ndarray] = []
        self.anchor = 0
        self.g = np.array(_linear_part(spec).g)
        self.stats = None
        self.since_retrain = 0
        self.force_retrain = False
        self.fit: SolverFit | None = None

    # history helpers
    @property
    def n_seen(self) -> int:
        return len(self.grid)

    @property
    def window_size(self) -> int:
        return self.alpha.n

    def _history(self):
        return np.asarray(self.grid), np.asarray(self.values), np.asarray(self.forcing)

    def _coef_nodes_history(self) -> np.ndarray:
        grid, _, f = self._history()
        return _linear_part(self.spec).coefficient_nodes(grid, f)

    def window_grid(self) -> np.ndarray:
        return np.asarray(self.grid[self.anchor : self.anchor + self.alpha.n])

    def window_alpha(self) -> np.ndarray:
        return self.alpha.view().copy()

    def window_stack(self) -> GramStack:
        return GramStack(self.window_grid(), tuple(b.view().copy() for b in self.levels))

    def _load_window(self, stack: GramStack, alpha: np.ndarray, sig_rows: np.ndarray, feats):
        n = len(stack)
        cap = n + (int(self.config.kappa) if math.isfinite(self.config.kappa) else n) + 1
        self.levels = [_Buffer((), cap, square=True) for _ in range(self.m + 1)]
        for b, lvl in zip(self.levels, stack.levels):
            b.set(lvl)
        self.sig = _Buffer((sig_rows.shape[1],), cap)
        self.sig.set(sig_rows)
        self.feats = _Buffer((feats.shape[1],), cap)
        self.feats.set(feats)
        self.alpha = _Buffer((self.d,), cap)
        self.alpha.set(alpha.reshape(n, self.d))
        if self.config.method == "II":
            f = np.asarray(self.forcing[self.anchor :])
            self.fint = [_Buffer((self.d,), cap) for _ in range(self.m + 1)]
            self.fint[0].set(f)
            for k in range(1, self.m + 1):
                self.fint[k].set(cumtrapz(stack.grid, self.fint[k - 1].view()))

    def _batch_fit(self):
        grid, vals, f = self._history()
        sl = slice(self.anchor, None)
        path = Path(grid[sl], vals[sl])
        stack = build_gram_stack(path, self.kspec, self.m)
        A = self._coef_nodes_history()[:, sl]
        spec_w = _with_fixed_coeffs(self.spec, A, self.g)
        if _is_nonlinear(spec_w):
            if self.config.method != "I":
                raise InvalidInputError("nonlinear streaming uses Method I")
            cfg = replace(self.config.lbfgs, ridge=self.config.ridge)
            fit = fit_nonlinear(spec_w, stack, f[sl], cfg)
        else:
            fit = solve_fit(spec_w, stack, f[sl], self.config.method, ridge=self.config.ridge)
        self.fit = fit
        self.stats = stack.stats
        feats = stack.stats.apply(stack.signatures.rows) if stack.stats is not None else stack.signatures.rows
        self._load_window(stack, fit.alpha, stack.signatures.rows, feats)
        self.since_retrain = 0
        self.force_retrain = False
        return fit

    # node reconstructions on the current window
    def window_solution(self) -> np.ndarray:
        a = self.alpha.view()
        if self.config.method == "II":
            return self.levels[0].view() @ a
        grid = self.window_grid()
        return self.levels[self.m].view() @ a + taylor_poly(self.g, self.m, self.m, grid, grid[0])

    def window_derivatives(self) -> list[np.ndarray]:
        """u^(p) at window nodes for p = 0..m-1."""
        grid = self.window_grid()
        a = self.alpha.view()
        if self.config.method == "I":
            return [self.levels[self.m - p].view() @ a
                    + taylor_poly(self.g, self.m, self.m - p, grid, grid[0]) for p in range(self.m)]
        out = [self.levels[0].view() @ a]
        for _ in range(1, self.m):
            out.append(np.gradient(out[-1], grid, axis=0))
        return out

    def window_system(self):
        """(L, rhs) of the current window with its anchoring."""
        w = slice(self.anchor, self.anchor + self.alpha.n)
        A = self._coef_nodes_history()[:, w]
        stack = self.window_stack()
        L = _block_matrix(A, stack)
        grid = stack.grid
        f = np.asarray(self.forcing[w])
        if self.config.method == "I":
            rhs = reduced_forcing(A, self.g, grid, f)
        else:
            rhs = self.fint[self.m].view() + q_poly(A, self.g, grid, grid[0])
        return L, rhs.ravel()

    def window_residual(self) -> float:
        L, rhs = self.window_system()
        return float(np.linalg.norm(L @ self.alpha.view().ravel() - rhs))

    # growing the window by one node
    def _extend(self, t, x, f):
        t_prev = self.grid[-1]
        if not t > t_prev:
            raise DegenerateStepError(f"time {t} does not advance past {t_prev}")
        inc = np.asarray(x, dtype=np.float64) - self.values[-1]
        row = extend_signature_row(self.sig.view()[-1], inc, len(inc), self.kspec.depth)
        self.grid.append(float(t))
        self.values.append(np.asarray(x, dtype=np.float64))
        self.forcing.append(np.atleast_1d(np.asarray(f, dtype=np.float64)))
        feat = self.stats.apply(row) if self.stats is not None else row
        self.sig.append()
        self.sig.view()[-1] = row
        self.feats.append()
        self.feats.view()[-1] = feat
        kvec = cross_gram(self.feats.view(), feat[None, :], self.kspec)[:, 0]
        dt = self.grid[-1] - self.grid[-2]
        for b in self.levels:
            b.append()
        n = self.levels[0].n
        self.levels[0].view()[-1, :] = kvec
        self.levels[0].view()[:, -1] = kvec
        dts = np.diff(np.asarray(self.grid[self.anchor :]))
        for k in range(1, self.m + 1):
            prev = self.levels[k - 1].view()
            cur = self.levels[k].view()
            # new row: previous cumulative value plus one trapezoid panel
            cur[-1, : n - 1] = cur[-2, : n - 1] + dt * (prev[-1, : n - 1] + prev[-2, : n - 1]) / 2.0
            # new column: full cumulative trapezoid of the new anchor's column
            col = prev[:, -1]
            c = np.zeros(n)
            np.cumsum(dts * (col[1:] + col[:-1]) / 2.0, out=c[1:])
            cur[:, -1] = c
        self.alpha.append()
        if self.config.method == "II":
            self.fint[0].append()
            self.fint[0].view()[-1] = self.forcing[-1]
            for k in range(1, self.m + 1):
                self.fint[k].append()
                v, p = self.fint[k].view(), self.fint[k - 1].view()
                v[-1] = v[-2] + dt * (p[-1] + p[-2]) / 2.0

    def _new_row(self):
        """Block row Phi_{n+1, .} (n, d, d), reduced target and coefficient nodes at the new node."""
        A = self._coef_nodes_history()[:, -1]  # (m+1, d, d)
        t = self.grid[-1]
        t0 = self.grid[self.anchor]
        Phi = np.zeros((self.levels[0].n, self.d, self.d))
        for r in range(self.m + 1):
            Phi += self.levels[self.m - r].view()[-1][:, None, None] * A[r]
        f = self.forcing[-1]
        if self.config.method == "I":
            target = f.copy()
            for r in range(self.m):
                target -= A[r] @ taylor_poly(self.g, self.m, self.m - r, t, t0)
        else:
            target = self.fint[self.m].view()[-1] + q_poly(A[:, None], self.g, np.array([t]), t0)[0]
        return Phi, target, A

    def _prediction_at_last(self):
        a = self.alpha.view()
        t, t0 = self.grid[-1], self.grid[self.anchor]
        if self.config.method == "II":
            return self.levels[0].view()[-1] @ a
        return self.levels[self.m].view()[-1] @ a + taylor_poly(self.g, self.m, self.m, t, t0)

    def step_linear(self, t, x, f) -> StepRecord:
        self._extend(t, x, f)
        Phi, target, A = self._new_row()
        a = self.alpha.view()
        c = np.einsum("iab,ib->a", Phi[:-1], a[:-1])
        diag = Phi[-1]
        if abs(np.linalg.det(diag)) < 1e-300 or np.linalg.cond(diag) > 1e14:
            raise DegenerateStepError(f"diagonal block is singular at t = {t}")
        a[-1] = np.linalg.solve(diag, target - c)
        res = float(np.max(np.abs(c + diag @ a[-1] - target)))
        return self._record("online", res, Phi, target, 0)

    def step_nonlinear(self, t, x, f) -> StepRecord:
        self._extend(t, x, f)
        Phi, target, A = self._new_row()
        a = self.alpha.view()
        c = np.einsum("iab,ib->a", Phi[:-1], a[:-1])
        diag = Phi[-1]
        lin0 = np.linalg.solve(diag, target - c)
        m, t0 = self.m, self.grid[self.anchor]
        kap = [self.levels[m - r].view()[-1, -1] for r in range(m)]
        uprev = [self.levels[m - r].view()[-1, :-1] @ a[:-1]
                 + taylor_poly(self.g, m, m - r, t, t0) for r in range(m)]
        spec = self.spec

        def gfun(z):
            U = [(uprev[r] + kap[r] * z)[None, :] for r in range(m)]
            return diag @ z + c + _eval_nl(U, spec)[0] - target

        def gjac(z):
            U = [(uprev[r] + kap[r] * z)[None, :] for r in range(m)]
            J = diag.copy()
            for r, Jr in enumerate(_nl_jacobians(U, spec)):
                if Jr is not None:
                    J += kap[r] * Jr[0]
            return J

        try:
            scale = max(1.0, float(np.linalg.norm(target)))
            res = newton_block(gfun, gjac, lin0, self.config.newton_tol * scale,
                               self.config.newton_max_iter)
            a[-1] = res.x
            return self._record("online", float(np.max(np.abs(gfun(res.x)))), Phi, target, res.n_iter)
        except NewtonError:
            a[-1] = lin0
            self.force_retrain = True
            return self._record("fallback", float(np.max(np.abs(gfun(lin0)))), Phi, target, -1)

    def _record(self, kind, res, Phi, target, iters) -> StepRecord:
        a = self.alpha.view()
        u = self._prediction_at_last()
        lin = np.einsum("iab,ib->a", Phi, a)
        if self.config.method == "I":
            f_hat = lin + (self.forcing[-1] - target)
            if _is_nonlinear(self.spec):
                m, t, t0 = self.m, self.grid[-1], self.grid[self.anchor]
                U = [(self.levels[m - r].view()[-1] @ a + taylor_poly(self.g, m, m - r, t, t0))[None, :]
                     for r in range(m)]
                f_hat = f_hat + _eval_nl(U, self.spec)[0]
        else:
            f_hat = lin - (target - self.fint[self.m].view()[-1])
        return StepRecord(self.grid[-1], u, f_hat, kind, iters, res, self._target_last())

    def _target_last(self) -> np.ndarray:
        if self.config.method == "I":
            return np.array(self.forcing[-1], dtype=np.float64)
        return self.fint[self.m].view()[-1].copy()

    def retrain(self) -> SolverFit:
        """Refit on the last ``n0 + 1`` seen nodes, re-anchored at the window start.

        Initial data at the new anchor are the current model's derivatives there.
        """
        n0 = self.config.n0
        start = self.n_seen - 1 - n0
        if start < 0:
            raise InvalidInputError(f"retrain needs {n0 + 1} nodes, only {self.n_seen} seen")
        idx = start - self.anchor
        if idx < 0:
            raise InvalidInputError("window start precedes the current anchoring")
        derivs = self.window_derivatives()
        self.g = np.stack([dv[idx] for dv in derivs])
        self.anchor = start
        return self._batch_fit()


def init_batch(grid, values, forcing, spec, kspec: KernelSpec, config: StreamConfig) -> StreamState:
    """Batch fit on samples ``0..n0``; later samples are fed with :func:`advance`."""
    m = _linear_part(spec).order
    if config.n0 < m + 1:
        raise InvalidInputError(f"initial window n0={config.n0} must be >= m + 1 = {m + 1}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[0] < config.n0 + 1:
        raise InvalidInputError(f"need {config.n0 + 1} samples for the initial batch, got {grid.shape[0]}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    forcing = np.asarray(forcing, dtype=np.float64)
    if forcing.ndim == 1:
        forcing = forcing[:, None]
    st = StreamState(spec, kspec, config)
    n = config.n0 + 1
    st.grid = list(grid[:n])
    st.values = list(values[:n])
    st.forcing = list(forcing[:n])
    st._batch_fit()
    return st


def online_update_linear(state: StreamState, t, x, f) -> StepRecord:
    return state.step_linear(t, x, f)


def online_update_nonlinear(state: StreamState, t, x, f) -> StepRecord:
    return state.step_nonlinear(t, x, f)


def retrain(state: StreamState) -> StreamState:
    state.retrain()
    return state


def advance(state: StreamState, t, x, f) -> StepRecord:
    """One protocol step: frozen update, or a window refit every ``kappa`` steps."""
    state.since_retrain += 1
    due = state.force_retrain or (
        math.isfinite(state.config.kappa) and state.since_retrain % int(state.config.kappa) == 0
    )
    if due:
        state.grid.append(float(t))
        state.values.append(np.asarray(x, dtype=np.float64))
        state.forcing.append(np.atleast_1d(np.asarray(f, dtype=np.float64)))
        state.retrain()
        a = state.alpha.view()
        u = state.window_solution()[-1]
        if state.config.method == "I":
            f_hat = _fit_forcing_last(state)
        else:
            L, rhs = state.window_system()
            f_hat = (L @ a.ravel()).reshape(-1, state.d)[-1] - (rhs.reshape(-1, state.d)[-1]
                                                               - state.fint[state.m].view()[-1])
        return StepRecord(float(t), u, f_hat, "retrain", f_target=state._target_last())
    if _is_nonlinear(state.spec):
        return state.step_nonlinear(t, x, f)
    return state.step_linear(t, x, f)


def _fit_forcing_last(state: StreamState) -> np.ndarray:
    L, rhs = state.window_system()
    a = state.alpha.view()
    lin = (L @ a.ravel()).reshape(-1, state.d)[-1]
    f_hat = lin + (state.forcing[-1] - rhs.reshape(-1, state.d)[-1])
    if _is_nonlinear(state.spec):
        U = [dv[-1:] for dv in state.window_derivatives()]
        f_hat = f_hat + _eval_nl(U, state.spec)[0]
    return f_hat


@dataclass
class StreamResult:
    t: np.ndarray
    u: np.ndarray
    f_hat: np.ndarray
    kinds: list
    newton_iters: np.ndarray
    row_residuals: np.ndarray
    n0: int
    f_target: np.ndarray | None = None

    @property
    def train(self) -> slice:
        return slice(0, self.n0 + 1)

    @property
    def test(self) -> slice:
        return slice(self.n0 + 1, None)


def run_stream(grid, values, forcing, spec, kspec: KernelSpec, config: StreamConfig) -> StreamResult:
    """Initial batch fit then the streaming protocol over the remaining samples."""
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    forcing = np.asarray(forcing, dtype=np.float64)
    if forcing.ndim == 1:
        forcing = forcing[:, None]
    st = init_batch(grid, values, forcing, spec, kspec, config)
    fit = st.fit
    u0 = st.window_solution()
    if config.method == "I":
        L, rhs = st.window_system()
        f0 = (L @ fit.alpha).reshape(-1, st.d) + (forcing[: config.n0 + 1] - rhs.reshape(-1, st.d))
        if _is_nonlinear(spec):
            f0 = f0 + _eval_nl(st.window_derivatives(), spec)
    else:
        L, rhs = st.window_system()
        f0 = (L @ fit.alpha).reshape(-1, st.d) - (rhs.reshape(-1, st.d) - st.fint[st.m].view())
    tg = list(forcing[: config.n0 + 1] if config.method == "I" else st.fint[st.m].view().copy())
    ts, us, fs = list(grid[: config.n0 + 1]), list(u0), list(f0)
    kinds = ["init"] * (config.n0 + 1)
    iters = [0] * (config.n0 + 1)
    rres = [0.0] * (config.n0 + 1)
    for k in range(config.n0 + 1, grid.shape[0]):
        rec = advance(st, grid[k], values[k], forcing[k])
        ts.append(rec.t)
        us.append(rec.u)
        fs.append(rec.f_hat)
        kinds.append(rec.kind)
        iters.append(rec.newton_iters)
        rres.append(rec.row_residual)
        tg.append(rec.f_target)
    return StreamResult(np.asarray(ts), np.asarray(us), np.asarray(fs), kinds,
                        np.asarray(iters), np.asarray(rres), config.n0, np.asarray(tg))
