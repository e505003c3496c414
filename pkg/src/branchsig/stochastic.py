"""Forcing generators and reference integrators.

Random draws use a Philox counter-based generator so that a seed fixes every
path bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .path_core import InvalidInputError, Path

G_ACCEL = 9.81


class EmbeddingError(RuntimeError):
    """Circulant embedding produced a materially negative eigenvalue."""


class StiffnessError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class FbmConfig:
    n: int = 1000
    hurst: float = 0.3
    horizon: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.hurst < 1.0:
            raise InvalidInputError(f"Hurst parameter must lie in (0, 1), got {self.hurst}")
        if self.n < 2:
            raise InvalidInputError("fBM needs at least 2 samples")


def fgn_autocovariance(k, hurst: float) -> np.ndarray:
    k = np.abs(np.asarray(k, dtype=np.float64))
    h2 = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** h2 + np.abs(k - 1) ** h2 - 2.0 * k**h2)


def _circulant_sqrt_eigs(m: int, hurst: float) -> np.ndarray:
    gam = fgn_autocovariance(np.arange(m + 1), hurst)
    row = np.concatenate([gam, gam[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10 * max(1.0, lam.max()):
        raise EmbeddingError(
            f"circulant embedding has eigenvalue {lam.min():.3e} < 0 (m={m}, H={hurst})"
        )
    return np.sqrt(np.clip(lam, 0.0, None) / row.shape[0])


def fgn_davies_harte(m: int, hurst: float, rng: np.random.Generator, size: int | None = None):
    """Unit-spacing fractional Gaussian noise of length ``m`` (exact covariance)."""
    s = _circulant_sqrt_eigs(m, hurst)
    shape = (2 * m,) if size is None else (size, 2 * m)
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    x = np.fft.fft(s * w, axis=-1).real
    return x[..., :m]


def fbm_davies_harte(config: FbmConfig) -> Path:
    """fBM sampled at ``n`` equispaced times on [0, T] with B(0) = 0."""
    return fbm_batch(config, 1)[0]


def fbm_batch(config: FbmConfig, n_paths: int) -> list[Path]:
    rng = make_rng(config.seed)
    m = config.n - 1
    grid = np.linspace(0.0, config.horizon, config.n)
    noise = fgn_davies_harte(m, config.hurst, rng, size=n_paths)
    scale = (config.horizon / m) ** config.hurst
    B = np.zeros((n_paths, config.n))
    np.cumsum(noise * scale, axis=1, out=B[:, 1:])
    return [Path(grid, b) for b in B]


def fgn(path: Path) -> np.ndarray:
    """Difference quotients (B(t_{k+1}) - B(t_k)) / dt, one per increment."""
    if len(path) < 2:
        raise InvalidInputError("fgn needs at least 2 samples")
    return np.diff(path.values, axis=0) / np.diff(path.grid)[:, None]


def arias_intensity(a, grid) -> np.ndarray:
    """Left-point discrete Arias intensity pi/(2g) * sum_{k<j} a_k^2 (t_{k+1} - t_k)."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    grid = np.asarray(grid, dtype=np.float64)
    if a.shape != grid.shape:
        raise InvalidInputError("acceleration samples and grid differ in length")
    out = np.zeros_like(grid)
    np.cumsum(a[:-1] ** 2 * np.diff(grid), out=out[1:])
    return np.pi / (2.0 * G_ACCEL) * out


def degraded_stiffness(omega_n: float, delta: float) -> Callable:
    """Node coefficient omega_n^2 (1 - delta I_A(t))_+ computed from the forcing path."""

    def coef(grid, forcing):
        # forcing is -g * a(t); recover a for the intensity
        a = -np.ravel(np.asarray(forcing)[:, 0]) / G_ACCEL
        ia = arias_intensity(a, grid)
        return omega_n**2 * np.maximum(1.0 - delta * ia, 0.0)

    return coef


@dataclass(frozen=True)
class KuramotoSpec:
    omega: np.ndarray
    coupling: float
    theta0: np.ndarray
    noise: np.ndarray = field(default=None)  # fBM increments, shape (n_steps, n_osc)

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64))
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=np.float64))
        if self.theta0.shape != self.omega.shape:
            raise InvalidInputError("theta0 and omega must have one entry per oscillator")

    @property
    def n_osc(self) -> int:
        return int(self.omega.shape[0])


def kuramoto_drift(theta: np.ndarray, omega: np.ndarray, coupling: float) -> np.ndarray:
    """omega_i + (K/n) sum_j sin(theta_j - theta_i), vectorised over leading axes."""
    diff = theta[..., None, :] - theta[..., :, None]
    return omega + coupling / theta.shape[-1] * np.sin(diff).sum(axis=-1)


def euler_kuramoto(spec: KuramotoSpec, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    n = grid.shape[0]
    noise = np.zeros((n - 1, spec.n_osc)) if spec.noise is None else np.asarray(spec.noise)
    if noise.shape != (n - 1, spec.n_osc):
        raise InvalidInputError(f"noise increments must have shape {(n - 1, spec.n_osc)}")
    theta = np.empty((n, spec.n_osc))
    theta[0] = spec.theta0
    dt = np.diff(grid)
    for k in range(n - 1):
        theta[k + 1] = theta[k] + kuramoto_drift(theta[k], spec.omega, spec.coupling) * dt[k] + noise[k]
    return theta


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _adaptive_interval(rhs, t0, t1, y, tol, h0, h_min):
    t, h = t0, min(h0, t1 - t0)
    while t < t1:
        h = min(h, t1 - t)
        full = _rk4_step(rhs, t, y, h)
        half = _rk4_step(rhs, t + h / 2, _rk4_step(rhs, t, y, h / 2), h / 2)
        err = np.max(np.abs(half - full)) / 15.0
        if err <= tol or h <= h_min:
            if err > tol:
                raise StiffnessError(f"step size underflow at t={t:.6g} (h={h:.3e})")
            y = half + (half - full) / 15.0
            t += h
            if err < tol / 64:
                h *= 2
        else:
            h /= 2
    return y, h


def reference_integrate(rhs: Callable, y0, grid, method: str = "adaptive", *,
                        tol: float = 1e-10, substeps: int = 1) -> np.ndarray:
    """Integrate a first-order system y' = rhs(t, y) and return it at every grid node.

    ``method`` is ``euler``, ``rk4`` (``substeps`` classical steps per grid
    interval) or ``adaptive`` (rk4 with step halving to local error ``tol``).
    """
    grid = np.asarray(grid, dtype=np.float64)
    y = np.array(y0, dtype=np.float64, copy=True)
    out = np.empty((grid.shape[0],) + y.shape)
    out[0] = y
    h = np.inf
    for k in range(grid.shape[0] - 1):
        t0, t1 = grid[k], grid[k + 1]
        if method == "euler":
            y = y + (t1 - t0) * rhs(t0, y)
        elif method == "rk4":
            hh = (t1 - t0) / substeps
            for s in range(substeps):
                y = _rk4_step(rhs, t0 + s * hh, y, hh)
        elif method == "adaptive":
            y, h = _adaptive_interval(rhs, t0, t1, y, tol, h, (t1 - t0) * 1e-9)
        else:
            raise InvalidInputError(f"unknown integration method {method!r}")
        out[k + 1] = y
    return out


def linear_ode_rhs(coeffs_fn: Callable, forcing_fn: Callable, order: int, dim: int = 1,
                   nonlinear: Callable | None = None) -> Callable:
    """First-order reduction of sum_r A_r(t) u^(r) + N(u..u^(m-1)) = f(t).

    ``coeffs_fn(t)`` returns the list of m+1 ``d x d`` matrices at time ``t``.
    The state stacks (u, u', ..., u^(m-1)).
    """

    def rhs(t, y):
        A = coeffs_fn(t)
        Y = y.reshape(order, dim)
        acc = np.atleast_1d(forcing_fn(t)).astype(np.float64).copy()
        for r in range(order):
            acc -= A[r] @ Y[r]
        if nonlinear is not None:
            acc -= nonlinear(*Y)
        top = np.linalg.solve(A[order], acc)
        return np.concatenate([Y[1:].ravel(), top])

    return rhs


def interp_forcing(grid, values) -> Callable:
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]

    def f(t):
        return np.array([np.interp(t, grid, values[:, c]) for c in range(values.shape[1])])

    return f
