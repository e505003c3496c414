"""Count-method timing benchmark and randomized gradient checks."""
from __future__ import annotations

import time

import numpy as np

from .kernel import KernelSpec, build_gram_stack
from .lift import (
    LiftProblem,
    LiftTrainConfig,
    build_system,
    grad_check,
    init_mlp,
    solve_alpha,
    total_grad,
    total_loss,
)
from .linear_solver import LinearODESpec
from .nonlinear_solver import NonlinearODESpec, assemble_nonlinear, loss_and_grad
from .path_core import InvalidInputError, Path
from .signature import path_signature, stream_prefix_signatures
from .stochastic import make_rng


def naive_prefix_signatures(values, depth: int) -> np.ndarray:
    """Each prefix signed from scratch: O(N^2) segment work in total."""
    values = np.asarray(values, dtype=np.float64)
    rows = [path_signature(values[:1].repeat(2, axis=0), depth).coeffs]
    for j in range(1, values.shape[0]):
        rows.append(path_signature(values[: j + 1], depth).coeffs)
    return np.vstack(rows)


def bench_speedup(sizes=(200, 400, 800), dim: int = 2, depth: int = 3, seed: int = 0,
                  repeats: int = 3) -> list[dict]:
    """Wall time of naive vs streamed prefix signatures for each N (best of ``repeats``)."""
    rng = make_rng(seed)
    rows = []
    for N in sizes:
        if N < 2:
            raise InvalidInputError("benchmark sizes must be >= 2")
        values = np.cumsum(rng.standard_normal((N, dim)), axis=0) / np.sqrt(N)
        path = Path(np.linspace(0.0, 1.0, N), values)
        streamed = stream_prefix_signatures(path, depth).rows
        naive = naive_prefix_signatures(values, depth)
        err = float(np.max(np.abs(streamed - naive)))
        if err > 1e-12 * max(1.0, float(np.max(np.abs(naive)))):
            raise AssertionError(f"streamed and naive prefix signatures differ by {err:.3e} at N={N}")
        tn, ts = np.inf, np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            naive_prefix_signatures(values, depth)
            tn = min(tn, time.perf_counter() - t0)
            t0 = time.perf_counter()
            stream_prefix_signatures(path, depth)
            ts = min(ts, time.perf_counter() - t0)
        rows.append({"N": N, "naive_s": tn, "streamed_s": ts, "ratio": tn / ts, "max_abs_diff": err})
    return rows


def fitted_exponent(rows, key: str = "streamed_s") -> float:
    """Least-squares slope of log(time) against log(N)."""
    x = np.log([r["N"] for r in rows])
    y = np.log([r[key] for r in rows])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------- gradient checks

def _random_forcing(rng, n):
    return np.cumsum(rng.standard_normal(n)) / np.sqrt(n)


def solver_grad_instance(seed: int):
    """Random small Duffing collocation problem and a random coefficient vector."""
    rng = make_rng(seed)
    n = int(rng.integers(6, 12))
    t = np.linspace(0.0, 1.0, n)
    f = _random_forcing(rng, n)
    spec = NonlinearODESpec.duffing(*rng.uniform(0.5, 5.0, 3), rng.normal(), rng.normal())
    stack = build_gram_stack(Path(t, np.column_stack([t, f])), KernelSpec("rbf", 1.0, 2, "robust"), 2)
    system = assemble_nonlinear(spec, stack, f)
    alpha = rng.normal(size=n)
    return system, alpha, float(rng.uniform(0.0, 1e-2))


def solver_grad_error(seed: int, h: float = 1e-6) -> float:
    system, alpha, ridge = solver_grad_instance(seed)
    _, g = loss_and_grad(alpha, system, ridge)
    fd = np.empty_like(alpha)
    for k in range(alpha.size):
        e = np.zeros_like(alpha)
        e[k] = h
        fd[k] = (loss_and_grad(alpha + e, system, ridge)[0] - loss_and_grad(alpha - e, system, ridge)[0]) / (2 * h)
    return float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-300))


def lift_grad_instance(seed: int):
    rng = make_rng(1000 + seed)
    n = int(rng.integers(5, 9))
    t = np.linspace(0.0, 1.0, n)
    f = _random_forcing(rng, n)
    base = Path(t, np.column_stack([t, f]))
    if seed % 2:
        spec = NonlinearODESpec.duffing(5.0, 10.0, float(rng.uniform(0.5, 5)), 0.0, 1.0)
    else:
        spec = LinearODESpec([10.0, 5.0, 1.0], [0.0, float(rng.normal())])
    prob = LiftProblem(base, f, spec, KernelSpec("rbf", 1.0, 2, "robust"))
    theta = init_mlp((2, 6, 2), seed=seed, output_scale=1.0)
    alpha = solve_alpha(prob, build_system(theta, prob)) + 0.1 * rng.standard_normal(n)
    return prob, theta, alpha


def lift_grad_error(seed: int, grad: str = "tape") -> float:
    prob, theta, alpha = lift_grad_instance(seed)
    cfg = LiftTrainConfig(grad=grad)
    return grad_check(theta, lambda th: total_loss(th, alpha, prob, cfg),
                      lambda th: total_grad(th, alpha, prob, cfg))
