"""Learned path extensions and joint lift/solver training.

A small MLP maps each observed sample ``(t, f(t))`` to extra channels. The
lifted path ``(t, f, ext)`` feeds the kernel solver; training alternates an
exact coefficient solve with a backtracked first-order step on the network
weights for ``lam_shuffle * L_shuffle + lam_model * L_model``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import KernelSpec, build_gram_stack
from .linear_solver import LinearODESpec, assemble_method1, solve_lstsq
from .nonlinear_solver import (
    LbfgsConfig,
    NonlinearODESpec,
    assemble_nonlinear,
    lbfgs_minimize,
    loss_and_grad,
    residual,
)
from .path_core import InvalidInputError, Path
from .stochastic import make_rng


# ---------------------------------------------------------------- network

@dataclass(frozen=True)
class MlpParams:
    """Layer weights ``W[k]`` (fan_in x fan_out) and biases; tanh on hidden layers."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise InvalidInputError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise InvalidInputError(f"layer {k} input width {W.shape[0]} != previous output "
                                        f"{self.weights[k - 1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {k} has non-finite entries")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_flat(self, theta) -> "MlpParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[k : k + W.size].reshape(W.shape))
            k += W.size
            bs.append(theta[k : k + b.size].copy())
            k += b.size
        return MlpParams(tuple(Ws), tuple(bs))


def init_mlp(sizes, seed=0, output_scale: float = 1e-2) -> MlpParams:
    """Glorot-uniform weights, zero biases; the last layer is shrunk by ``output_scale``.

    A small output layer keeps the initial lift close to constant (and the
    lifted model close to the un-lifted one). Exactly zero would be a
    stationary point: kernel gradients vanish along constant feature columns.
    """
    if len(sizes) < 2:
        raise InvalidInputError("an MLP needs at least input and output widths")
    rng = make_rng(seed)
    Ws, bs = [], []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        W = rng.uniform(-lim, lim, size=(a, b))
        if k == len(sizes) - 2:
            W = W * output_scale
        Ws.append(W)
        bs.append(np.zeros(b))
    return MlpParams(tuple(Ws), tuple(bs))


def mlp_forward(theta: MlpParams, x) -> np.ndarray:
    """Apply the network to one input row or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != theta.weights[0].shape[0]:
        raise InvalidInputError(f"input width {h.shape[1]} != network input {theta.weights[0].shape[0]}")
    last = len(theta.weights) - 1
    for k, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = h @ W + b
        if k < last:
            h = np.tanh(h)
    return h[0] if single else h


def mlp_vjp(theta: MlpParams, x, gout) -> np.ndarray:
    """Flat gradient of ``sum(gout * mlp_forward(theta, x))`` with respect to the parameters."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x]
    last = len(theta.weights) - 1
    h = x
    for k, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = h @ W + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    g = np.atleast_2d(gout)
    grads = []
    for k in range(last, -1, -1):
        if k < last:
            g = g * (1.0 - acts[k + 1] ** 2)
        grads.append((acts[k].T @ g, g.sum(axis=0)))
        g = g @ theta.weights[k].T
    grads.reverse()
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


# ---------------------------------------------------------------- checkpoints

def save_mlp(theta: MlpParams, path) -> None:
    """Text checkpoint: a header line, then per layer a ``layer fan_in fan_out`` line,
    ``fan_in`` rows of weights and one row of biases (``repr`` floats)."""
    out = io.StringIO()
    out.write(f"branchsig-mlp 1 {len(theta.weights)}\n")
    for W, b in zip(theta.weights, theta.biases):
        out.write(f"layer {W.shape[0]} {W.shape[1]}\n")
        for row in W:
            out.write(" ".join(repr(float(v)) for v in row) + "\n")
        out.write(" ".join(repr(float(v)) for v in b) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(out.getvalue())


def load_mlp(path) -> MlpParams:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["branchsig-mlp", "1"]:
        raise InvalidInputError(f"{path}: not a version-1 MLP checkpoint")
    Ws, bs, k = [], [], 1
    for _ in range(int(head[2])):
        tag, a, b = lines[k].split()
        a, b = int(a), int(b)
        W = np.array([[float(v) for v in lines[k + 1 + r].split()] for r in range(a)]).reshape(a, b)
        bias = np.array([float(v) for v in lines[k + 1 + a].split()]).reshape(b)
        Ws.append(W)
        bs.append(bias)
        k += a + 2
    return MlpParams(tuple(Ws), tuple(bs))


# ---------------------------------------------------------------- shuffle loss

def _shuffle_parts(ext):
    E = np.asarray(ext, dtype=np.float64)
    if E.ndim == 1:
        E = E[:, None]
    if E.shape[0] < 2:
        raise InvalidInputError("shuffle loss needs at least 2 time points")
    D = E - E[0]
    dE = np.diff(E, axis=0)
    n, p = E.shape
    I = np.zeros((n, p, p))
    np.cumsum(D[:-1, :, None] * dE[:, None, :], axis=0, out=I[1:])
    R = D[:, :, None] * D[:, None, :] - I - np.swapaxes(I, 1, 2)
    return E, D, dE, R


def shuffle_loss_values(ext) -> float:
    """(1/N) sum_i sum_{a,b} |D^a_i D^b_i - I^{ab}_i - I^{ba}_i|^2, left-point integrals."""
    E, _, _, R = _shuffle_parts(ext)
    return float(np.sum(R**2)) / E.shape[0]


def shuffle_loss_grad_values(ext):
    """Shuffle loss and its gradient with respect to the extension samples."""
    E, D, dE, R = _shuffle_parts(ext)
    n = E.shape[0]
    # G[k] = sum_{i > k} R_i
    G = np.zeros_like(R)
    G[:-1] = np.cumsum(R[::-1], axis=0)[::-1][1:]
    gD = np.einsum("iab,ib->ia", R, D)
    gD[:-1] -= np.einsum("kab,kb->ka", G[:-1], dE)
    gDelta = -np.einsum("kab,kb->ka", G[:-1], D[:-1])
    gE = gD.copy()
    gE[0] -= gD.sum(axis=0)
    gE[1:] += gDelta
    gE[:-1] -= gDelta
    return float(np.sum(R**2)) / n, 4.0 / n * gE


def shuffle_loss(theta: MlpParams, path: Path) -> float:
    return shuffle_loss_values(mlp_forward(theta, path.values))


# ---------------------------------------------------------------- model loss

@dataclass(frozen=True)
class LiftProblem:
    """An ODE solve on the path ``base`` (time-augmented observation), lifted by a network."""

    base: Path
    forcing: np.ndarray
    spec: object  # LinearODESpec or NonlinearODESpec
    kspec: KernelSpec
    ridge: float = 0.0
    lbfgs: LbfgsConfig = field(default_factory=lambda: LbfgsConfig(max_iter=200))

    @property
    def nonlinear(self) -> bool:
        return isinstance(self.spec, NonlinearODESpec)

    @property
    def m(self) -> int:
        return self.spec.order


def lifted_path(theta: MlpParams | None, base: Path) -> Path:
    """(original channels, extension channels); the original columns are copied verbatim."""
    if theta is None or theta.sizes[-1] == 0:
        return base
    return base.concat_channels(mlp_forward(theta, base.values))


@dataclass(frozen=True)
class LiftSystem:
    stack: object
    L: np.ndarray
    Ft: np.ndarray
    nl_system: object = None


def build_system(theta, problem: LiftProblem) -> LiftSystem:
    stack = build_gram_stack(lifted_path(theta, problem.base), problem.kspec, problem.m)
    if problem.nonlinear:
        sysn = assemble_nonlinear(problem.spec, stack, problem.forcing)
        return LiftSystem(stack, sysn.L, sysn.Ft, sysn)
    L, Ft, _ = assemble_method1(problem.spec, stack, problem.forcing)
    return LiftSystem(stack, L, Ft)


def system_residual(alpha, system: LiftSystem) -> np.ndarray:
    if system.nl_system is not None:
        return residual(alpha, system.nl_system)
    return system.L @ alpha - system.Ft


def model_loss(theta, alpha, problem: LiftProblem, system: LiftSystem | None = None) -> float:
    """(1/(N+1)) ||L alpha + Phi_nl - F_tilde||^2 (+ ridge/(N+1) ||alpha||^2) on the lifted path."""
    system = build_system(theta, problem) if system is None else system
    R = system_residual(alpha, system)
    n = len(system.stack)
    return (float(R @ R) + problem.ridge * float(alpha @ alpha)) / n


def solve_alpha(problem: LiftProblem, system: LiftSystem, alpha0=None) -> np.ndarray:
    """Coefficient step: least squares (linear) or warm-started L-BFGS (nonlinear)."""
    if not problem.nonlinear:
        return solve_lstsq(system.L, system.Ft, ridge=problem.ridge).alpha
    if alpha0 is None:
        alpha0 = solve_lstsq(system.L, system.Ft, ridge=problem.ridge).alpha
    n = len(system.stack)
    cfg = replace(problem.lbfgs, ridge=problem.ridge / n)
    res = lbfgs_minimize(lambda a: loss_and_grad(a, system.nl_system, cfg.ridge), alpha0, cfg)
    return res.x


# ---------------------------------------------------------------- gradients

@dataclass(frozen=True)
class LiftTrainConfig:
    lam_shuffle: float = 0.1
    lam_model: float = 1.0
    outer_iters: int = 20
    step_size: float = 1e-2
    grad: str = "fd"  # fd | tape
    hidden: tuple = (32, 32, 16)
    ext_dim: int = 4
    seed: int = 0
    max_backtracks: int = 8
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.lam_shuffle < 0 or self.lam_model < 0 or self.lam_shuffle + self.lam_model <= 0:
            raise InvalidInputError("need lam_shuffle, lam_model >= 0 with a positive sum")
        if self.grad not in ("fd", "tape"):
            raise InvalidInputError(f"gradient strategy must be 'fd' or 'tape', got {self.grad!r}")


WIDE_HIDDEN = (512, 256, 128, 64, 32, 16)  # full-size network; defaults stay desk scale


def total_loss(theta: MlpParams, alpha, problem: LiftProblem, cfg: LiftTrainConfig) -> float:
    val = 0.0
    if cfg.lam_shuffle:
        val += cfg.lam_shuffle * shuffle_loss(theta, problem.base)
    if cfg.lam_model:
        val += cfg.lam_model * model_loss(theta, alpha, problem)
    return val


def shuffle_grad(theta: MlpParams, path: Path):
    ext = mlp_forward(theta, path.values)
    val, gE = shuffle_loss_grad_values(ext)
    return val, mlp_vjp(theta, path.values, gE)


def model_grad_fd(theta: MlpParams, alpha, problem: LiftProblem, h: float = 1e-6) -> np.ndarray:
    """Central differences of the model loss over every network parameter."""
    flat = theta.flat()
    g = np.empty_like(flat)
    for k in range(flat.size):
        step = h * max(1.0, abs(flat[k]))
        up, dn = flat.copy(), flat.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (model_loss(theta.with_flat(up), alpha, problem)
                - model_loss(theta.with_flat(dn), alpha, problem)) / (2 * step)
    return g


def total_grad(theta: MlpParams, alpha, problem: LiftProblem, cfg: LiftTrainConfig) -> np.ndarray:
    g = np.zeros(theta.n_params)
    if cfg.lam_shuffle:
        g += cfg.lam_shuffle * shuffle_grad(theta, problem.base)[1]
    if cfg.lam_model:
        if cfg.grad == "tape":
            from .tape import model_loss_and_grad_tape

            g += cfg.lam_model * model_loss_and_grad_tape(theta, alpha, problem)[1]
        else:
            g += cfg.lam_model * model_grad_fd(theta, alpha, problem, cfg.fd_step)
    return g


def grad_check(theta: MlpParams, loss_fn, grad_fn, steps=(1e-5, 1e-6)) -> float:
    """Max relative discrepancy between ``grad_fn`` and central differences of ``loss_fn``.

    The reported error is the smaller of the two step sizes' errors, each
    measured as ``max|g - g_fd| / max(max|g_fd|, tiny)``.
    """
    flat = theta.flat()
    g = np.asarray(grad_fn(theta), dtype=np.float64)
    best = np.inf
    for h in steps:
        fd = np.empty_like(flat)
        for k in range(flat.size):
            step = h * max(1.0, abs(flat[k]))
            up, dn = flat.copy(), flat.copy()
            up[k] += step
            dn[k] -= step
            fd[k] = (loss_fn(theta.with_flat(up)) - loss_fn(theta.with_flat(dn))) / (2 * step)
        scale = max(float(np.max(np.abs(fd))), 1e-300)
        best = min(best, float(np.max(np.abs(g - fd))) / scale)
    return best


# ---------------------------------------------------------------- training

@dataclass
class LiftResult:
    theta: MlpParams
    alpha: np.ndarray
    history: list
    model_history: list
    degraded: bool
    system: LiftSystem


def train_lift(cfg: LiftTrainConfig, problem: LiftProblem, theta0: MlpParams | None = None) -> LiftResult:
    """Alternate an exact alpha solve with a backtracked Adam step on theta."""
    in_dim = problem.base.dim
    theta = theta0 if theta0 is not None else init_mlp((in_dim, *cfg.hidden, cfg.ext_dim), cfg.seed)
    system = build_system(theta, problem)
    alpha = solve_alpha(problem, system)

    def tot(th, al, sys_=None):
        s = cfg.lam_shuffle * shuffle_loss(th, problem.base) if cfg.lam_shuffle else 0.0
        mdl = model_loss(th, al, problem, sys_)
        return s + cfg.lam_model * mdl, mdl

    cur, cur_model = tot(theta, alpha, system)
    hist, mhist = [cur], [cur_model]
    m1 = np.zeros(theta.n_params)
    v1 = np.zeros(theta.n_params)
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.step_size
    degraded = False
    for it in range(1, cfg.outer_iters + 1):
        try:
            g = total_grad(theta, alpha, problem, cfg)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError):
            degraded = True
            break
        m1 = b1 * m1 + (1 - b1) * g
        v1 = b2 * v1 + (1 - b2) * g**2
        direction = (m1 / (1 - b1**it)) / (np.sqrt(v1 / (1 - b2**it)) + eps)
        accepted = False
        step = lr
        for _ in range(cfg.max_backtracks):
            cand = theta.with_flat(theta.flat() - step * direction)
            try:
                cand_sys = build_system(cand, problem)
                cand_alpha = solve_alpha(problem, cand_sys, alpha)
                val, mval = tot(cand, cand_alpha, cand_sys)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError):
                val = np.inf
            if np.isfinite(val) and val <= cur:
                theta, alpha, system, cur, cur_model = cand, cand_alpha, cand_sys, val, mval
                accepted = True
                break
            step *= 0.5
        if not accepted:
            lr *= 0.25
            if lr < 1e-8 * cfg.step_size:
                break
            continue
        hist.append(cur)
        mhist.append(cur_model)
    return LiftResult(theta, alpha, hist, mhist, degraded, system)
