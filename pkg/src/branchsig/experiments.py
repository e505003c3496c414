"""Benchmark problems and the configuration-driven experiment runner."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig, parse_lift
from .kernel import KernelSpec, build_gram_stack, integrated_gram_stack, pointwise_rbf_gram
from .lift import LiftProblem, LiftTrainConfig, init_mlp, mlp_forward, train_lift
from .linear_solver import (
    LinearODESpec,
    forcing_reconstruction,
    integrated_forcing,
    node_derivatives,
    node_solution,
    relative_mse,
    solve_fit,
)
from .nonlinear_solver import (
    LbfgsConfig,
    NonlinearODESpec,
    fit_nonlinear,
    nonlinear_forcing_reconstruction,
)
from .path_core import InvalidInputError, Path, augment_time_power
from .stochastic import (
    G_ACCEL,
    FbmConfig,
    KuramotoSpec,
    degraded_stiffness,
    euler_kuramoto,
    fbm_batch,
    fbm_davies_harte,
    interp_forcing,
    kuramoto_drift,
    linear_ode_rhs,
    make_rng,
    reference_integrate,
)
from .streaming import StreamConfig, run_stream


class StageError(RuntimeError):
    """An experiment failed; the message names the pipeline stage."""


# ---------------------------------------------------------------- data

def load_csv(path) -> Path:
    """Two numeric columns ``t, value``; an optional non-numeric header line is skipped."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    ts, vs = [], []
    first = True
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header_ok, first = first, False
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 2:
            raise InvalidInputError(f"{path}:{lineno}: expected 2 columns, found {len(cells)}")
        try:
            t, v = float(cells[0]), float(cells[1])
        except ValueError:
            if header_ok and all(_is_word(c) for c in cells):
                continue  # header
            raise InvalidInputError(f"{path}:{lineno}: non-numeric cell in {line!r}") from None
        if not (math.isfinite(t) and math.isfinite(v)):
            raise InvalidInputError(f"{path}:{lineno}: non-finite value in {line!r}")
        if ts and t <= ts[-1]:
            raise InvalidInputError(f"{path}:{lineno}: time {t!r} does not increase (previous {ts[-1]!r})")
        ts.append(t)
        vs.append(v)
    if not ts:
        raise InvalidInputError(f"{path}: no data rows")
    return Path(np.array(ts), np.array(vs))


def _is_word(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return True
    return False


def synthetic_accelerogram(n: int, seed: int, dt: float = 0.02) -> Path:
    """Band-limited (0.5-10 Hz) noise under a rise/decay envelope, peak 0.3 (in g)."""
    rng = make_rng(seed)
    t = np.arange(n) * dt
    spec = np.fft.rfft(rng.standard_normal(n))
    freq = np.fft.rfftfreq(n, dt)
    spec[(freq < 0.5) | (freq > 10.0)] = 0.0
    x = np.fft.irfft(spec, n)
    t1 = 0.15 * t[-1]
    env = np.where(t < t1, (t / t1) ** 2, np.exp(-1.5 * (t - t1) / max(t[-1] - t1, dt)))
    a = x * env
    return Path(t, 0.3 * a / np.max(np.abs(a)))


def synthetic_gdp(n: int, seed: int) -> Path:
    """Logistic trend with small AR(1) wiggle on [0, 1]."""
    rng = make_rng(seed)
    t = np.linspace(0.0, 1.0, n)
    trend = 1.0 + 2.0 / (1.0 + np.exp(-6.0 * (t - 0.5)))
    e = np.zeros(n)
    z = rng.standard_normal(n)
    for k in range(1, n):
        e[k] = 0.9 * e[k - 1] + 0.004 * z[k]
    return Path(t, trend + e)


# ---------------------------------------------------------------- problems

@dataclass
class Problem:
    name: str
    grid: np.ndarray
    forcing: np.ndarray  # (n, d) right-hand side
    channels: np.ndarray  # (n, c) observed path, time first
    spec: object
    u_ref: np.ndarray  # (n, d)
    du_ref: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def nonlinear(self) -> bool:
        return isinstance(self.spec, NonlinearODESpec)

    @property
    def linear(self) -> LinearODESpec:
        return self.spec.linear if self.nonlinear else self.spec


def _const_rhs(coeffs, forcing_fn, order, nonlinear=None):
    mats = [np.atleast_2d(c) for c in coeffs]
    return linear_ode_rhs(lambda s: mats, forcing_fn, order, nonlinear=nonlinear)


def elcentro_problem(cfg: ExperimentConfig) -> Problem:
    acc = load_csv(cfg.data) if cfg.data else synthetic_accelerogram(cfg.n, cfg.seed)
    t, a = acc.grid, acc.values[:, 0]
    f = -G_ACCEL * a
    xi, wn = 0.02, 2.0 * np.pi / 5.0
    coeffs = [wn**2, 2 * xi * wn, 1.0]
    spec = LinearODESpec(coeffs, [0.0, 0.0])
    ref = reference_integrate(_const_rhs(coeffs, interp_forcing(t, f), 2), [0.0, 0.0], t)
    return Problem("elcentro", t, f[:, None], np.column_stack([t, f]), spec, ref[:, :1],
                   info=dict(xi=xi, omega_n=wn))


def solow_problem(cfg: ExperimentConfig) -> Problem:
    gdp = load_csv(cfg.data) if cfg.data else synthetic_gdp(cfg.n, cfg.seed)
    t, F = gdp.grid, gdp.values[:, 0]
    delta, s, y0 = 0.05, 0.3, 3.1
    spec = LinearODESpec([delta, 1.0], [y0])
    ref = reference_integrate(_const_rhs([delta, 1.0], interp_forcing(t, s * F), 1), [y0], t)
    return Problem("solow", t, (s * F)[:, None], np.column_stack([t, F]), spec, ref,
                   info=dict(depreciation=delta, savings=s, Y0=y0))


def fbm_linear_problem(cfg: ExperimentConfig) -> Problem:
    B = fbm_davies_harte(FbmConfig(cfg.n, cfg.hurst, 1.0, cfg.seed))
    t, f = B.grid, B.values[:, 0]
    coeffs = [10.0, 5.0, 1.0]  # k, c, m
    spec = LinearODESpec(coeffs, [0.0, 0.0])
    ref = reference_integrate(_const_rhs(coeffs, interp_forcing(t, f), 2), [0.0, 0.0], t)
    return Problem("fbm-linear", t, f[:, None], np.column_stack([t, f]), spec, ref[:, :1])


def duffing_problem(cfg: ExperimentConfig) -> Problem:
    B = fbm_davies_harte(FbmConfig(cfg.n, cfg.hurst, 1.0, cfg.seed))
    t, f = B.grid, B.values[:, 0]
    k0, k1, gamma = 5.0, 10.0, cfg.gamma
    spec = NonlinearODESpec.duffing(k0, k1, gamma, 0.0, 1.0)
    rhs = _const_rhs([k0, k1, 1.0], interp_forcing(t, f), 2, nonlinear=lambda u, v: gamma * u**3)
    ref = reference_integrate(rhs, [0.0, 1.0], t)
    return Problem("duffing", t, f[:, None], np.column_stack([t, f]), spec, ref[:, :1],
                   info=dict(k0=k0, k1=k1, gamma=gamma))


def arias_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.data:
        acc = load_csv(cfg.data)
    else:
        acc = fbm_davies_harte(FbmConfig(cfg.n, cfg.hurst, 1.0, cfg.seed))
    t, a = acc.grid, acc.values[:, 0]
    f = -G_ACCEL * a
    wn, xi, delta = 2.0 * np.pi, 0.05, 5.0
    stiff = degraded_stiffness(wn, delta)
    spec = LinearODESpec([stiff, 2 * xi * wn, 1.0], [0.0, 0.0])
    k_nodes = stiff(t, f[:, None])
    ff = interp_forcing(t, f)

    def coeffs_fn(s):
        return [np.atleast_2d(np.interp(s, t, k_nodes)), np.atleast_2d(2 * xi * wn), np.eye(1)]

    ref = reference_integrate(linear_ode_rhs(coeffs_fn, ff, 2), [0.0, 0.0], t)
    return Problem("arias", t, f[:, None], np.column_stack([t, f]), spec, ref[:, :1],
                   info=dict(omega_n=wn, xi=xi, delta=delta))


KURAMOTO_OMEGA = (-1.0, -0.3, 1.5)
KURAMOTO_COUPLING = 3.0


def kuramoto_problem(cfg: ExperimentConfig) -> Problem:
    omega = np.array(KURAMOTO_OMEGA)
    rng = make_rng(cfg.seed)
    th0 = rng.uniform(0.0, 2.0 * np.pi, omega.shape[0])
    paths = fbm_batch(FbmConfig(cfg.n, cfg.hurst, 1.0, cfg.seed + 1), omega.shape[0])
    t = paths[0].grid
    dB = np.stack([np.diff(p.values[:, 0]) for p in paths], axis=1)
    theta = euler_kuramoto(KuramotoSpec(omega, KURAMOTO_COUPLING, th0, dB), t)
    eta = dB / np.diff(t)[:, None]
    tg = t[:-1]  # the noise path lives on k = 0..N-2
    th = theta[:-1]
    dth = kuramoto_drift(th, omega, KURAMOTO_COUPLING) + eta
    spec = NonlinearODESpec.kuramoto(omega, KURAMOTO_COUPLING, th0)
    return Problem("kuramoto", tg, eta, np.column_stack([tg, eta]), spec, th, dth,
                   info=dict(coupling=KURAMOTO_COUPLING))


BUILDERS = {
    "elcentro": elcentro_problem,
    "solow": solow_problem,
    "fbm-linear": fbm_linear_problem,
    "duffing": duffing_problem,
    "arias": arias_problem,
    "kuramoto": kuramoto_problem,
}


def build_problem(cfg: ExperimentConfig) -> Problem:
    try:
        return BUILDERS[cfg.benchmark](cfg)
    except (InvalidInputError, OSError) as exc:
        raise StageError(f"[data] {exc}") from exc


# ---------------------------------------------------------------- fitting

MEMORY_BUDGET = 2 * 1024**3


def check_memory(n: int, channels: int, depth: int, budget: int = MEMORY_BUDGET) -> None:
    """Refuse signature matrices that would not fit in ``budget`` bytes."""
    width = sum(channels**k for k in range(depth + 1))
    need = 8 * n * width * 3  # prefix rows plus working copies
    if need > budget:
        raise StageError(
            f"[signatures] {n} prefixes x {width} coefficients (d={channels}, depth={depth}) "
            f"needs ~{need / 1024**3:.1f} GiB; lower the depth or the number of samples"
        )


def kernel_spec(cfg: ExperimentConfig) -> KernelSpec:
    return KernelSpec(cfg.kernel, cfg.sigma, cfg.depth, cfg.normalization)


def _lbfgs(cfg: ExperimentConfig, n: int) -> LbfgsConfig:
    return LbfgsConfig(max_iter=300, ridge=cfg.ridge / n)


def lifted_channels(cfg: ExperimentConfig, prob: Problem, lift: str, window: int):
    """Channels of the (possibly lifted) path for every node; nn lifts train on nodes 0..window."""
    kind, arg = parse_lift(lift)
    channels = prob.channels.copy()
    channels[:, 1:] *= cfg.path_scale
    if kind == "none":
        return channels, {}, None
    if kind == "time-power":
        return augment_time_power(Path(prob.grid, channels), arg).values, {"alpha": arg}, None
    w = window + 1
    lp = LiftProblem(Path(prob.grid[:w], channels[:w]), prob.forcing[:w], prob.spec,
                     kernel_spec(cfg), cfg.ridge, _lbfgs(cfg, w))
    tc = LiftTrainConfig(outer_iters=cfg.lift_iters, grad=cfg.lift_grad, hidden=cfg.hidden,
                         ext_dim=arg, seed=cfg.seed)
    theta0 = init_mlp((channels.shape[1], *cfg.hidden, arg), cfg.seed)
    res = train_lift(tc, lp, theta0)
    ext = mlp_forward(res.theta, channels)
    info = {"lift_loss_start": res.history[0], "lift_loss_end": res.history[-1],
            "lift_accepted": len(res.history) - 1, "lift_degraded": res.degraded}
    return np.hstack([channels, ext]), info, res.theta


@dataclass
class VariantResult:
    f_hat: np.ndarray
    f_target: np.ndarray
    u_hat: np.ndarray
    du_hat: np.ndarray | None
    splits: dict
    info: dict


def _calibrate(cfg, prob: Problem, values, pointwise: bool = False) -> VariantResult:
    n = prob.grid.shape[0]
    m = prob.linear.order
    if pointwise:
        stack = integrated_gram_stack(pointwise_rbf_gram(prob.grid[:, None], cfg.sigma), prob.grid, m)
    else:
        check_memory(n, values.shape[1], cfg.depth)
        stack = build_gram_stack(Path(prob.grid, values), kernel_spec(cfg), m)
    du = None
    if prob.nonlinear:
        if cfg.method != "I":
            raise StageError("[solve] nonlinear benchmarks use Method I")
        fit = fit_nonlinear(prob.spec, stack, prob.forcing, _lbfgs(cfg, n))
        f_hat = nonlinear_forcing_reconstruction(fit)
        derivs = node_derivatives(fit)
        u, du = derivs[0], derivs[1]
        target = prob.forcing
        info = {"lbfgs_iters": fit.n_iter, "lbfgs_converged": fit.converged}
    else:
        fit = solve_fit(prob.spec, stack, prob.forcing, cfg.method, ridge=cfg.ridge)
        f_hat = forcing_reconstruction(fit)
        u = node_solution(fit)
        if cfg.method == "I":
            target = prob.forcing
            du = node_derivatives(fit)[1]
        else:
            target = integrated_forcing(prob.grid, prob.forcing, m)
        info = {"rank": fit.rank}
    return VariantResult(f_hat, target, u, du, {"all": slice(0, n)}, info)


def _stream(cfg, prob: Problem, values, window: int) -> VariantResult:
    n = prob.grid.shape[0]
    check_memory(window + 1, values.shape[1], cfg.depth)
    sc = StreamConfig(window, cfg.kappa, cfg.method, cfg.ridge, lbfgs=_lbfgs(cfg, window + 1))
    res = run_stream(prob.grid, values, prob.forcing, prob.spec, kernel_spec(cfg), sc)
    kinds = {k: res.kinds.count(k) for k in sorted(set(res.kinds))}
    info = {f"steps_{k}": v for k, v in kinds.items()}
    info["max_row_residual"] = float(np.max(np.abs(res.row_residuals)))
    return VariantResult(res.f_hat, res.f_target, res.u, None,
                         {"train": res.train, "test": slice(res.n0 + 1, n)}, info)


def _metrics(prefix: str, cfg, prob: Problem, vr: VariantResult) -> dict:
    fname = "forcing" if cfg.method == "I" else "integrated_forcing"
    out = {}
    for split, sl in vr.splits.items():
        if sl.start >= (sl.stop if sl.stop is not None else prob.grid.shape[0]):
            continue
        out[f"{prefix}.{split}.{fname}"] = relative_mse(vr.f_hat[sl], vr.f_target[sl])
        out[f"{prefix}.{split}.solution"] = relative_mse(vr.u_hat[sl], prob.u_ref[sl])
        if vr.du_hat is not None and prob.du_ref is not None:
            out[f"{prefix}.{split}.derivative"] = relative_mse(vr.du_hat[sl], prob.du_ref[sl])
    return out


# ---------------------------------------------------------------- runner

@dataclass
class Report:
    benchmark: str
    config_hash: str
    config: dict
    metrics: dict
    info: dict
    runtime_s: float = 0.0
    trace: dict = field(default_factory=dict)
    lifts: dict = field(default_factory=dict)  # variant -> trained MlpParams


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Build the benchmark, fit every variant, score it and collect a trace."""
    t0 = time.perf_counter()
    prob = build_problem(cfg)
    n = prob.grid.shape[0]
    # calibration fits (and lifts) on every node; streaming only sees 0..n0 up front
    window = n - 1 if cfg.mode == "calibrate" else min(cfg.window(), n - 2)

    variants = [("model" if cfg.lift == "none" else "branched", cfg.lift, False)]
    if cfg.baseline and cfg.lift != "none":
        variants.append(("unlifted", "none", False))
    if cfg.baseline and cfg.benchmark == "arias":
        variants.append(("pointwise_rbf", "none", True))

    metrics, info, primary, lifts = {}, dict(prob.info), None, {}
    if cfg.mode == "stream":
        info["n0"] = window
    for name, lift, pointwise in variants:
        try:
            values, linfo, theta = lifted_channels(cfg, prob, lift, window)
        except (InvalidInputError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise StageError(f"[lift:{name}] {exc}") from exc
        try:
            if cfg.mode == "stream" and not pointwise:
                vr = _stream(cfg, prob, values, window)
            else:
                vr = _calibrate(cfg, prob, values, pointwise)
        except StageError:
            raise
        except (InvalidInputError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise StageError(f"[solve:{name}] {exc}") from exc
        if theta is not None:
            lifts[name] = theta
        metrics.update(_metrics(name, cfg, prob, vr))
        info.update({f"{name}.{k}": v for k, v in {**linfo, **vr.info}.items()})
        if primary is None:
            primary = vr

    trace = {"t": prob.grid}
    for label, arr in (("f_true", primary.f_target), ("f_hat", primary.f_hat),
                       ("u_ref", prob.u_ref), ("u_hat", primary.u_hat)):
        arr = np.asarray(arr).reshape(n, -1)
        if arr.shape[1] == 1:
            trace[label] = arr[:, 0]
        else:
            for c in range(arr.shape[1]):
                trace[f"{label}_{c + 1}"] = arr[:, c]
    return Report(cfg.benchmark, cfg.digest(), asdict(cfg), metrics, info,
                  time.perf_counter() - t0, trace, lifts)
