"""Experiment configuration: a flat ``key = value`` text format plus overrides.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Keys are the field names of :class:`ExperimentConfig`.
Unset keys take the benchmark default (see ``BENCHMARK_DEFAULTS``).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace

from .path_core import InvalidInputError

BENCHMARKS = ("elcentro", "solow", "fbm-linear", "duffing", "arias", "kuramoto")


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str
    method: str = "I"
    kernel: str = "rbf"
    sigma: float = 1.0
    depth: int = 3
    lift: str = "none"  # none | time-power:<alpha> | nn:<dims>
    normalization: str = "robust"
    mode: str = "calibrate"  # calibrate | stream
    train_fraction: float = 0.7
    kappa: float = 10.0
    n0: int = 0  # 0: derived from train_fraction
    ridge: float = 0.0
    seed: int = 0
    n: int = 1000
    hurst: float = 0.3
    data: str = ""  # CSV (t, value) replacing the synthetic forcing
    lift_iters: int = 10
    lift_grad: str = "tape"
    lift_hidden: str = "32,32,16"
    gamma: float = 10.0  # Duffing cubic coefficient
    path_scale: float = 1.0  # multiplies the non-time channels of the signature path
    baseline: bool = True  # also run the un-lifted (or pointwise) comparison
    plot: bool = True
    output_dir: str = "out"

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise InvalidInputError(f"unknown benchmark {self.benchmark!r}; known: {', '.join(BENCHMARKS)}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise InvalidInputError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.method not in ("I", "II"):
            raise InvalidInputError(f"method must be I or II, got {self.method!r}")
        if self.mode not in ("calibrate", "stream"):
            raise InvalidInputError(f"mode must be calibrate or stream, got {self.mode!r}")
        if self.kappa < 1:
            raise InvalidInputError("kappa must be >= 1 (use inf to never retrain)")
        parse_lift(self.lift)

    @property
    def hidden(self) -> tuple:
        return tuple(int(h) for h in self.lift_hidden.split(",") if h.strip())

    def window(self) -> int:
        """Initial training window n0 (nodes 0..n0)."""
        if self.n0 > 0:
            return self.n0
        return max(2, int(math.floor(self.train_fraction * (self.n - 1))))

    def digest(self) -> str:
        """Hash of every numerically relevant field (output location excluded)."""
        body = "\n".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items())
                         if k not in ("output_dir", "plot"))
        return hashlib.sha256(body.encode()).hexdigest()[:12]

    def as_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_lift(text: str):
    """``none`` -> ("none", None); ``time-power:0.3`` -> ("time-power", 0.3); ``nn:4`` -> ("nn", 4)."""
    kind, _, arg = text.partition(":")
    if kind == "none" and not arg:
        return "none", None
    try:
        if kind == "time-power":
            return kind, float(arg)
        if kind == "nn":
            dims = int(arg)
            if dims < 1:
                raise ValueError
            return kind, dims
    except ValueError:
        pass
    raise InvalidInputError(f"bad lift {text!r}; use none, time-power:<alpha> or nn:<dims>")


BENCHMARK_DEFAULTS = {
    "elcentro": dict(method="II", kernel="linear", depth=12, normalization="robust", n=401,
                     lift="none", mode="calibrate", n0=200, path_scale=0.1),
    "solow": dict(method="II", kernel="rbf", depth=3, normalization="none", n=300,
                  mode="calibrate", n0=50),
    "fbm-linear": dict(method="I", kernel="rbf", depth=3, n=1000, hurst=0.3, lift="nn:4",
                       mode="stream", ridge=1e-4),
    "duffing": dict(method="I", kernel="rbf", depth=2, n=500, hurst=0.4, lift="nn:3",
                    mode="stream", lift_iters=5),
    "arias": dict(method="I", kernel="rbf", depth=2, n=1000, hurst=0.2, lift="nn:2",
                  mode="calibrate", lift_iters=5),
    "kuramoto": dict(method="I", kernel="rbf", depth=2, n=1000, hurst=0.4, lift="nn:3",
                     mode="calibrate", lift_iters=3),
}


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise InvalidInputError(f"unknown config key {name!r}")
    kind = kinds[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise InvalidInputError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise InvalidInputError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip().replace("-", "_")
        try:
            out[key] = _coerce(key, val)
        except InvalidInputError as exc:
            raise InvalidInputError(f"{source}:{lineno}: {exc}") from None
    return out


def make_config(benchmark: str, values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Benchmark defaults, then file values, then overrides (raw strings are coerced)."""
    merged = dict(BENCHMARK_DEFAULTS.get(benchmark, {}))
    for src in (values or {}, overrides or {}):
        for k, v in src.items():
            k = k.replace("-", "_")
            merged[k] = _coerce(k, v) if isinstance(v, str) else v
    merged.pop("benchmark", None)
    return ExperimentConfig(benchmark=benchmark, **merged)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_pairs(fh.read(), str(path))
    if "benchmark" not in values:
        raise InvalidInputError(f"{path}: missing 'benchmark' key")
    return make_config(values.pop("benchmark"), values, overrides)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
