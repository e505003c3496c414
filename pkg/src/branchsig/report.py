"""Report and trace serialisation.

The report is ``key = value`` text. Everything above the ``[timing]`` line is
the deterministic body; runtime and wall-clock stamp follow it.
"""
from __future__ import annotations

import csv
import datetime as _dt
import os

import numpy as np

from .experiments import Report
from .lift import save_mlp

HEADER = "# branchsig report v1"


def _val(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def report_body(report: Report) -> str:
    lines = [HEADER, f"benchmark = {report.benchmark}", f"config_hash = {report.config_hash}"]
    lines += [f"config.{k} = {_val(v)}" for k, v in report.config.items()]
    lines += [f"metric.{k} = {_val(v)}" for k, v in sorted(report.metrics.items())]
    lines += [f"info.{k} = {_val(v)}" for k, v in sorted(report.info.items())]
    return "\n".join(lines) + "\n"


def report_text(report: Report, stamp: str | None = None) -> str:
    stamp = stamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return report_body(report) + f"[timing]\nruntime_s = {report.runtime_s!r}\nwritten = {stamp}\n"


def _parse_scalar(text: str):
    if text in ("true", "false"):
        return text == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_report(text: str) -> Report:
    """Inverse of :func:`report_text` (the trace is not part of the text)."""
    fields = {"config": {}, "metric": {}, "info": {}}
    top = {}
    for line in text.splitlines():
        if not line or line.startswith("#") or line == "[timing]":
            continue
        key, _, val = line.partition(" = ")
        group, dot, rest = key.partition(".")
        if dot and group in fields:
            fields[group][rest] = _parse_scalar(val)
        else:
            top[key] = val
    return Report(top["benchmark"], top["config_hash"], fields["config"],
                  {k: float(v) for k, v in fields["metric"].items()}, fields["info"],
                  float(top.get("runtime_s", 0.0)))


def write_trace(report: Report, path) -> None:
    cols = list(report.trace)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols or ["t", "f_true", "f_hat", "u_ref", "u_hat"])
        if cols:
            for row in zip(*(np.asarray(report.trace[c]) for c in cols)):
                w.writerow([repr(float(v)) for v in row])


def write_report(report: Report, directory, plot: bool = False) -> dict:
    """Write ``<benchmark>-<hash>.txt`` and ``...-trace.csv``, a ``...-<variant>-mlp.txt``
    checkpoint per trained lift, and a PNG when asked."""
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f"{report.benchmark}-{report.config_hash}")
    paths = {"report": stem + ".txt", "trace": stem + "-trace.csv"}
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write(report_text(report))
    write_trace(report, paths["trace"])
    for variant, theta in getattr(report, "lifts", {}).items():
        paths[f"lift.{variant}"] = f"{stem}-{variant}-mlp.txt"
        save_mlp(theta, paths[f"lift.{variant}"])
    if plot and report.trace:
        from .plotting import plot_trace

        paths["figure"] = stem + ".png"
        plot_trace(report, paths["figure"])
    return paths
