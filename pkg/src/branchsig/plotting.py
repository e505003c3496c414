"""Static figures of experiment traces (files only, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _columns(trace: dict, prefix: str) -> list[str]:
    if prefix in trace:
        return [prefix]
    return sorted(k for k in trace if k.startswith(prefix + "_"))


def plot_trace(report, path) -> None:
    """Forcing fit (top) and solution fit (bottom) of the primary variant."""
    tr = report.trace
    t = np.asarray(tr["t"])
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    for ax, truth, fit, title in ((axes[0], "f_true", "f_hat", "forcing"),
                                  (axes[1], "u_ref", "u_hat", "solution")):
        for a, b in zip(_columns(tr, truth), _columns(tr, fit)):
            ax.plot(t, tr[a], lw=1.0, color="0.3", label=a)
            ax.plot(t, tr[b], lw=1.0, ls="--", label=b)
        ax.set_ylabel(title)
        ax.legend(loc="best", fontsize=7)
    n0 = report.info.get("n0")
    if n0:
        for ax in axes:
            ax.axvline(t[min(int(n0), len(t) - 1)], color="k", lw=0.6, ls=":")
    axes[1].set_xlabel("t")
    fig.suptitle(f"{report.benchmark} ({report.config_hash})")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_speedup(rows, path) -> None:
    """Log-log wall times of naive vs streamed prefix signatures."""
    N = [r["N"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(N, [r["naive_s"] for r in rows], "o-", label="naive per-prefix")
    ax.loglog(N, [r["streamed_s"] for r in rows], "s-", label="streamed")
    ax.set_xlabel("N")
    ax.set_ylabel("seconds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
