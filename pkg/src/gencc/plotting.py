"""Figures written next to the CSV/JSON results."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import SatisfactionReport  # noqa: E402
from .netsim import RunTrace  # noqa: E402

FIG_SIZE = (7.0, 4.0)
DPI = 120


def _finish(fig, ax, path) -> Path:
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_rates(trace: RunTrace, path, window_ms: float = 200.0) -> Path:
    """Delivered rate of every flow over time, with its [a, b] band."""
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    per_bin = max(1, int(round(window_ms / trace.bin_ms)))
    bits = trace.link.packet_bits
    for i, flow in enumerate(trace.flows):
        bins = flow.delivered_bins
        times, rates = [], []
        for lo in range(0, len(bins), per_bin):
            chunk = bins[lo:lo + per_bin]
            times.append((lo + len(chunk) / 2) * trace.bin_ms / 1000.0)
            rates.append(sum(chunk) * bits / (len(chunk) * trace.bin_ms * 1000.0))
        (line,) = ax.plot(times, rates, lw=1.2, label=f"#{i}")
        a, b = flow.requirement
        ax.axhspan(a, b, color=line.get_color(), alpha=0.08)
    ax.axhline(trace.link.capacity, color="k", ls="--", lw=0.8, label="capacity")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("delivered rate (Mbps)")
    ax.set_title(f"seed {trace.seed}")
    ax.legend(fontsize=8, ncol=3)
    return _finish(fig, ax, path)


def plot_satisfaction(report: SatisfactionReport, path) -> Path:
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    idx = list(range(len(report.per_connection)))
    ax.bar(idx, report.per_connection, color="tab:blue", alpha=0.8)
    ax.axhline(report.optimal_min_satisfaction, color="tab:red", ls="--", label="optimal min")
    ax.axhline(report.mean_min_satisfaction, color="tab:green", ls=":", label="mean min")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"#{i}" for i in idx])
    ax.set_xlabel("connection")
    ax.set_ylabel("satisfaction ratio")
    ax.legend(fontsize=8)
    return _finish(fig, ax, path)


def plot_best_curve(curve: list[float], optimal: float, path) -> Path:
    fig, ax = plt.subplots(figsize=FIG_SIZE)
    ax.step(range(len(curve)), curve, where="post", color="tab:blue", label="best so far")
    ax.axhline(optimal, color="tab:red", ls="--", label="optimal")
    ax.set_xlabel("generation")
    ax.set_ylabel("mean worst-case satisfaction")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=8)
    return _finish(fig, ax, path)
