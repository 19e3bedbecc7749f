"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from .schedule import TIMELINE_KINDS, timeline_points  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "lines.markersize": 4,
}
# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)


def plot_bench(report, path) -> None:
    """Mean TV (+/- one std over seeds) against step count, one line per sampler."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.4))
        ax = fig.add_subplot()
        by_sampler: dict = {}
        for row in report.summary():
            by_sampler.setdefault(row["sampler"], []).append(row)
        for name, rows in sorted(by_sampler.items()):
            rows.sort(key=lambda r: r["K"])
            ks = [r["K"] for r in rows]
            ax.errorbar(ks, [r["tv_mean"] for r in rows], yerr=[r["tv_std"] for r in rows],
                        marker="o", capsize=2, label=name)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("sampling steps K")
        ax.set_ylabel("total variation to data")
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)


def plot_sweep(rows, path) -> None:
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(7.0, 2.8))
        axes = fig.subplots(1, 3)
        ms = [r["m"] for r in rows]
        for ax, key, label in zip(axes, ("tv", "entropy", "final_loss"),
                                  ("total variation", "entropy (nats)", "final training loss")):
            ax.plot(ms, [r[key] for r in rows], marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("noise capacity m")
            ax.set_ylabel(label)
        _save(fig, path)


def plot_timelines(K: int, path) -> None:
    """Reverse-time discretization for every timeline kind."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(4.0, 3.0))
        ax = fig.add_subplot()
        for kind in TIMELINE_KINDS:
            pts = timeline_points(K, kind).points
            ax.plot(range(1, K + 2), pts, marker="o", label=kind)
        ax.set_xlabel("step k")
        ax.set_ylabel("t")
        ax.legend(frameon=False)
        _save(fig, path)
