"""Matplotlib figures for run and sweep reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (("explored_volume", "explored volume [m$^3$]"),
          ("objects_found_pct", "objects found [%]"),
          ("obj_within_dist_pct", "object voxels within $d_{obj}$ [%]"),
          ("bg_within_dist_pct", "background voxels within $d_{bg}$ [%]"))


def render_report(rows, out_dir, name: str = "report.png") -> Path:
    """One figure with the main time series of a run."""
    out = Path(out_dir) / name
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    t = [r["sim_time"] for r in rows]
    for ax, (key, label) in zip(axes.ravel(), PANELS):
        ax.plot(t, [r[key] for r in rows], lw=1.5)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    for ax in axes[-1]:
        ax.set_xlabel("simulated time [s]")
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def render_comparison(runs: dict, out_dir, name: str = "comparison.png") -> Path:
    """Overlay the time series of several labelled runs (e.g. semantic vs classic)."""
    out = Path(out_dir) / name
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for n, (label, series) in enumerate(runs.items()):
        for k, rows in enumerate(series):
            t = [r["sim_time"] for r in rows]
            for ax, (key, _) in zip(axes.ravel(), PANELS):
                ax.plot(t, [r[key] for r in rows], color=colours[n % len(colours)], alpha=0.6,
                        lw=1.0, label=label if k == 0 else None)
    for ax, (_, ylabel) in zip(axes.ravel(), PANELS):
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
    axes[0, 0].legend()
    for ax in axes[-1]:
        ax.set_xlabel("simulated time [s]")
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
