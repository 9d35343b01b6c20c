"""Figure rendering for sweep reports and sampler traces.

Renders the plot-ready data the CLI also writes as CSV: metric heatmaps
over the (timestep, layer) grid, the positional-bias map, the attention
mass curve, and guidance activity traces. Uses the Agg backend and strips
the PNG software stamp so rerunning a command reproduces identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import SweepReport  # noqa: E402

PNG_METADATA = {"Software": None}
_METRICS = (("accuracy", "matching accuracy"), ("confidence", "confidence"),
            ("attention", "attention score"), ("harmonic", "harmonic mean"))


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _heatmap(ax, grid: np.ndarray, ts: list[int], ls: list[int], title: str):
    im = ax.imshow(grid, aspect="auto", origin="lower", cmap="viridis",
                   interpolation="nearest")
    ax.set_xticks(range(len(ls)), [str(v) for v in ls])
    step = max(1, len(ts) // 10)
    ax.set_yticks(range(0, len(ts), step), [str(v) for v in ts[::step]])
    ax.set_xlabel("layer")
    ax.set_ylabel("timestep")
    ax.set_title(title, fontsize=10)
    return im


def render_sweep_figures(report: SweepReport, outdir) -> list[Path]:
    """One metrics panel per representation kind, plus diagnostics figures."""
    outdir = Path(outdir)
    written = []
    for kind in report.kinds():
        fig, axes = plt.subplots(1, 4, figsize=(13, 3.2), constrained_layout=True)
        for ax, (metric, title) in zip(axes, _METRICS):
            grid, ts, ls = report.grid(kind, metric)
            im = _heatmap(ax, grid, ts, ls, title)
            fig.colorbar(im, ax=ax, shrink=0.85)
        fig.suptitle(f"{kind} matching over the (timestep, layer) grid")
        written.append(_save(fig, outdir / f"sweep_{kind.replace('-', '_')}.png"))

    bias = report.diagnostics.get("positional_bias", [])
    if bias:
        ts = sorted({row["t"] for row in bias})
        ls = sorted({row["l"] for row in bias})
        grid = np.full((len(ts), len(ls)), np.nan)
        for row in bias:
            grid[ts.index(row["t"]), ls.index(row["l"])] = row["value"]
        fig, ax = plt.subplots(figsize=(4.2, 3.4), constrained_layout=True)
        im = _heatmap(ax, grid, ts, ls, "same-location argmax fraction")
        fig.colorbar(im, ax=ax)
        written.append(_save(fig, outdir / "positional_bias.png"))

    curve = report.diagnostics.get("attention_curve", [])
    if curve:
        fig, ax = plt.subplots(figsize=(5.0, 3.4), constrained_layout=True)
        ts = [row["t"] for row in curve]
        for key, label in (("self_frame", "self-frame"), ("cross_frame", "cross-frame"),
                           ("text", "text")):
            ax.plot(ts, [row[key] for row in curve], marker="o", label=label)
        ax.set_xlabel("timestep")
        ax.set_ylabel("attention mass at start points")
        ax.set_ylim(0, 1)
        ax.legend()
        ax.grid(alpha=0.3)
        written.append(_save(fig, outdir / "attention_curve.png"))
    return written


def render_trace_figure(trace: np.ndarray, schedule_steps: int, outdir) -> Path:
    """Guidance activity |clean - perturbed| per sampling step."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2), constrained_layout=True)
    ts = list(range(schedule_steps, 0, -1))
    ax.plot(ts, trace, marker=".")
    ax.set_xlabel("timestep (sampling order)")
    ax.set_ylabel("guidance activity")
    ax.invert_xaxis()
    ax.grid(alpha=0.3)
    return _save(fig, Path(outdir) / "guidance_activity.png")


def render_eval_figure(table: dict[str, float], outdir) -> Path:
    """Bar chart of the per-threshold tracking accuracies."""
    labels = [k for k in table if k != "delta_avg"]
    fig, ax = plt.subplots(figsize=(4.6, 3.2), constrained_layout=True)
    ax.bar(labels, [table[k] for k in labels], color="tab:blue")
    ax.axhline(table["delta_avg"], color="tab:red", linestyle="--",
               label=f"average {table['delta_avg']:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction correct")
    ax.legend()
    return _save(fig, Path(outdir) / "tracking_accuracy.png")
