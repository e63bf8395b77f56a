"""Figure rendering for finished experiment runs.

Reads the delimited outputs a run leaves behind (``plotdata.csv`` plus the
``config.json`` echo) and renders one PNG per metric into the same directory,
so a run folder carries both the machine-readable series and the pictures.
Rendering is opt-in through the ``report`` subcommand; experiments themselves
never import matplotlib.
"""

from __future__ import annotations

import json
import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import KIND_LEVEL_STATS, KIND_NOISE_SWEEP, KIND_QUENCH_SIZE, \
    KIND_QUENCH_TIME, PlotRow, read_plotdata_csv

X_LABELS = {
    KIND_LEVEL_STATS: "transverse field / interaction rms",
    KIND_QUENCH_SIZE: "visible units",
    KIND_QUENCH_TIME: "evolution time",
    KIND_NOISE_SWEEP: "coherence time",
}

SERIES_COLORS = {
    "quench": "tab:blue",
    "quench+noise": "tab:purple",
    "exact-gibbs": "tab:orange",
    "rbm": "tab:green",
    "kl-ratio": "tab:red",
}


def split_series(rows) -> dict:
    """Group plot rows as {metric: {series_name: [rows]}}.

    Aggregate rows carry a compound series label ``name:metric``; a label
    without the separator is kept whole as the series name with an empty
    metric bucket name.
    """
    out: dict = {}
    for row in rows:
        name, sep, metric = row.series.rpartition(":")
        if not sep:
            name, metric = row.series, ""
        out.setdefault(metric, {}).setdefault(name, []).append(row)
    return out


def _finite(rows) -> list:
    return [r for r in rows if not math.isnan(r.x)]


def _reference(rows) -> list:
    return [r for r in rows if math.isnan(r.x)]


def _use_log_x(xs) -> bool:
    xs = [x for x in xs if x > 0]
    return len(xs) >= 3 and max(xs) / min(xs) >= 10.0


def render_metric(ax, metric: str, by_series: dict, x_label: str) -> None:
    xs_all = []
    for name in sorted(by_series):
        rows = sorted(_finite(by_series[name]), key=lambda r: r.x)
        color = SERIES_COLORS.get(name)
        if rows:
            xs = [r.x for r in rows]
            xs_all += xs
            ax.errorbar(xs, [r.y for r in rows], yerr=[r.yerr for r in rows],
                        marker="o", capsize=3, label=name, color=color)
        for ref in _reference(by_series[name]):
            # reference arms are swept over nothing; draw them as flat guides
            ax.axhline(ref.y, linestyle="--", color=color, label=f"{name} (ref)")
            if ref.yerr:
                ax.axhspan(ref.y - ref.yerr, ref.y + ref.yerr, color=color,
                           alpha=0.15, linewidth=0)
    if _use_log_x(xs_all):
        ax.set_xscale("log")
    ax.set_xlabel(x_label)
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)


def render_run(run_dir: str, out_dir: str | None = None) -> list:
    """Render every metric in ``run_dir/plotdata.csv`` to a PNG.

    Returns the written file paths. ``out_dir`` defaults to the run directory
    itself so figures land alongside the delimited output.
    """
    plot_path = os.path.join(run_dir, "plotdata.csv")
    if not os.path.exists(plot_path):
        raise FileNotFoundError(f"no plotdata.csv under {run_dir!r}")
    with open(os.path.join(run_dir, "config.json"), encoding="utf-8") as fh:
        echo = json.load(fh)
    kind = echo["config"]["kind"]
    x_label = X_LABELS.get(kind, "visible units")
    rows = read_plotdata_csv(plot_path)
    out_dir = run_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for metric, by_series in sorted(split_series(rows).items()):
        fig, ax = plt.subplots(figsize=(5.2, 3.6), layout="constrained")
        render_metric(ax, metric, by_series, x_label)
        ax.set_title(f"{kind}  [{echo['config_hash'][:12]}]", fontsize=9)
        path = os.path.join(out_dir, f"{kind}_{metric or 'series'}.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
