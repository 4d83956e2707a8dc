"""Learning-curve aggregation over metrics files, with rendered figures.

Aggregation reduces each run to non-overlapping episode windows with median
cost and latency ratios, written as one plot-ready CSV. The same series are
also rendered to PNG files next to the CSV so a run can be eyeballed without
any extra tooling.
"""

from __future__ import annotations

import os
import statistics

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ConfigError
from .metrics import Metrics, read_metrics_csv
from .serialize import digest

REPORT_HEADER = ("run,window_end_episode,episodes,median_cost_ratio,"
                 "median_latency_ratio,timeout_fraction")


def _run_label(path: str) -> str:
    """Series label for a metrics file; generically named files (the usual
    run-directory metrics.csv) are labelled by their run directory."""
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem != "metrics":
        return stem
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parent or stem


def aggregate_runs(metrics_by_run: dict[str, Metrics],
                   window: int = 100) -> list[dict]:
    """Windowed medians per run; one output row per full or trailing window."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    rows = []
    for run in sorted(metrics_by_run):
        records = metrics_by_run[run].records
        for lo in range(0, len(records), window):
            chunk = records[lo:lo + window]
            rows.append({
                "run": run,
                "window_end_episode": chunk[-1].episode,
                "episodes": len(chunk),
                "median_cost_ratio": statistics.median(
                    r.cost_ratio for r in chunk),
                "median_latency_ratio": statistics.median(
                    r.latency_ratio for r in chunk),
                "timeout_fraction": sum(r.timeout_flag for r in chunk) / len(chunk),
            })
    return rows


def write_report_csv(rows: list[dict], path: str, config_digest: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# planlab_report format_version=1 config_digest={config_digest}\n")
        fh.write(REPORT_HEADER + "\n")
        for row in rows:
            fh.write(",".join([
                row["run"], str(row["window_end_episode"]),
                str(row["episodes"]), repr(row["median_cost_ratio"]),
                repr(row["median_latency_ratio"]), repr(row["timeout_fraction"]),
            ]) + "\n")


def render_learning_curves(rows: list[dict], path: str) -> None:
    """One PNG with cost-ratio curves (left) and latency-ratio curves (right)."""
    runs = sorted({row["run"] for row in rows})
    fig, (ax_cost, ax_lat) = plt.subplots(1, 2, figsize=(11, 4.2))
    for run in runs:
        series = [row for row in rows if row["run"] == run]
        episodes = [row["window_end_episode"] for row in series]
        ax_cost.plot(episodes, [row["median_cost_ratio"] for row in series],
                     marker=".", label=run)
        ax_lat.plot(episodes, [row["median_latency_ratio"] for row in series],
                    marker=".", label=run)
    for ax, title in ((ax_cost, "cost ratio vs expert"),
                      (ax_lat, "latency ratio vs expert")):
        ax.axhline(1.0, color="grey", lw=0.8, ls="--")
        ax.set_xlabel("episode")
        ax.set_ylabel("windowed median")
        ax.set_title(title)
        ax.set_yscale("log")
    ax_cost.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(metrics_paths: list[str], out_csv: str, window: int = 100,
                 figure_path: str | None = None) -> list[dict]:
    """Aggregate one or more metrics files and render the figure alongside."""
    if not metrics_paths:
        raise ConfigError("at least one metrics file is required")
    metrics_by_run = {}
    for path in metrics_paths:
        run = _run_label(path)
        if run in metrics_by_run:
            run = f"{run}:{len(metrics_by_run)}"
        metrics_by_run[run] = read_metrics_csv(path)
    rows = aggregate_runs(metrics_by_run, window=window)
    write_report_csv(rows, out_csv,
                     config_digest=digest({"window": window,
                                           "inputs": sorted(metrics_by_run)}))
    if figure_path is None:
        figure_path = os.path.splitext(out_csv)[0] + ".png"
    render_learning_curves(rows, figure_path)
    return rows
