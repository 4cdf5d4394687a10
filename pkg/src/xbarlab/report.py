"""Tidy CSV exports and rendered figures for the standard result plots.

Each figure id maps a run record's series to one flat CSV and one PNG:

  fig2  programmed-weight distortion     (bin_center, count_pre, count_post)
  fig4  accuracy vs modeled device time  (arm, modeled_time, accuracy)
  fig7  L and C vs pruning threshold     (theta, layer, L, C)
  fig9  learned layer widths             (layer, seed_width, peak_width, final_width)

Rendering uses the non-interactive Agg backend so exports work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .experiments import RunRecord, atomic_write_text, rows_to_csv_text

FIGURE_COLUMNS = {
    "fig2": ["bin_center", "count_pre", "count_post"],
    "fig4": ["arm", "modeled_time", "accuracy"],
    "fig7": ["theta", "layer", "L", "C"],
    "fig9": ["layer", "seed_width", "peak_width", "final_width"],
}


class MissingSeriesError(KeyError):
    pass


def export_plot_data(record: RunRecord, figure_id: str) -> list[dict]:
    """Rows for one figure, restricted to its documented column schema."""
    if figure_id not in FIGURE_COLUMNS:
        raise MissingSeriesError(f"unknown figure id {figure_id!r}; "
                                 f"known: {sorted(FIGURE_COLUMNS)}")
    if figure_id not in record.series:
        raise MissingSeriesError(
            f"record (kind={record.config.get('kind')!r}) holds no series "
            f"{figure_id!r}; available: {sorted(record.series)}")
    cols = FIGURE_COLUMNS[figure_id]
    return [{c: row[c] for c in cols} for row in record.series[figure_id]]


def _render_fig2(rows, ax):
    centers = [r["bin_center"] for r in rows]
    width = (centers[1] - centers[0]) if len(centers) > 1 else 0.1
    ax.bar(centers, [r["count_pre"] for r in rows], width=width,
           alpha=0.6, label="pre-write")
    ax.bar(centers, [r["count_post"] for r in rows], width=width,
           alpha=0.6, label="post-write")
    ax.set_xlabel("weight value")
    ax.set_ylabel("cells")
    ax.set_title("Parameter distortion after programming")
    ax.legend()


def _render_fig4(rows, ax):
    for arm, marker in (("rsa", "o-"), ("rvw", "s")):
        pts = sorted([r for r in rows if r["arm"] == arm], key=lambda r: r["modeled_time"])
        if pts:
            ax.plot([r["modeled_time"] for r in pts], [r["accuracy"] for r in pts],
                    marker, label=arm.upper())
    ax.set_xscale("symlog", linthresh=1e-6)
    ax.set_xlabel("modeled device time (s)")
    ax.set_ylabel("accuracy")
    ax.set_title("Accuracy recovery vs device time")
    ax.legend()


def _render_fig7(rows, ax):
    layers = sorted({r["layer"] for r in rows})
    ax2 = ax.twinx()
    for layer in layers:
        series = [r for r in rows if r["layer"] == layer]
        rounds = range(len(series))
        ax.plot(rounds, [r["L"] for r in series], "o-", label=f"L layer {layer}")
        ax2.plot(rounds, [r["C"] for r in series], "s--", alpha=0.6,
                 label=f"C layer {layer}")
    ax.set_xlabel("pruning round")
    ax.set_ylabel("characteristic path length L")
    ax2.set_ylabel("clustering coefficient C")
    ax.set_title("Structure metrics across the pruning schedule")
    ax.legend(loc="upper right", fontsize=8)
    ax2.legend(loc="lower left", fontsize=8)


def _render_fig9(rows, ax):
    layers = [r["layer"] for r in rows]
    width = 0.27
    for off, key in ((-1, "seed_width"), (0, "peak_width"), (1, "final_width")):
        ax.bar([l + off * width for l in layers], [r[key] for r in rows],
               width=width, label=key.replace("_", " "))
    ax.set_xticks(layers)
    ax.set_xlabel("hidden layer")
    ax.set_ylabel("units")
    ax.set_title("Learned layer widths")
    ax.legend()


_RENDERERS = {"fig2": _render_fig2, "fig4": _render_fig4,
              "fig7": _render_fig7, "fig9": _render_fig9}


def render_figure(figure_id: str, rows: list[dict], out_png: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        _RENDERERS[figure_id](rows, ax)
        fig.tight_layout()
        fig.savefig(out_png, dpi=120)
    finally:
        plt.close(fig)


def export_figure(record: RunRecord, figure_id: str, out_dir) -> dict[str, str]:
    """Write <figure_id>.csv and <figure_id>.png; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = export_plot_data(record, figure_id)
    csv_path = out_dir / f"{figure_id}.csv"
    atomic_write_text(csv_path, rows_to_csv_text(rows))
    png_path = out_dir / f"{figure_id}.png"
    render_figure(figure_id, rows, png_path)
    return {"csv": str(csv_path), "png": str(png_path)}
