"""Plot-ready CSV extracts from datasets and merge reports, with rendered figures.

Each kind produces one delimited file and one PNG next to it. The CSV is the
interface; the figure is a convenience rendering of exactly the same rows.
Writes go through a temp file and rename so a failed run leaves nothing
half-written.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .knowledge import FeatureSpec, featurize
from .study_runner import Dataset, relative_performance, success_rate
from .study_runner import _fmt as _float_fmt

PLOT_KINDS = (
    "feature-scatter",
    "relative-performance",
    "endurance-vs-meanload",
    "success-rate",
    "regret-histogram",
)

# relative-performance facets at most this many configurations; the CSV always
# carries all of them.
_MAX_FACETS = 16


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return _float_fmt(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_atomic(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---- row builders -----------------------------------------------------------------


def feature_scatter_rows(ds: Dataset, spec: FeatureSpec | None = None):
    """One row per valid sample: load-fraction features and the winning config."""
    spec = (spec or FeatureSpec()).validate()
    header = [f"D_{i + 1}" for i in range(spec.n_features(ds.spec.n_nodes))] + ["label"]
    rows = [
        list(featurize(r.loads, spec)) + [int(r.label)] for r in ds.valid_records()
    ]
    return header, rows


def relative_performance_rows(ds: Dataset, spec: FeatureSpec | None = None):
    """J_i / J_best per (valid sample, configuration), keyed by features."""
    spec = (spec or FeatureSpec()).validate()
    n_conf = len(ds.configs)
    valid = ds.valid_records()
    ratios = np.column_stack(
        [relative_performance(ds, i) for i in range(n_conf)]
    ) if valid else np.zeros((0, n_conf))
    header = [f"D_{i + 1}" for i in range(spec.n_features(ds.spec.n_nodes))] + [
        "config",
        "ratio",
    ]
    rows = []
    for row, r in enumerate(valid):
        feats = list(featurize(r.loads, spec))
        for i in range(n_conf):
            rows.append(feats + [i, float(ratios[row, i])])
    return header, rows


def endurance_vs_meanload_rows(ds: Dataset):
    """n_conf rows per sample: mean load, per-config objective, best marker."""
    header = ["mean_load", "config", "J", "is_best"]
    rows = []
    for r in ds.records:
        mean_load = float(np.mean(r.loads))
        for i in range(len(ds.configs)):
            rows.append([mean_load, i, float(r.objectives[i]), int(i == r.label)])
    return header, rows


def success_rate_rows(ds: Dataset):
    header = ["config", "success_rate"]
    rates = success_rate(ds)
    return header, [[i, float(v)] for i, v in enumerate(rates)]


def regret_histogram_rows(regrets, n_bins: int = 10):
    """Counts over n_bins equal bins spanning [0, 1]."""
    if n_bins < 1:
        raise ValidationError(f"n_bins must be >= 1, got {n_bins}")
    values = np.asarray(list(regrets), dtype=float)
    if values.size == 0:
        raise ValidationError("no regret values to bin")
    if not np.all(np.isfinite(values)):
        raise ValidationError("regrets must be finite")
    if values.min() < -1e-9 or values.max() > 1 + 1e-9:
        raise ValidationError("regrets must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=edges)
    header = ["bin_lo", "bin_hi", "count"]
    rows = [
        [float(edges[b]), float(edges[b + 1]), int(counts[b])] for b in range(n_bins)
    ]
    return header, rows


# ---- figure rendering -------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _columns(header, rows) -> dict[str, np.ndarray]:
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def render_figure(kind: str, header, rows, png_path: str) -> None:
    """Draw the kind's standard figure from its own CSV rows."""
    plt = _pyplot()
    col = _columns(header, rows)
    layout = True
    # two-node studies have a single fraction feature; fall back to it
    d2 = col.get("D_2")
    if kind == "feature-scatter":
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        y = d2 if d2 is not None else col["label"]
        sc = ax.scatter(col["D_1"], y, c=col["label"], cmap="tab20", s=18)
        ax.set_xlabel("$D_1$")
        ax.set_ylabel("$D_2$" if d2 is not None else "best configuration")
        fig.colorbar(sc, ax=ax, label="best configuration")
        ax.set_title("best configuration over load fractions")
    elif kind == "relative-performance":
        configs = np.unique(col["config"]).astype(int)
        shown = configs[:_MAX_FACETS]
        ncols = min(4, len(shown))
        nrows = -(-len(shown) // ncols)
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(3.0 * ncols, 2.6 * nrows), squeeze=False
        )
        vmin = float(col["ratio"].min()) if col["ratio"].size else 0.0
        sc = None
        for ax, i in zip(axes.flat, shown):
            mask = col["config"] == i
            y = d2[mask] if d2 is not None else col["ratio"][mask]
            sc = ax.scatter(
                col["D_1"][mask],
                y,
                c=col["ratio"][mask],
                cmap="viridis",
                vmin=vmin,
                vmax=1.0,
                s=10,
            )
            ax.set_title(f"config {i}", fontsize=9)
        for ax in axes.flat[len(shown):]:
            ax.set_axis_off()
        if sc is not None:
            fig.colorbar(sc, ax=axes, label="J / J_best", shrink=0.8)
        layout = False  # colorbar spans the grid; tight_layout would fight it
    elif kind == "endurance-vs-meanload":
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        ax.scatter(col["mean_load"], col["J"], s=10, c="0.7", label="all configs")
        best = col["is_best"] > 0
        ax.scatter(
            col["mean_load"][best], col["J"][best], s=16, c="C3", label="best config"
        )
        ax.set_xlabel("mean load (kW)")
        ax.set_ylabel("endurance (s)")
        ax.legend()
    elif kind == "success-rate":
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        ax.bar(col["config"], col["success_rate"], width=0.8)
        ax.set_xlabel("configuration")
        ax.set_ylabel("success rate")
        ax.set_ylim(0, 1)
    elif kind == "regret-histogram":
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        width = col["bin_hi"] - col["bin_lo"]
        ax.bar(col["bin_lo"], col["count"], width=width, align="edge", edgecolor="k")
        ax.set_xlabel("normalized regret")
        ax.set_ylabel("count")
        ax.set_xlim(0, 1)
    else:
        raise ValidationError(f"unknown plot kind {kind!r}")
    if layout:
        fig.tight_layout()
    tmp = png_path + ".tmp"
    fig.savefig(tmp, dpi=120, format="png", metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, png_path)


def plot_rows(kind: str, source, feature_spec: FeatureSpec | None = None, n_bins: int = 10):
    """Rows for one kind. `source` is a Dataset, or regret values for the histogram."""
    if kind == "feature-scatter":
        return feature_scatter_rows(source, feature_spec)
    if kind == "relative-performance":
        return relative_performance_rows(source, feature_spec)
    if kind == "endurance-vs-meanload":
        return endurance_vs_meanload_rows(source)
    if kind == "success-rate":
        return success_rate_rows(source)
    if kind == "regret-histogram":
        return regret_histogram_rows(source, n_bins)
    raise ValidationError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")


def write_plot_data(
    kind: str,
    source,
    out_dir: str,
    stem: str | None = None,
    feature_spec: FeatureSpec | None = None,
    n_bins: int = 10,
) -> list[str]:
    """Write `<stem>.csv` and `<stem>.png` under out_dir; returns both paths."""
    header, rows = plot_rows(kind, source, feature_spec=feature_spec, n_bins=n_bins)
    os.makedirs(out_dir, exist_ok=True)
    stem = stem or kind
    csv_path = os.path.join(out_dir, stem + ".csv")
    png_path = os.path.join(out_dir, stem + ".png")
    write_atomic(csv_path, csv_text(header, rows))
    render_figure(kind, header, rows, png_path)
    return [csv_path, png_path]
