"""Static figures from the analysis and sweep CSVs.

Each CSV kind is recognized by its header row. Plots are written to files only.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidInputError  # noqa: E402

SCATTER_HEADER = ["rank", "ci_base", "ci_new"]
HIST_HEADER = ["bin_lo", "bin_hi", "count"]
SWEEP_HEADER = ["axis", "value", "method", "base_acc", "new_acc", "harmonic", "n_seeds"]


class CsvParseError(InvalidInputError):
    def __init__(self, path, row, message):
        super().__init__(f"{path}: row {row}: {message}")
        self.row = row


def _parse_float(text, path, row, column):
    try:
        return float(text)
    except ValueError:
        raise CsvParseError(path, row, f"column {column!r} is not a number: {text!r}") from None


def read_table(path):
    """Return ``(kind, rows)``; numeric columns become floats.

    Row numbers in errors count the header as row 1.
    """
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    if not lines or not any(cell.strip() for cell in lines[0]):
        raise InvalidInputError(f"{path}: empty CSV, nothing to plot")
    header = [c.strip() for c in lines[0]]
    kinds = {tuple(SCATTER_HEADER): "scatter", tuple(HIST_HEADER): "hist",
             tuple(SWEEP_HEADER): "sweep"}
    kind = kinds.get(tuple(header))
    if kind is None:
        raise CsvParseError(path, 1, f"unrecognized header {header}")
    text_cols = {"axis", "method"}
    rows = []
    for i, cells in enumerate(lines[1:], start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise CsvParseError(path, i, f"expected {len(header)} fields, found {len(cells)}")
        rows.append({h: (c if h in text_cols else _parse_float(c, path, i, h))
                     for h, c in zip(header, cells)})
    if not rows:
        raise InvalidInputError(f"{path}: CSV has a header but no data rows")
    return kind, rows


def _save(fig, out_path):
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_scatter(rows, out_path, title="CI reordered by base task"):
    fig, ax = plt.subplots(figsize=(6, 4))
    rank = [r["rank"] for r in rows]
    ax.scatter(rank, [r["ci_base"] for r in rows], s=12, label="base task")
    ax.scatter(rank, [r["ci_new"] for r in rows], s=12, label="new task")
    ax.set_xlabel("channel (sorted by base CI)")
    ax.set_ylabel("channel importance")
    ax.set_title(title)
    ax.legend()
    _save(fig, out_path)


def plot_histogram(rows, out_path, title="CI-Base : CI-New"):
    fig, ax = plt.subplots(figsize=(6, 4))
    finite = [r for r in rows if r["bin_hi"] != float("inf")]
    ax.bar([r["bin_lo"] for r in finite], [r["count"] for r in finite],
           width=[r["bin_hi"] - r["bin_lo"] for r in finite], align="edge", edgecolor="k")
    overflow = [r for r in rows if r["bin_hi"] == float("inf")]
    if overflow and overflow[0]["count"]:
        ax.annotate(f"> {overflow[0]['bin_lo']:g}: {int(overflow[0]['count'])}",
                    xy=(0.98, 0.95), xycoords="axes fraction", ha="right", va="top")
    ax.axvline(1.0, color="r", linestyle="--", linewidth=1)
    ax.set_xlabel("ratio")
    ax.set_ylabel("channels")
    ax.set_title(title)
    _save(fig, out_path)


def plot_sweep(rows, out_path):
    axes = {r["axis"] for r in rows}
    if len(axes) != 1:
        raise InvalidInputError(f"sweep CSV mixes axes {sorted(axes)}")
    axis = axes.pop()
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    metrics = (("harmonic", "H"), ("base_acc", "base"), ("new_acc", "new"))
    if axis == "shots":
        values = sorted({r["value"] for r in rows})
        width = 0.8 / len(methods)
        for k, method in enumerate(methods):
            by_value = {r["value"]: r["harmonic"] for r in rows if r["method"] == method}
            xs = [i + k * width for i in range(len(values))]
            ax.bar(xs, [by_value.get(v, float("nan")) for v in values], width=width, label=method)
        ax.set_xticks([i + width * (len(methods) - 1) / 2 for i in range(len(values))])
        ax.set_xticklabels([f"{int(v)}" for v in values])
        ax.set_ylabel("harmonic mean (%)")
    else:
        for method in methods:
            sub = sorted((r for r in rows if r["method"] == method), key=lambda r: r["value"])
            for k, (key, label) in enumerate(metrics):
                ys = [r[key] for r in sub]
                if axis == "lambda" and len(sub) == 1:
                    # a single row is a lambda-free baseline
                    ax.axhline(ys[0], color=f"C{k}", linestyle=":", linewidth=1,
                               label=f"{method} {label}")
                else:
                    style = "-" if method == "dept" else "--"
                    ax.plot([r["value"] for r in sub], ys, style, color=f"C{k}", marker="o",
                            label=f"{method} {label}")
        ax.set_ylabel("accuracy (%)")
        if axis == "lambda":
            ax.set_xlim(-0.02, 1.02)
    ax.set_xlabel(axis)
    ax.set_title(f"{axis} sweep")
    ax.legend(fontsize=7)
    _save(fig, out_path)
    return axis


def plot_csv(path, out_path) -> str:
    """Render ``path`` to ``out_path``; returns the detected kind."""
    kind, rows = read_table(path)
    if kind == "scatter":
        plot_scatter(rows, out_path)
    elif kind == "hist":
        plot_histogram(rows, out_path)
    else:
        kind = f"{plot_sweep(rows, out_path)}_sweep"
    return kind
