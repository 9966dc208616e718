"""Delimited-text tables and curves, plus the matching matplotlib figures.

Table columns: strategy, test_zone, mean, std, n_reps, seed_base, config_hash.
Curve columns: curve, x, label, mean, std, n_reps, seed_base, config_hash, runs.
Header lines start with ``#``; floats are written with ``repr`` so a file
parses back to exactly the values that were written.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evalkit import CellStat, ExperimentResult, SweepCurve

TABLE_COLUMNS = ("strategy", "test_zone", "mean", "std", "n_reps", "seed_base", "config_hash")
CURVE_COLUMNS = ("curve", "x", "label", "mean", "std", "n_reps", "seed_base", "config_hash", "runs")
STD_NOTE = "# std: population standard deviation (ddof=0) over repetitions"


def table_rows(result: ExperimentResult) -> list[tuple]:
    meta = result.metadata
    return [(row, col, cell.mean, cell.std, result.n_repetitions, meta.get("seed_base", 0),
             meta.get("config_hash", "")) for (row, col), cell in result.cells.items()]


def write_table(result: ExperimentResult, path) -> Path:
    if not result.cells:
        raise ValueError("refusing to write an empty result table")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(STD_NOTE + "\n")
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in table_rows(result):
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4], r[5], r[6]])
    return path


def _data_lines(fh) -> Iterable[str]:
    return (line for line in fh if not line.startswith("#"))


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(_data_lines(fh)))
    for r in rows:
        r["mean"], r["std"] = float(r["mean"]), float(r["std"])
        r["n_reps"], r["seed_base"] = int(r["n_reps"]), int(r["seed_base"])
    return rows


def write_curves(curves: Sequence[SweepCurve], path) -> Path:
    if not curves or any(len(c.x) == 0 for c in curves):
        raise ValueError("refusing to write an empty sweep")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(STD_NOTE + "\n")
        for c in curves:
            fh.write(f"# curve={c.name} x_name={c.x_name} omitted={' '.join(map(repr, c.omitted))}\n")
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for c in curves:
            runs = c.runs or tuple(() for _ in c.x)
            for x, label, y, e, r in zip(c.x, c.labels, c.y, c.yerr, runs):
                w.writerow([c.name, repr(float(x)), label, repr(float(y)), repr(float(e)), c.n_reps,
                            c.seed_base, c.config_hash, " ".join(repr(float(v)) for v in r)])
    return path


def write_curve(curve: SweepCurve, path) -> Path:
    return write_curves([curve], path)


def read_curves(path) -> list[SweepCurve]:
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.readlines()
    for line in lines:
        if line.startswith("# curve="):
            fields = dict(tok.split("=", 1) for tok in line[2:].strip().split(" ", 2))
            omitted = tuple(float(v) for v in fields.get("omitted", "").split())
            meta[fields["curve"]] = (fields["x_name"], omitted)
    rows = list(csv.DictReader(_data_lines(lines)))
    curves, order = {}, []
    for r in rows:
        name = r["curve"]
        if name not in curves:
            curves[name] = []
            order.append(name)
        curves[name].append(r)
    out = []
    for name in order:
        rs = curves[name]
        x_name, omitted = meta.get(name, ("x", ()))
        out.append(SweepCurve(
            x=tuple(float(r["x"]) for r in rs), y=tuple(float(r["mean"]) for r in rs),
            yerr=tuple(float(r["std"]) for r in rs), labels=tuple(r["label"] for r in rs),
            name=name, x_name=x_name,
            runs=tuple(tuple(float(v) for v in r["runs"].split()) for r in rs),
            n_reps=int(rs[0]["n_reps"]), seed_base=int(rs[0]["seed_base"]),
            config_hash=rs[0]["config_hash"], omitted=omitted))
    return out


def read_curve(path) -> SweepCurve:
    curves = read_curves(path)
    if len(curves) != 1:
        raise ValueError(f"{path} holds {len(curves)} curves")
    return curves[0]


def format_grid(result: ExperimentResult) -> str:
    """Strategy-by-test-zone grid of ``mean±std`` in percent."""
    cols = result.columns
    lines = [f"{'':<14}" + "".join(f"{c:>16}" for c in cols)]
    for row in result.rows:
        cells = []
        for col in cols:
            cell = result.cells.get((row, col))
            cells.append(f"{100 * cell.mean:8.2f}±{100 * cell.std:5.2f}" if cell else "")
        lines.append(f"{row:<14}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


# ------------------------------------------------------------------ figures

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(curves: Sequence[SweepCurve], path, title: str = "", ylabel: str = "accuracy (%)") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        ax.errorbar(c.x, 100 * np.asarray(c.y), yerr=100 * np.asarray(c.yerr), marker="o", capsize=3,
                    label=c.name)
    ax.set_xlabel(curves[0].x_name if curves else "")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    if len(curves) > 1 or (curves and curves[0].name):
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_table(result: ExperimentResult, path, title: str = "") -> Path:
    plt = _pyplot()
    rows, cols = result.rows, result.columns
    grid = np.array([[100 * result.cells[(r, c)].mean if (r, c) in result.cells else np.nan
                      for c in cols] for r in rows])
    fig, ax = plt.subplots(figsize=(1.6 * len(cols) + 2, 0.6 * len(rows) + 1.5))
    im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            cell = result.cells.get((r, c))
            if cell:
                ax.text(j, i, f"{100 * cell.mean:.1f}\n±{100 * cell.std:.1f}", ha="center", va="center",
                        color="w" if cell.mean < 0.6 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, label="accuracy (%)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def result_from_table(rows: list[dict]) -> ExperimentResult:
    """Rebuild a (stats-only) result from :func:`read_table` rows for re-plotting."""
    cells = {(r["strategy"], r["test_zone"]): CellStat(r["mean"], r["std"], ()) for r in rows}
    n = rows[0]["n_reps"] if rows else 0
    meta = {"seed_base": rows[0]["seed_base"], "config_hash": rows[0]["config_hash"]} if rows else {}
    return ExperimentResult(cells, n, meta)
