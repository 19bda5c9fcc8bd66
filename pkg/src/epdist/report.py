"""Report files: summary CSVs and SVG figures, each figure with a sibling CSV.

SVG output is byte-stable: a fixed hash salt, no date metadata and text kept
as text.  Rendering uses the object API on an SVG canvas, so no global
pyplot state is touched.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from .experiments import ExperimentRecord, render_table, summarize

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("model", "dataset", "ps", "size", "gamma", "lr", "test_l1_km", "runtime_min")
# marker per split: train star, test triangle, validation circle
SPLIT_MARKERS = {"train": "*", "val": "o", "test": "^"}
_RC = {"svg.hashsalt": "epdist", "svg.fonttype": "none", "font.family": "DejaVu Sans"}


def _save(fig: Figure, path: Path) -> None:
    FigureCanvasSVG(fig)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _figure(**kw) -> Figure:
    with matplotlib.rc_context(_RC):
        return Figure(figsize=kw.pop("figsize", (6.0, 4.5)), **kw)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _ps_label(ps: bool) -> str:
    return "ps" if ps else "nops"


def _title(rec: ExperimentRecord) -> str:
    return (f"{rec.model}, {rec.dataset}, {'PS' if rec.ps else 'No PS'}, size {rec.size}, "
            f"γ {rec.gamma:g}, lr {rec.lr:g}")


def write_summary(records: Sequence[ExperimentRecord], out_dir: Path) -> Path:
    path = out_dir / "summary.csv"
    done = [r for r in records if r.status == "done"]
    _write_csv(path, SUMMARY_COLUMNS,
               ([r.model, r.dataset, r.ps, r.size, r.gamma, r.lr, r.test_l1_km, r.runtime_min] for r in done))
    return path


def write_group_tables(records: Sequence[ExperimentRecord], out_dir: Path) -> list:
    summaries = summarize(records, ("model", "dataset", "ps"))
    csv_path = out_dir / "groups.csv"
    _write_csv(csv_path, ("model", "dataset", "ps", "n", "mean_km", "std_km", "best_km", "best_run_id"),
               ([s.key["model"], s.key["dataset"], s.key["ps"], s.n, s.mean, s.std, s.best, s.best_run_id]
                for s in summaries))
    txt_path = out_dir / "tables.txt"
    txt_path.write_text(render_table(summaries), encoding="utf-8")
    return [csv_path, txt_path]


def plot_scatter(rec: ExperimentRecord, out_dir: Path) -> list:
    """Predicted vs true distance with one marker style per split."""
    stem = out_dir / f"scatter_{rec.run_id}"
    rows = []
    fig = _figure()
    ax = fig.add_subplot()
    lo, hi = np.inf, -np.inf
    for split_name in ("train", "val", "test"):
        if split_name not in rec.predictions:
            continue
        ids, target, pred = rec.predictions[split_name]
        target, pred = np.asarray(target, dtype=float), np.asarray(pred, dtype=float)
        ax.scatter(target, pred, marker=SPLIT_MARKERS[split_name], s=18, alpha=0.6, label=split_name)
        lo, hi = min(lo, target.min(), pred.min()), max(hi, target.max(), pred.max())
        rows += [(split_name, i, float(t), float(p), float(abs(p - t))) for i, t, p in zip(ids, target, pred)]
    if np.isfinite(lo):
        ax.plot([lo, hi], [lo, hi], color="black", linewidth=0.8)
    ax.set_xlabel("true epicentral distance (km)")
    ax.set_ylabel("predicted epicentral distance (km)")
    ax.set_title(_title(rec), fontsize=9)
    ax.legend()
    _save(fig, stem.with_suffix(".svg"))
    _write_csv(stem.with_suffix(".csv"), ("split", "trace_id", "target_km", "pred_km", "abs_err_km"), rows)
    return [stem.with_suffix(".svg"), stem.with_suffix(".csv")]


def plot_curve(rec: ExperimentRecord, out_dir: Path) -> list:
    stem = out_dir / f"curve_{rec.run_id}"
    epochs = np.arange(len(rec.train_curve))
    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(epochs, rec.train_curve, label="train")
    ax.plot(epochs, rec.val_curve, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L1 loss (km)")
    ax.set_title(_title(rec), fontsize=9)
    ax.legend()
    _save(fig, stem.with_suffix(".svg"))
    _write_csv(stem.with_suffix(".csv"), ("epoch", "train_l1_km", "val_l1_km"),
               zip(epochs.tolist(), rec.train_curve, rec.val_curve))
    return [stem.with_suffix(".svg"), stem.with_suffix(".csv")]


def plot_loss_bars(records: Sequence[ExperimentRecord], out_dir: Path) -> list:
    """Test L1 per hyperparameter combination, with and without PS, per model and dataset."""
    written = []
    done = [r for r in records if r.status == "done"]
    for model, dataset in sorted({(r.model, r.dataset) for r in done}):
        group = [r for r in done if r.model == model and r.dataset == dataset]
        combos = sorted({(r.size, r.gamma, r.lr) for r in group})
        stem = out_dir / f"loss_bars_{model}_{dataset}"
        fig = _figure(figsize=(max(6.0, 0.5 * len(combos) + 2), 4.5))
        ax = fig.add_subplot()
        x = np.arange(len(combos))
        rows = []
        for j, ps in enumerate((False, True)):
            vals = []
            for c in combos:
                hit = [r for r in group if (r.size, r.gamma, r.lr) == c and r.ps == ps]
                v = hit[0].test_l1_km if hit else np.nan
                vals.append(v)
                if hit:
                    rows.append((c[0], c[1], c[2], ps, v))
            ax.bar(x + (j - 0.5) * 0.4, vals, width=0.4, label="PS" if ps else "No PS")
        ax.set_xticks(x)
        ax.set_xticklabels([f"{s}/{g:g}/{lr:g}" for s, g, lr in combos], rotation=60, fontsize=7)
        ax.set_xlabel("dense size / γ / lr")
        ax.set_ylabel("test L1 loss (km)")
        ax.set_title(f"{model}, {dataset}")
        ax.legend()
        fig.subplots_adjust(bottom=0.3)
        _save(fig, stem.with_suffix(".svg"))
        _write_csv(stem.with_suffix(".csv"), ("size", "gamma", "lr", "ps", "test_l1_km"), rows)
        written += [stem.with_suffix(".svg"), stem.with_suffix(".csv")]
    return written


def plot_sp_scatter(pairs, out_dir: Path, name: str = "sp_vs_distance") -> list:
    """Epicentral distance against the S-P interval."""
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    stem = out_dir / name
    fig = _figure()
    ax = fig.add_subplot()
    ax.scatter(arr[:, 0], arr[:, 1], s=6, alpha=0.5)
    ax.set_xlabel("S-P arrival difference (s)")
    ax.set_ylabel("epicentral distance (km)")
    _save(fig, stem.with_suffix(".svg"))
    _write_csv(stem.with_suffix(".csv"), ("sp_interval_s", "epicentral_km"), arr.tolist())
    return [stem.with_suffix(".svg"), stem.with_suffix(".csv")]


def emit_report(records: Sequence[ExperimentRecord], out_dir, sp_pairs=None) -> list:
    """Write the summary tables and figures for ``records`` into ``out_dir``.

    Returns the written paths.  Runs without stored predictions get no
    scatter; failed runs only appear through the run log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_summary(records, out_dir)]
    written += write_group_tables(records, out_dir)
    written += plot_loss_bars(records, out_dir)
    for rec in records:
        if rec.status != "done":
            continue
        if rec.predictions:
            written += plot_scatter(rec, out_dir)
        else:
            log.info("run %s has no stored predictions; scatter skipped", rec.run_id)
        if rec.train_curve:
            written += plot_curve(rec, out_dir)
    if sp_pairs is not None:
        written += plot_sp_scatter(sp_pairs, out_dir)
    return written
