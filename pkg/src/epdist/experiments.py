"""Grid enumeration and execution, summary tables and correlation analytics."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import multiprocessing as mp
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import InvalidArgument, NumericFailure, UndefinedCorrelation
from .nn import ModelConfig, normalize_arch, save_checkpoint
from .train import TrainConfig, predict, train

log = logging.getLogger(__name__)

AXES = ("models", "datasets", "ps", "sizes", "gammas", "lrs")
# record/summary column for each grid axis
_AXIS_FIELD = {"models": "model", "datasets": "dataset", "ps": "ps", "sizes": "size",
               "gammas": "gamma", "lrs": "lr"}


@dataclass(frozen=True)
class GridSpec:
    models: tuple = ("resnet1d", "tcn")
    datasets: tuple = ("global", "local")
    ps: tuple = (False, True)
    sizes: tuple = (64, 128, 256)
    gammas: tuple = (0.5, 0.9)
    lrs: tuple = (1e-5, 1e-4, 1e-3)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(normalize_arch(m) for m in self.models))
        for axis in AXES:
            object.__setattr__(self, axis, tuple(getattr(self, axis)))

    def with_axes(self, **overrides) -> "GridSpec":
        unknown = set(overrides) - set(AXES)
        if unknown:
            raise InvalidArgument(f"unknown grid axis {sorted(unknown)[0]!r}; expected one of {', '.join(AXES)}")
        return replace(self, **overrides)


@dataclass(frozen=True, order=True)
class GridCell:
    model: str
    dataset: str
    ps: bool
    size: int
    gamma: float
    lr: float

    def coords(self) -> dict:
        return asdict(self)


def _dedupe(axis: str, values: Iterable) -> list:
    values = list(values)
    unique = sorted(set(values))
    if len(unique) != len(values):
        log.warning("duplicate values in grid axis %s dropped: %s", axis, values)
    return unique


def enumerate_grid(spec: GridSpec) -> list:
    """Cartesian product of the axes in lexicographic order.

    Axes vary slowest to fastest as model, dataset, ps, size, gamma, lr;
    values within an axis are sorted and deduplicated.
    """
    axes = []
    for axis in AXES:
        values = _dedupe(axis, getattr(spec, axis))
        if not values:
            raise InvalidArgument(f"grid axis {axis} is empty")
        axes.append(values)
    return [GridCell(m, d, bool(p), int(s), float(g), float(lr)) for m, d, p, s, g, lr in itertools.product(*axes)]


def _digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def derive_seed(base_seed: int, cell: GridCell) -> int:
    """Per-cell seed: base seed XOR the leading 64 bits of the cell's digest."""
    return (int(base_seed) ^ int(_digest(cell.coords())[:16], 16)) & (2**64 - 1)


def config_hash(cell: GridCell, seed: int) -> str:
    return _digest({**cell.coords(), "seed": int(seed)})[:16]


@dataclass
class ExperimentRecord:
    run_id: str
    model: str
    dataset: str
    ps: bool
    size: int
    gamma: float
    lr: float
    seed: int
    status: str = "done"
    train_l1_km: float | None = None
    val_l1_km: float | None = None
    test_l1_km: float | None = None
    runtime_min: float = 0.0
    best_epoch: int | None = None
    error: str | None = None
    failed_epoch: int | None = None
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    # {split: (trace_ids, targets, predictions)}; kept out of the run log
    predictions: dict | None = field(default=None, repr=False)

    @property
    def cell(self) -> GridCell:
        return GridCell(self.model, self.dataset, self.ps, self.size, self.gamma, self.lr)

    def config(self) -> dict:
        return {"model": self.model, "size": self.size, "gamma": self.gamma, "lr": self.lr,
                "ps": self.ps, "dataset": self.dataset, "seed": self.seed}


# ---------------------------------------------------------------------------
# run log


class RunLog:
    """Append-only JSONL file; every line is written and flushed under a lock."""

    def __init__(self, path, lock=None):
        self.path = Path(path)
        self.lock = lock if lock is not None else threading.Lock()

    def append(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, allow_nan=False) + "\n"
        with self.lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()

    def read(self) -> list:
        if not self.path.exists():
            return []
        rows = []
        with open(self.path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(json.loads(line))
                except ValueError:
                    # a line cut short by a kill; everything before it is intact
                    log.warning("%s:%d: unreadable log line skipped", self.path, n)
        return rows


def epoch_line(record: ExperimentRecord, row: dict) -> dict:
    return {"run_id": record.run_id, "config": record.config(), **row}


def final_line(record: ExperimentRecord) -> dict:
    out = {
        "run_id": record.run_id,
        "config": record.config(),
        "epoch": len(record.train_curve) - 1 if record.failed_epoch is None else record.failed_epoch,
        "lr_now": None,
        "train_l1_km": record.train_l1_km,
        "val_l1_km": record.val_l1_km,
        "wall_s": record.runtime_min * 60.0,
        "test_l1_km": record.test_l1_km,
        "runtime_min": record.runtime_min,
        "status": record.status,
        "best_epoch": record.best_epoch,
    }
    if record.error is not None:
        out["error"] = record.error
    return out


def load_records(log_path) -> list:
    """Finished runs found in a run log, with their per-epoch curves."""
    rows = RunLog(log_path).read()
    curves: dict = {}
    finals: dict = {}
    for row in rows:
        rid = row.get("run_id")
        if rid is None:
            continue
        if "status" in row:
            finals[rid] = row
        else:
            curves.setdefault(rid, {})[row["epoch"]] = (row["train_l1_km"], row["val_l1_km"])
    records = []
    for rid, row in finals.items():
        cfg = row["config"]
        by_epoch = curves.get(rid, {})
        epochs = sorted(by_epoch)
        records.append(ExperimentRecord(
            run_id=rid, model=cfg["model"], dataset=cfg["dataset"], ps=bool(cfg["ps"]),
            size=int(cfg["size"]), gamma=float(cfg["gamma"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]),
            status=row["status"], train_l1_km=row.get("train_l1_km"), val_l1_km=row.get("val_l1_km"),
            test_l1_km=row.get("test_l1_km"), runtime_min=float(row.get("runtime_min") or 0.0),
            best_epoch=row.get("best_epoch"), error=row.get("error"),
            failed_epoch=row["epoch"] if row["status"] == "failed" else None,
            train_curve=[by_epoch[e][0] for e in epochs], val_curve=[by_epoch[e][1] for e in epochs],
        ))
    return records


# ---------------------------------------------------------------------------
# running cells

_WORKER: dict = {}


def _init_worker(datasets, log_path, lock, out_dir):
    _WORKER.clear()
    _WORKER.update(datasets=datasets, log=RunLog(log_path, lock) if log_path else None,
                   out_dir=out_dir, cache={})


def _dataset(name: str, ps: bool) -> tuple:
    cache = _WORKER["cache"]
    key = (name, ps)
    if key not in cache:
        if name not in _WORKER["datasets"]:
            raise InvalidArgument(f"no data prepared for dataset {name!r}")
        cache[key] = tuple(Dataset(part, include_ps=ps) for part in _WORKER["datasets"][name])
    return cache[key]


def write_predictions(path, predictions: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("split,trace_id,target_km,pred_km\n")
        for split_name in ("train", "val", "test"):
            if split_name not in predictions:
                continue
            ids, target, pred = predictions[split_name]
            for tid, t, p in zip(ids, target, pred):
                fh.write(f"{split_name},{tid},{float(t)!r},{float(p)!r}\n")


def read_predictions(path) -> dict:
    import csv
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            ids, target, pred = out.setdefault(row["split"], ([], [], []))
            ids.append(row["trace_id"])
            target.append(float(row["target_km"]))
            pred.append(float(row["pred_km"]))
    return {k: (ids, np.array(t), np.array(p)) for k, (ids, t, p) in out.items()}


def run_cell(cell: GridCell, seed: int, train_template: TrainConfig) -> ExperimentRecord:
    """Train and evaluate one grid cell; numeric failures become a failed record."""
    record = ExperimentRecord(config_hash(cell, seed), **cell.coords(), seed=seed)
    runlog = _WORKER.get("log")
    t0 = time.perf_counter()

    def on_epoch(row):
        record.train_curve.append(row["train_l1_km"])
        record.val_curve.append(row["val_l1_km"])
        if runlog is not None:
            runlog.append(epoch_line(record, row))

    try:
        train_ds, val_ds, test_ds = _dataset(cell.dataset, cell.ps)
        model_cfg = ModelConfig(cell.model, cell.size, train_ds.channels, seed=seed)
        train_cfg = replace(train_template, lr0=cell.lr, gamma=cell.gamma, seed=seed)
        model, metrics = train(model_cfg, train_cfg, train_ds, val_ds, test_ds, on_epoch=on_epoch)
        record.test_l1_km = metrics.test_l1_km
        record.best_epoch = metrics.best_epoch
        record.train_l1_km = metrics.train_l1_km[-1]
        record.val_l1_km = metrics.val_l1_km[-1]
        record.predictions = {
            name: ([r.trace_id for r in ds.records], ds.targets.astype(np.float64), predict(model, ds))
            for name, ds in (("train", train_ds), ("val", val_ds), ("test", test_ds))
        }
        out_dir = _WORKER.get("out_dir")
        if out_dir is not None:
            (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (out_dir / "predictions").mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, out_dir / "checkpoints" / f"{record.run_id}.epd")
            write_predictions(out_dir / "predictions" / f"{record.run_id}.csv", record.predictions)
    except NumericFailure as exc:
        record.status = "failed"
        record.error = f"{exc} (layer {exc.layer})" if exc.layer else str(exc)
        record.failed_epoch = exc.epoch
        log.warning("cell %s failed at epoch %s: %s", record.run_id, exc.epoch, exc)
    record.runtime_min = (time.perf_counter() - t0) / 60.0
    if runlog is not None:
        runlog.append(final_line(record))
    return record


def _run_cell_job(args):
    return run_cell(*args)


def run_grid(cells: Sequence[GridCell], datasets: dict, parallelism: int = 1, out_dir=None,
             base_seed: int = 0, train_template: TrainConfig | None = None) -> list:
    """Run every cell once and return one record per cell, in cell order.

    ``datasets`` maps a dataset name to its ``(train, val, test)`` record
    lists.  With ``out_dir`` set, progress goes to ``out_dir/runs.jsonl``
    and cells already finished there (matched by config hash) are skipped,
    so an interrupted grid resumes where it stopped.  Cells run in worker
    processes when ``parallelism > 1``.
    """
    if parallelism < 1:
        raise InvalidArgument(f"parallelism must be >= 1, got {parallelism}")
    train_template = train_template or TrainConfig()
    if train_template.workers != 1 and parallelism > 1:
        raise InvalidArgument("batch sharding and parallel cells are mutually exclusive")
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    finished = {}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "runs.jsonl"
        finished = {r.run_id: r for r in load_records(log_path)}

    jobs, order = [], []
    for cell in cells:
        seed = derive_seed(base_seed, cell)
        rid = config_hash(cell, seed)
        order.append(rid)
        if rid in finished:
            log.info("skipping finished cell %s (%s)", rid, finished[rid].status)
            continue
        jobs.append((cell, seed, train_template))
    if len(set(order)) != len(order):
        raise InvalidArgument("grid contains repeated cells")
    log.info("%d cells, %d already finished, %d to run", len(order), len(order) - len(jobs), len(jobs))

    results = dict(finished)
    if parallelism == 1 or len(jobs) <= 1:
        _init_worker(datasets, log_path, None, out_dir)
        try:
            for job in jobs:
                rec = run_cell(*job)
                results[rec.run_id] = rec
        finally:
            _WORKER.clear()
    else:
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        ctx = mp.get_context(method)
        lock = ctx.Lock()
        with ProcessPoolExecutor(max_workers=min(parallelism, len(jobs)), mp_context=ctx,
                                 initializer=_init_worker,
                                 initargs=(datasets, log_path, lock, out_dir)) as pool:
            try:
                for rec in pool.map(_run_cell_job, jobs):
                    results[rec.run_id] = rec
            except BaseException:
                pool.shutdown(wait=False, cancel_futures=True)
                raise
    if out_dir is not None:
        for rid, rec in results.items():
            pred_path = out_dir / "predictions" / f"{rid}.csv"
            if rec.predictions is None and pred_path.exists():
                rec.predictions = read_predictions(pred_path)
    return [results[rid] for rid in order]


# ---------------------------------------------------------------------------
# summaries


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and sample (n-1) standard deviation, two-pass; std is 0 for one value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgument("mean_std of an empty sequence")
    mean = float(x.sum() / x.size)
    if x.size == 1:
        return mean, 0.0
    return mean, float(math.sqrt(((x - mean) ** 2).sum() / (x.size - 1)))


@dataclass
class GroupSummary:
    key: dict
    n: int
    mean: float
    std: float
    best: float
    best_run_id: str


def summarize(records: Iterable[ExperimentRecord], group_by: Sequence[str] = ("model", "dataset", "ps")) -> list:
    """Per-group test L1 mean, sample std and best (minimum) over finished runs.

    Groups come out sorted by key.  Failed runs are ignored; a group with
    no finished run is dropped with a notice.
    """
    groups: dict = {}
    for rec in records:
        key = tuple(getattr(rec, g) for g in group_by)
        groups.setdefault(key, []).append(rec)
    out = []
    for key in sorted(groups):
        done = [r for r in groups[key] if r.status == "done" and r.test_l1_km is not None]
        if not done:
            log.warning("group %s has no finished runs; omitted", dict(zip(group_by, key)))
            continue
        values = [r.test_l1_km for r in done]
        mean, std = mean_std(values)
        best = min(done, key=lambda r: (r.test_l1_km, r.run_id))
        out.append(GroupSummary(dict(zip(group_by, key)), len(done), mean, std, best.test_l1_km, best.run_id))
    return out


def render_table(summaries: Sequence[GroupSummary]) -> str:
    """Plain-text table: one row per group with ``mean±std`` and the best value."""
    if not summaries:
        return "(no finished runs)\n"
    cols = list(summaries[0].key)
    header = cols + ["n", "mean±std", "best"]
    rows = [[_fmt(s.key[c]) for c in cols] + [str(s.n), f"{s.mean:.2f}±{s.std:.2f}", f"{s.best:.2f}"]
            for s in summaries]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "PS" if v else "No PS"
    return str(v)


# ---------------------------------------------------------------------------
# correlation


@dataclass(frozen=True)
class CorrelationReport:
    pearson: float
    spearman: float
    n: int


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties given the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], x.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgument("pearson needs two 1-D sequences of equal length")
    if x.size < 2:
        raise UndefinedCorrelation(f"correlation needs at least 2 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidArgument("correlation inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0 or np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation is undefined for a constant column")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


def correlation(pairs) -> CorrelationReport:
    """Pearson and Spearman (average-rank) coefficients of ``(x, y)`` pairs."""
    arr = np.asarray(list(pairs), dtype=np.float64)
    if arr.size == 0:
        raise UndefinedCorrelation("correlation needs at least 2 pairs, got 0")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidArgument("correlation expects a sequence of (x, y) pairs")
    x, y = arr[:, 0], arr[:, 1]
    return CorrelationReport(pearson(x, y), spearman(x, y), len(arr))


def emit_report(records, out_dir, sp_pairs=None) -> list:
    from .report import emit_report as _emit
    return _emit(records, out_dir, sp_pairs=sp_pairs)
