"""Command-line entry point: ``epd synth | train | grid | analyze``.

Machine-readable ``key=value`` lines go to stdout; logs and tables go to
stderr.  Exit codes: 0 success, 2 usage or configuration error, 3 I/O
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .errors import EpdError, FormatError, InvalidArgument, NotFound, NumericFailure
from .experiments import (ExperimentRecord, GridCell, GridSpec, RunLog, config_hash, correlation,
                          enumerate_grid, epoch_line, final_line, render_table, run_grid, summarize)
from .nn import ModelConfig, save_checkpoint
from .report import emit_report, plot_sp_scatter
from .train import TrainConfig, train

log = logging.getLogger("epdist")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(InvalidArgument):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunManifest:
    """JSON run configuration; each section mirrors one config type."""

    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    filter: dict = dataclasses.field(default_factory=dict)
    split: dict = dataclasses.field(default_factory=dict)
    grid: dict = dataclasses.field(default_factory=dict)
    synthetic: dict = dataclasses.field(default_factory=dict)


SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "filter": D.FilterSpec,
    "split": D.SplitSpec,
    "grid": GridSpec,
    "synthetic": D.SyntheticSpec,
}


def _check_keys(obj: dict, allowed, where: str) -> None:
    if not isinstance(obj, dict):
        raise UsageError(f"{where or 'config'} must be a JSON object")
    for key in obj:
        if key not in allowed:
            raise UsageError(f"unknown config key '{where + '.' if where else ''}{key}'")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None


def load_run_manifest(path) -> RunManifest:
    raw = _read_json(path)
    _check_keys(raw, SECTION_TYPES, "")
    for section, cls in SECTION_TYPES.items():
        _check_keys(raw.get(section, {}), _field_names(cls), section)
    return RunManifest(**raw)


def _build(cls, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise UsageError(f"bad {cls.__name__} settings: {exc}") from None


def _merge(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _resolve_seed(flag, file_value) -> int:
    if flag is not None:
        return flag
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("EPD_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"EPD_SEED must be an integer, got {env!r}") from None
    return 0


def _filter_spec(kind: str, overrides: dict) -> D.FilterSpec | None:
    """``none``, ``global`` (distance and SNR only) or ``local`` (plus the radius)."""
    if kind == "none":
        return None
    values = dict(overrides)
    values["local_center"] = (values.get("local_center") or D.CALIFORNIA_CENTER) if kind == "local" else None
    return _build(D.FilterSpec, values)


# ---------------------------------------------------------------------------
# subcommands


def _emit(**pairs) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()), flush=True)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def cmd_synth(args) -> int:
    values = load_run_manifest(args.config).synthetic if args.config else {}
    if args.spec:
        raw = _read_json(args.spec)
        _check_keys(raw, _field_names(D.SyntheticSpec), "")
        values = {**values, **raw}
    values = _merge(values, n=args.n, noise_sigma=args.noise_sigma, arrival_visibility=args.visibility)
    values["seed"] = _resolve_seed(args.seed, values.get("seed"))
    spec = _build(D.SyntheticSpec, values)
    spec.validate()
    records = D.synth_dataset(spec)
    manifest, store = D.write_data_dir(records, args.out)
    d = [r.epicentral_km for r in records]
    log.info("wrote %d traces to %s and %s", len(records), manifest, store)
    _emit(n=len(records), d_min_km=round(min(d), 4), d_max_km=round(max(d), 4), seed=spec.seed)
    return EXIT_OK


def _split_records(data_dir, filters, split_spec) -> tuple:
    records = D.load_data_dir(data_dir, filters)
    if len(records) < 3:
        raise InvalidArgument(f"{data_dir}: only {len(records)} usable records after filtering")
    return D.split(records, split_spec)


def cmd_train(args) -> int:
    cfg = load_run_manifest(args.config) if args.config else RunManifest()
    seed = _resolve_seed(args.seed, cfg.train.get("seed"))
    ps = args.ps if args.ps is not None else cfg.model.get("in_channels", 4) == 4
    model_values = _merge(cfg.model, arch=args.model, dense_size=args.size,
                          allow_nonstandard_size=args.allow_override or None)
    model_values["in_channels"] = 4 if ps else 3
    model_values.setdefault("seed", seed)
    if args.seed is not None:
        model_values["seed"] = seed
    model_cfg = _build(ModelConfig, model_values)
    train_cfg = _build(TrainConfig, _merge(cfg.train, lr0=args.lr, gamma=args.gamma, epochs=args.epochs,
                                           batch_size=args.batch_size, seed=seed,
                                           allow_override=args.allow_override or None,
                                           workers=args.workers))
    train_cfg.validate()
    model_cfg.validate()
    split_spec = _build(D.SplitSpec, _merge(cfg.split, seed=seed if "seed" not in cfg.split else None))
    filters = _filter_spec(args.filter, cfg.filter)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = _split_records(args.data, filters, split_spec)
    train_ds, val_ds, test_ds = (D.Dataset(p, include_ps=ps) for p in parts)
    log.info("train/val/test = %d/%d/%d records, %d channels", len(train_ds), len(val_ds), len(test_ds),
             train_ds.channels)

    cell = GridCell(model_cfg.arch, Path(args.data).name, ps, model_cfg.dense_size, train_cfg.gamma, train_cfg.lr0)
    record = ExperimentRecord(config_hash(cell, seed), **cell.coords(), seed=seed)
    log_path = out / "train.jsonl"
    log_path.write_text("")
    runlog = RunLog(log_path)

    def on_epoch(row):
        record.train_curve.append(row["train_l1_km"])
        record.val_curve.append(row["val_l1_km"])
        runlog.append(epoch_line(record, row))
        log.info("epoch %d: train %.3f km, val %.3f km", row["epoch"], row["train_l1_km"], row["val_l1_km"])

    try:
        model, metrics = train(model_cfg, train_cfg, train_ds, val_ds, test_ds, on_epoch=on_epoch)
    except NumericFailure as exc:
        record.status, record.error, record.failed_epoch = "failed", str(exc), exc.epoch
        runlog.append(final_line(record))
        raise
    record.test_l1_km = metrics.test_l1_km
    record.best_epoch = metrics.best_epoch
    record.train_l1_km, record.val_l1_km = metrics.train_l1_km[-1], metrics.val_l1_km[-1]
    record.runtime_min = metrics.runtime_min
    runlog.append(final_line(record))
    ckpt = out / "model.epd"
    save_checkpoint(model, ckpt)
    print(f"checkpoint={ckpt}", flush=True)
    print(f"test_l1_km={metrics.test_l1_km!r}", flush=True)
    return EXIT_OK


_AXIS_PARSERS = {
    "models": str,
    "datasets": str,
    "ps": lambda v: _parse_bool(v),
    "sizes": int,
    "gammas": float,
    "lrs": float,
}


def _parse_bool(v: str) -> bool:
    key = v.strip().lower()
    if key in ("1", "true", "yes", "with", "ps", "on"):
        return True
    if key in ("0", "false", "no", "without", "nops", "no-ps", "off"):
        return False
    raise UsageError(f"cannot read {v!r} as a PS setting (use with/without)")


def parse_axes(items) -> dict:
    """``["models=tcn", "sizes=64,128"]`` -> ``{"models": ("tcn",), "sizes": (64, 128)}``."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--axes entries look like name=v1,v2; got {item!r}")
        name, _, raw = item.partition("=")
        name = name.strip()
        if name not in _AXIS_PARSERS:
            raise UsageError(f"unknown grid axis {name!r}; expected one of {', '.join(_AXIS_PARSERS)}")
        try:
            out[name] = tuple(_AXIS_PARSERS[name](v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise UsageError(f"bad values for axis {name}: {raw!r}") from None
    return out


def cmd_grid(args) -> int:
    cfg = load_run_manifest(args.config) if args.config else RunManifest()
    seed = _resolve_seed(args.seed, cfg.train.get("seed"))
    grid = _build(GridSpec, cfg.grid).with_axes(**parse_axes(args.axes))
    cells = enumerate_grid(grid)
    train_cfg = _build(TrainConfig, _merge(cfg.train, epochs=args.epochs, batch_size=args.batch_size, seed=seed,
                                           allow_override=args.allow_override or None))
    train_cfg.validate()
    split_spec = _build(D.SplitSpec, _merge(cfg.split, seed=seed if "seed" not in cfg.split else None))
    dirs = {"global": args.data_global, "local": args.data_local}
    datasets = {}
    for name in sorted({c.dataset for c in cells}):
        if dirs.get(name) is None:
            raise UsageError(f"grid needs dataset {name!r}: pass --data-{name} (or shrink it with --axes datasets=...)")
        filters = None if args.filter == "none" else _filter_spec(name, cfg.filter)
        datasets[name] = _split_records(dirs[name], filters, split_spec)
    log.info("%d grid cells", len(cells))

    records = run_grid(cells, datasets, parallelism=args.parallelism, out_dir=args.out,
                       base_seed=seed, train_template=train_cfg)
    emit_report(records, args.out)
    sys.stderr.write(render_table(summarize(records)))
    done = [r for r in records if r.status == "done"]
    failed = len(records) - len(done)
    _emit(cells=len(records), done=len(done), failed=failed)
    if done:
        best = min(done, key=lambda r: (r.test_l1_km, r.run_id))
        _emit(best_run_id=best.run_id, best_test_l1_km=best.test_l1_km)
    return EXIT_OK


def cmd_analyze(args) -> int:
    manifest = D.load_manifest(args.manifest)
    rows = manifest.rows
    if args.filter != "none":
        cfg = load_run_manifest(args.config) if args.config else RunManifest()
        rows = D.apply_filters(rows, _filter_spec(args.filter, cfg.filter), manifest.has_orientation)
    if manifest.rejects:
        log.warning("%d manifest rows rejected", len(manifest.rejects))
    pairs = [(r.sp_seconds, r.epicentral_km) for r in rows]
    rep = correlation(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plot_sp_scatter(pairs, out)
    (out / "correlation.json").write_text(
        json.dumps(dataclasses.asdict(rep), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    stations = len({(r.station.lat, r.station.lon) for r in rows})
    log.info("%d records from %d stations", len(rows), stations)
    print(f"pearson={rep.pearson!r} spearman={rep.spearman!r} n={rep.n}", flush=True)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _seed_arg(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epd", description="Single-station epicentral distance estimation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic data directory")
    s.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    s.add_argument("--config", help="JSON run manifest (its 'synthetic' section)")
    s.add_argument("--out", required=True, help="output data directory")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=_seed_arg)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--visibility", type=float, help="arrival_visibility in [0, 1]")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model on a data directory")
    t.add_argument("--data", required=True, help="data directory (manifest.csv + waveforms.sw6k)")
    t.add_argument("--out", required=True, help="directory for model.epd and train.jsonl")
    t.add_argument("--config", help="JSON run manifest")
    t.add_argument("--model", choices=("tcn", "resnet", "resnet1d"))
    t.add_argument("--size", type=int, help="dense layer size (64, 128 or 256)")
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--ps", dest="ps", action="store_true", default=None,
                   help="add the P/S boxcar channel (the default)")
    t.add_argument("--no-ps", dest="ps", action="store_false")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=_seed_arg)
    t.add_argument("--workers", type=int, help="threads per batch (not bitwise reproducible)")
    t.add_argument("--filter", choices=("none", "global", "local"), default="none")
    t.add_argument("--allow-override", action="store_true", help="accept values outside the lr, gamma and size grids")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("grid", help="run the hyperparameter grid and write a report")
    g.add_argument("--data-global", help="data directory of the global subset")
    g.add_argument("--data-local", help="data directory of the local subset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON run manifest")
    g.add_argument("--parallelism", type=int, default=1)
    g.add_argument("--axes", nargs="*", default=[], metavar="AXIS=V1,V2",
                   help="override grid axes: models sizes gammas lrs ps datasets")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=_seed_arg)
    g.add_argument("--filter", choices=("none", "stead"), default="none",
                   help="'stead' applies the global/local selection to the respective directory")
    g.add_argument("--allow-override", action="store_true")
    g.set_defaults(func=cmd_grid)

    a = sub.add_parser("analyze", help="S-P interval vs distance correlation of a manifest")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="JSON run manifest (its 'filter' section)")
    a.add_argument("--filter", choices=("none", "global", "local"), default="none")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        # non-finite values surface as NumericFailure; numpy's warnings would only repeat it
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except NumericFailure as exc:
        where = f" (layer {exc.layer}, epoch {exc.epoch})" if exc.layer or exc.epoch is not None else ""
        log.error("numeric failure%s: %s", where, exc)
        return EXIT_NUMERIC
    except (FormatError, NotFound, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (EpdError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except KeyboardInterrupt:
        log.error("interrupted; finished cells are kept in the run log")
        return 130


if __name__ == "__main__":
    sys.exit(main())
