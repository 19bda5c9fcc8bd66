"""Trace records, manifest ingestion, filtering, splits and input assembly.

A prepared data directory holds two files::

    manifest.csv        one metadata row per trace (see REQUIRED_COLUMNS)
    waveforms.sw6k      packed float32 waveforms, plus waveforms.sw6k.idx.csv

The synthetic generator writes the same layout, so STEAD-derived directories
and desk-scale synthetic ones are interchangeable downstream.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import re
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgument, NotFound
from .geo import CALIFORNIA_CENTER, GeoPoint, destination, haversine_km, within_radius
from .tensor import Tensor

log = logging.getLogger(__name__)

SAMPLING_HZ = 100
TRACE_LEN = 6000
N_COMPONENTS = 3  # E-W, N-S, U-D

REQUIRED_COLUMNS = (
    "trace_name",
    "receiver_latitude",
    "receiver_longitude",
    "source_latitude",
    "source_longitude",
    "p_arrival_sample",
    "s_arrival_sample",
    "snr_db",
    "source_distance_km",
)
MANIFEST_NAME = "manifest.csv"
STORE_NAME = "waveforms.sw6k"


@dataclass
class TraceRecord:
    trace_id: str
    p_arrival_sample: int
    s_arrival_sample: int
    station: GeoPoint
    source: GeoPoint
    epicentral_km: float
    snr_db: tuple
    waveform: np.ndarray | None = None
    orientation_ok: bool | None = None

    @property
    def sp_seconds(self) -> float:
        return (self.s_arrival_sample - self.p_arrival_sample) / SAMPLING_HZ

    @property
    def mean_snr_db(self) -> float:
        return float(np.mean(self.snr_db))


@dataclass
class Reject:
    line: int
    trace_name: str
    reason: str


@dataclass
class Manifest:
    rows: list
    rejects: list = field(default_factory=list)
    has_orientation: bool = False

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


# ---------------------------------------------------------------------------
# manifest CSV


def _parse_arrival(text: str, what: str) -> int:
    value = float(text)
    if not math.isfinite(value) or value != int(value):
        raise ValueError(f"{what} not an integer sample index")
    value = int(value)
    if not 0 <= value < TRACE_LEN:
        raise ValueError(f"{what} outside [0, {TRACE_LEN})")
    return value


def _parse_snr(text: str) -> tuple:
    parts = [p for p in re.split(r"[;\s,]+", text.strip().strip("[]")) if p]
    if len(parts) != N_COMPONENTS:
        raise ValueError(f"snr_db needs {N_COMPONENTS} values, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_point(lat: str, lon: str, which: str) -> GeoPoint:
    try:
        lat_f, lon_f = float(lat), float(lon)
    except ValueError:
        raise ValueError(f"{which} coordinate not numeric") from None
    return GeoPoint(lat_f, lon_f)


def _parse_row(row: dict, has_orientation: bool) -> TraceRecord:
    station = _parse_point(row["receiver_latitude"], row["receiver_longitude"], "receiver")
    source = _parse_point(row["source_latitude"], row["source_longitude"], "source")
    p = _parse_arrival(row["p_arrival_sample"], "p_arrival_sample")
    s = _parse_arrival(row["s_arrival_sample"], "s_arrival_sample")
    if not p < s:
        raise ValueError("arrival order: p_arrival_sample must precede s_arrival_sample")
    dist_text = (row["source_distance_km"] or "").strip()
    dist = float(dist_text) if dist_text else haversine_km(station, source)
    if not (math.isfinite(dist) and dist >= 0):
        raise ValueError("source_distance_km must be a finite non-negative number")
    orientation = None
    if has_orientation:
        flag = (row.get("orientation_ok") or "").strip()
        if flag not in ("0", "1"):
            raise ValueError("orientation_ok must be 0 or 1")
        orientation = flag == "1"
    return TraceRecord(
        trace_id=row["trace_name"].strip(),
        p_arrival_sample=p,
        s_arrival_sample=s,
        station=station,
        source=source,
        epicentral_km=dist,
        snr_db=_parse_snr(row["snr_db"]),
        orientation_ok=orientation,
    )


def load_manifest(path) -> Manifest:
    """Read a metadata CSV into typed rows.

    Rows that fail to parse are collected in ``Manifest.rejects`` with the
    reason; a missing required column raises :class:`FormatError`.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise FormatError(f"{path}: missing required column '{col}'")
        has_orientation = "orientation_ok" in header
        manifest = Manifest([], [], has_orientation)
        for line, row in enumerate(reader, start=2):
            try:
                manifest.rows.append(_parse_row(row, has_orientation))
            except (ValueError, TypeError) as exc:
                manifest.rejects.append(Reject(line, row.get("trace_name") or "", str(exc)))
    mismatched = sum(
        1 for r in manifest.rows if abs(r.epicentral_km - haversine_km(r.station, r.source)) > 0.5
    )
    if mismatched:
        log.warning("%d rows have source_distance_km more than 0.5 km from the haversine value", mismatched)
    return manifest


def write_manifest(records: Sequence[TraceRecord], path) -> None:
    with_orientation = any(r.orientation_ok is not None for r in records)
    columns = list(REQUIRED_COLUMNS) + (["orientation_ok"] if with_orientation else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            row = [
                r.trace_id,
                repr(r.station.lat),
                repr(r.station.lon),
                repr(r.source.lat),
                repr(r.source.lon),
                r.p_arrival_sample,
                r.s_arrival_sample,
                ";".join(repr(float(v)) for v in r.snr_db),
                repr(float(r.epicentral_km)),
            ]
            if with_orientation:
                row.append("" if r.orientation_ok is None else int(r.orientation_ok))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# filtering and splits


@dataclass
class FilterSpec:
    max_epicentral_km: float = 110.0
    min_snr_db: float = 25.0
    local_center: GeoPoint | None = None
    local_radius_km: float = 300.0

    def __post_init__(self):
        if isinstance(self.local_center, (tuple, list)):
            self.local_center = GeoPoint(*self.local_center)
        if not (self.max_epicentral_km > 0 and self.min_snr_db > 0 and self.local_radius_km > 0):
            raise InvalidArgument("filter thresholds must be positive")

    @classmethod
    def local(cls, center=CALIFORNIA_CENTER, radius_km: float = 300.0, **kw) -> "FilterSpec":
        return cls(local_center=GeoPoint(*center), local_radius_km=radius_km, **kw)


def apply_filters(rows: Iterable[TraceRecord], spec: FilterSpec, has_orientation: bool | None = None) -> list:
    """Keep traces within the distance limit whose mean SNR exceeds the threshold.

    Traces farther than ``max_epicentral_km`` or with mean SNR at or below
    ``min_snr_db`` are dropped.  Orientation is only checked when the
    manifest carried an ``orientation_ok`` column.
    """
    rows = list(rows)
    if has_orientation is None:
        has_orientation = any(r.orientation_ok is not None for r in rows)
    if not has_orientation:
        log.info("no orientation_ok column; station-orientation filter skipped")
    kept = []
    for r in rows:
        if r.epicentral_km > spec.max_epicentral_km:
            continue
        if not r.mean_snr_db > spec.min_snr_db:
            continue
        if has_orientation and r.orientation_ok is False:
            continue
        if spec.local_center is not None and not within_radius(spec.local_center, r.station, spec.local_radius_km):
            continue
        kept.append(r)
    return kept


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    test_frac: float = 0.2
    val_frac_of_train: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("train_frac", "test_frac", "val_frac_of_train"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidArgument(f"{name} must lie in (0, 1), got {v}")
        if abs(self.train_frac + self.test_frac - 1.0) > 1e-12:
            raise InvalidArgument("train_frac + test_frac must equal 1")


def split(rows: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    """Seeded shuffle into disjoint (train, val, test) lists."""
    rows = list(rows)
    n = len(rows)
    if n < 3:
        raise InvalidArgument(f"need at least 3 rows to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_test = min(max(1, round(n * spec.test_frac)), n - 2)
    n_trainval = n - n_test
    n_val = min(max(1, round(n_trainval * spec.val_frac_of_train)), n_trainval - 1)
    test = [rows[i] for i in order[:n_test]]
    val = [rows[i] for i in order[n_test:n_test + n_val]]
    train = [rows[i] for i in order[n_test + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# model inputs


def build_ps_channel(p: int, s: int, length: int = TRACE_LEN) -> np.ndarray:
    """Boxcar that is 1 on samples [p, s) and 0 elsewhere."""
    if not (0 <= p < s < length):
        raise InvalidArgument(f"need 0 <= p < s < {length}, got p={p}, s={s}")
    channel = np.zeros(length, dtype=np.float32)
    channel[p:s] = 1.0
    return channel


def _zscore(waveform: np.ndarray, trace_id: str = "") -> np.ndarray:
    out = np.zeros(waveform.shape, dtype=np.float32)
    for c, chan in enumerate(np.asarray(waveform, dtype=np.float64)):
        std = chan.std()
        if std > 0 and math.isfinite(std):
            out[c] = (chan - chan.mean()) / std
        else:
            warnings.warn(f"trace {trace_id!r} channel {c} has zero variance; left as zeros", RuntimeWarning)
    return out


def assemble_input_array(record: TraceRecord, include_ps: bool, normalize: bool = True) -> np.ndarray:
    if record.waveform is None:
        raise InvalidArgument(f"trace {record.trace_id!r} has no waveform loaded")
    wave = np.asarray(record.waveform)
    if wave.shape != (N_COMPONENTS, TRACE_LEN):
        raise InvalidArgument(f"waveform shape {wave.shape} != ({N_COMPONENTS}, {TRACE_LEN})")
    wave = _zscore(wave, record.trace_id) if normalize else wave.astype(np.float32, copy=True)
    if not include_ps:
        return wave
    ps = build_ps_channel(record.p_arrival_sample, record.s_arrival_sample, TRACE_LEN)
    return np.concatenate([wave, ps[None, :]], axis=0)


def assemble_input(record: TraceRecord, include_ps: bool, normalize: bool = True) -> Tensor:
    """Model input ``[C, 6000]``: the three components, then the PS boxcar if requested.

    With ``normalize`` each waveform component is z-scored by its own trace
    statistics; the PS channel is never rescaled.
    """
    return Tensor(assemble_input_array(record, include_ps, normalize))


class Dataset:
    """Records of one split with cached model inputs and targets."""

    def __init__(self, records: Sequence[TraceRecord], include_ps: bool, normalize: bool = True):
        if not records:
            raise InvalidArgument("empty split")
        self.records = list(records)
        self.include_ps = include_ps
        self.normalize = normalize
        self.targets = np.array([r.epicentral_km for r in self.records], dtype=np.float32)
        self.inputs = np.stack([assemble_input_array(r, include_ps, normalize) for r in self.records])
        self.inputs.flags.writeable = False
        self.targets.flags.writeable = False

    def __len__(self):
        return len(self.records)

    @property
    def channels(self) -> int:
        return self.inputs.shape[1]

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            sel = idx[start:start + batch_size]
            yield self.inputs[sel], self.targets[sel]


# ---------------------------------------------------------------------------
# synthetic traces


@dataclass
class Wavelet:
    frequency_hz: float = 5.0
    decay_per_s: float = 3.0
    amplitude: float = 1.0


@dataclass
class SyntheticSpec:
    n: int = 1000
    distance_range_km: tuple = (10.0, 110.0)
    vp_kms: float = 6.0
    vs_kms: float = 3.5
    origin_sample_range: tuple = (300, 2500)
    wavelet: Wavelet = field(default_factory=Wavelet)
    noise_sigma: float = 1.0
    arrival_visibility: float = 1.0
    seed: int = 0
    station: GeoPoint = field(default_factory=lambda: GeoPoint(38.034, -120.38))

    def __post_init__(self):
        if isinstance(self.wavelet, dict):
            self.wavelet = Wavelet(**self.wavelet)
        if isinstance(self.station, (tuple, list)):
            self.station = GeoPoint(*self.station)
        self.distance_range_km = tuple(float(v) for v in self.distance_range_km)
        self.origin_sample_range = tuple(int(v) for v in self.origin_sample_range)

    def validate(self):
        d_min, d_max = self.distance_range_km
        o_min, o_max = self.origin_sample_range
        if self.n < 1:
            raise InvalidArgument(f"n must be >= 1, got {self.n}")
        if not 0 <= d_min <= d_max:
            raise InvalidArgument(f"distance range must satisfy 0 <= d_min <= d_max, got {self.distance_range_km}")
        if not self.vp_kms > self.vs_kms > 0:
            raise InvalidArgument(f"need vp > vs > 0, got vp={self.vp_kms}, vs={self.vs_kms}")
        if not 0 <= o_min <= o_max < TRACE_LEN:
            raise InvalidArgument(f"origin sample range {self.origin_sample_range} outside the window")
        if not 0 <= self.arrival_visibility <= 1:
            raise InvalidArgument("arrival_visibility must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidArgument("noise_sigma must be >= 0")
        # even the earliest origin cannot hold the farthest S arrival
        if o_min + _s_offset(d_max, self.vp_kms, self.vs_kms) >= TRACE_LEN:
            raise InvalidArgument(
                f"d_max={d_max} km puts the S arrival beyond the {TRACE_LEN}-sample window "
                f"for every origin >= {o_min}"
            )


def sp_samples(d_km: float, vp_kms: float, vs_kms: float) -> int:
    return int(round(SAMPLING_HZ * d_km * (1.0 / vs_kms - 1.0 / vp_kms)))


def _s_offset(d_km, vp, vs) -> int:
    return int(round(SAMPLING_HZ * d_km / vp)) + sp_samples(d_km, vp, vs)


def _draw_distance(spec: SyntheticSpec, rng: np.random.Generator) -> float:
    # Uniform over the distances a 100 Hz S-P gap can tell apart: draw the
    # gap j in samples, then d = j / (100 (1/vs - 1/vp)).  Equal gaps thus
    # always mean equal distances, so the gap is strictly monotone in d.
    d_min, d_max = spec.distance_range_km
    per_km = SAMPLING_HZ * (1.0 / spec.vs_kms - 1.0 / spec.vp_kms)
    j_lo, j_hi = math.ceil(d_min * per_km), math.floor(d_max * per_km)
    if j_lo > j_hi:  # range narrower than one sample of S-P gap
        return float(rng.uniform(d_min, d_max))
    return int(rng.integers(j_lo, j_hi + 1)) / per_km


def _wavelet(n: int, onset: int, wav: Wavelet) -> np.ndarray:
    out = np.zeros(n)
    tau = np.arange(n - onset) / SAMPLING_HZ
    out[onset:] = wav.amplitude * np.exp(-wav.decay_per_s * tau) * np.sin(2 * np.pi * wav.frequency_hz * tau)
    return out


def synth_trace(spec: SyntheticSpec, rng: np.random.Generator, trace_id: str = "SYN",
                distance_km: float | None = None, origin_sample: int | None = None) -> TraceRecord:
    """Draw one synthetic event recorded at ``spec.station``.

    P arrives ``round(100 d / vp)`` samples after the origin and S follows
    after ``round(100 d (1/vs - 1/vp))`` more, so the S-P sample gap is an
    exact function of distance.  Random distances lie on the lattice of
    whole-sample S-P gaps (spacing about 0.084 km for the default speeds);
    an explicit ``distance_km`` is used as given.  Draws whose S arrival
    would leave the window are redrawn, up to 100 attempts.
    """
    o_min, o_max = spec.origin_sample_range
    for _ in range(100):
        d = _draw_distance(spec, rng) if distance_km is None else float(distance_km)
        origin = int(rng.integers(o_min, o_max + 1)) if origin_sample is None else int(origin_sample)
        p = origin + int(round(SAMPLING_HZ * d / spec.vp_kms))
        s = p + sp_samples(d, spec.vp_kms, spec.vs_kms)
        if p < s < TRACE_LEN:
            break
        if distance_km is not None and origin_sample is not None:
            break
    else:
        raise InvalidArgument("could not place P and S arrivals inside the window after 100 attempts")
    if not p < s < TRACE_LEN:
        raise InvalidArgument(f"arrivals p={p}, s={s} do not fit the {TRACE_LEN}-sample window")

    bearing = float(rng.uniform(0.0, 360.0))
    source = destination(spec.station, bearing, d)
    # P motion is mostly vertical, S mostly horizontal and transverse to the path
    b = math.radians(bearing)
    p_pol = np.array([0.4 * math.sin(b), 0.4 * math.cos(b), 1.0])
    s_pol = np.array([math.cos(b), -math.sin(b), 0.3])
    vis = spec.arrival_visibility
    signal = vis * (p_pol[:, None] * _wavelet(TRACE_LEN, p, spec.wavelet)[None, :]
                    + s_pol[:, None] * _wavelet(TRACE_LEN, s, spec.wavelet)[None, :])
    noise = rng.normal(0.0, spec.noise_sigma, size=(N_COMPONENTS, TRACE_LEN)) if spec.noise_sigma > 0 else 0.0
    waveform = (signal + noise).astype(np.float32)

    peak = np.abs(signal).max(axis=1)
    if spec.noise_sigma > 0:
        with np.errstate(divide="ignore"):
            snr = 20.0 * np.log10(peak / spec.noise_sigma)
    else:
        snr = np.where(peak > 0, np.inf, -np.inf)
    snr = tuple(float(v) for v in np.clip(snr, -100.0, 100.0))
    return TraceRecord(trace_id, p, s, spec.station, source, d, snr, waveform)


def synth_dataset(spec: SyntheticSpec) -> list:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    width = max(6, len(str(spec.n - 1)))
    return [synth_trace(spec, rng, trace_id=f"SYN{i:0{width}d}") for i in range(spec.n)]


# ---------------------------------------------------------------------------
# packed waveform store

STORE_MAGIC = b"SW6K"
_ID_BYTES = 32
_RECORD_DTYPE = np.dtype([
    ("trace_id", f"S{_ID_BYTES}"),
    ("p", "<u4"),
    ("s", "<u4"),
    ("waveform", "<f4", (N_COMPONENTS, TRACE_LEN)),
])
_HEADER = struct.Struct("<4sI")


@dataclass
class StoredTrace:
    waveform: np.ndarray
    p_arrival_sample: int
    s_arrival_sample: int


def index_path(store_path) -> Path:
    return Path(f"{store_path}.idx.csv")


def pack_store(records: Sequence[TraceRecord], path) -> dict:
    """Write waveforms and arrivals to a packed store plus its index CSV.

    Returns ``{trace_id: byte_offset}``.
    """
    buf = np.zeros(len(records), dtype=_RECORD_DTYPE)
    offsets = {}
    for i, r in enumerate(records):
        raw_id = r.trace_id.encode("utf-8")
        if len(raw_id) > _ID_BYTES:
            raise InvalidArgument(f"trace_id {r.trace_id!r} longer than {_ID_BYTES} bytes")
        if r.trace_id in offsets:
            raise InvalidArgument(f"duplicate trace_id {r.trace_id!r}")
        if r.waveform is None or np.shape(r.waveform) != (N_COMPONENTS, TRACE_LEN):
            raise InvalidArgument(f"trace {r.trace_id!r} needs a ({N_COMPONENTS}, {TRACE_LEN}) waveform")
        buf[i] = (raw_id, r.p_arrival_sample, r.s_arrival_sample, r.waveform)
        offsets[r.trace_id] = _HEADER.size + i * _RECORD_DTYPE.itemsize
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, len(records)))
        fh.write(buf.tobytes())
    with open(index_path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trace_id", "byte_offset"])
        writer.writerows(offsets.items())
    return offsets


def _read_store(path) -> np.ndarray:
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header", offset=len(head))
        magic, count = _HEADER.unpack(head)
        if magic != STORE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}", offset=0)
        expected = _HEADER.size + count * _RECORD_DTYPE.itemsize
        if size < expected:
            complete = (size - _HEADER.size) // _RECORD_DTYPE.itemsize
            raise FormatError(
                f"{path}: truncated store, {complete} of {count} traces complete",
                offset=_HEADER.size + complete * _RECORD_DTYPE.itemsize,
            )
        return np.fromfile(fh, dtype=_RECORD_DTYPE, count=count)


def unpack_store(path, ids: Iterable[str] | None = None) -> dict:
    """Read traces back as ``{trace_id: StoredTrace}``.

    With ``ids`` only those traces are returned; an unknown id raises
    :class:`NotFound`.
    """
    table = _read_store(path)
    names = [raw.rstrip(b"\0").decode("utf-8") for raw in table["trace_id"]]
    position = {name: i for i, name in enumerate(names)}
    wanted = names if ids is None else list(ids)
    out = {}
    for name in wanted:
        i = position.get(name)
        if i is None:
            raise NotFound(f"trace_id {name!r} not in store {path}")
        row = table[i]
        out[name] = StoredTrace(np.array(row["waveform"], dtype=np.float32), int(row["p"]), int(row["s"]))
    return out


# ---------------------------------------------------------------------------
# data directories


def write_data_dir(records: Sequence[TraceRecord], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    store = out_dir / STORE_NAME
    write_manifest(records, manifest)
    pack_store(records, store)
    return manifest, store


def load_data_dir(data_dir, filters: FilterSpec | None = None) -> list:
    """Load manifest rows, optionally filter them, and attach their waveforms."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / MANIFEST_NAME)
    if manifest.rejects:
        log.warning("%s: %d manifest rows rejected", data_dir, len(manifest.rejects))
    rows = manifest.rows
    if filters is not None:
        rows = apply_filters(rows, filters, manifest.has_orientation)
    stored = unpack_store(data_dir / STORE_NAME, [r.trace_id for r in rows])
    for r in rows:
        st = stored[r.trace_id]
        if (st.p_arrival_sample, st.s_arrival_sample) != (r.p_arrival_sample, r.s_arrival_sample):
            raise FormatError(f"trace {r.trace_id!r}: store arrivals disagree with the manifest")
        r.waveform = st.waveform
    return rows
