import os
import zlib

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pytest

from epdist import data as D

os.environ.pop("EPD_SEED", None)


@pytest.fixture(scope="session")
def small_records():
    return D.synth_dataset(D.SyntheticSpec(n=40, seed=3))


@pytest.fixture
def data_dir(tmp_path, small_records):
    D.write_data_dir(small_records, tmp_path / "data")
    return tmp_path / "data"


def make_record(trace_id="T0", p=1000, s=1500, km=50.0, snr=(30.0, 30.0, 30.0),
                station=(38.034, -120.38), source=None, waveform=True, orientation=None):
    from epdist.geo import GeoPoint, destination
    st = GeoPoint(*station)
    src = GeoPoint(*source) if source else destination(st, 45.0, km)
    wave = np.random.default_rng(zlib.crc32(trace_id.encode())).normal(size=(3, 6000)).astype(np.float32) \
        if waveform else None
    return D.TraceRecord(trace_id, p, s, st, src, km, tuple(snr), wave, orientation)


# published grid results (size/gamma/lr rows in the order printed)
RESNET_LOCAL_NO_PS = [51.74, 49.21, 48.81, 47.08, 47.06, 24.93, 23.57, 22.28, 19.9,
                      19.86, 19.78, 19.58, 19.35, 19.06, 18.44, 18.06, 15.99, 13.33]
TCN_GLOBAL_PS = [3.51, 3.48, 3.45, 3.45, 3.44, 3.43, 2.96, 2.94, 2.93,
                 2.91, 2.9, 2.88, 2.86, 2.84, 2.81, 2.74, 2.7, 2.64]


# -- acceptance reporting: one line per criterion at the end of the run ------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2].removeprefix("Skipped: ")
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" ({detail})" if detail else ""))
