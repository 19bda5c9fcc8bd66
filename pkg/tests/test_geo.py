import math

import pytest
from hypothesis import given, settings, strategies as st

from epdist.errors import InvalidArgument
from epdist.geo import (CALIFORNIA_CENTER, EARTH_RADIUS_KM, GeoPoint, destination, haversine_km,
                        sp_interval_to_distance, within_radius)

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-179.999, 180, allow_nan=False)
points = st.builds(GeoPoint, lat, lon)


def test_identical_points_zero():
    p = GeoPoint(38.034, -120.38)
    assert haversine_km(p, p) == 0.0


def test_same_meridian_closed_form():
    # one degree of latitude: R * pi / 180
    expected = EARTH_RADIUS_KM * math.pi / 180
    assert expected == pytest.approx(111.1949, abs=5e-5)
    assert haversine_km(GeoPoint(0, 0), GeoPoint(1, 0)) == pytest.approx(expected, rel=1e-12)


def test_equatorial_antipodes():
    assert haversine_km(GeoPoint(0, 0), GeoPoint(0, 180)) == pytest.approx(math.pi * EARTH_RADIUS_KM, rel=1e-12)
    assert math.pi * EARTH_RADIUS_KM == pytest.approx(20015.087, abs=5e-4)


@pytest.mark.parametrize("lat_, lon_", [(91, 0), (-90.5, 0), (0, -180), (0, 180.01), (float("nan"), 0)])
def test_out_of_range_rejected(lat_, lon_):
    with pytest.raises(InvalidArgument):
        GeoPoint(lat_, lon_)


def test_poles_and_dateline_accepted():
    GeoPoint(90, 180)
    GeoPoint(-90, -179.9)


@settings(max_examples=200, deadline=None)
@given(points, points)
def test_symmetric_and_nonnegative(a, b):
    d = haversine_km(a, b)
    assert d == haversine_km(b, a)
    assert 0.0 <= d <= math.pi * EARTH_RADIUS_KM + 1e-9


@settings(max_examples=200, deadline=None)
@given(points, points, points)
def test_triangle_inequality(a, b, c):
    ab, bc, ac = haversine_km(a, b), haversine_km(b, c), haversine_km(a, c)
    assert ac <= (ab + bc) * (1 + 1e-9) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.builds(GeoPoint, st.floats(-80, 80), lon), st.floats(0, 360), st.floats(0, 500))
def test_destination_distance(origin, bearing, d):
    assert haversine_km(origin, destination(origin, bearing, d)) == pytest.approx(d, abs=1e-6)


def test_within_radius():
    center = GeoPoint(*CALIFORNIA_CENTER)
    assert within_radius(center, center, 300)
    east = GeoPoint(CALIFORNIA_CENTER[0], CALIFORNIA_CENTER[1] + 3)
    d = haversine_km(center, east)
    assert 260 < d < 270
    assert within_radius(center, east, 300) is True
    assert within_radius(center, east, d) is True
    assert within_radius(center, east, d - 1e-6) is False


@pytest.mark.parametrize("r", [0, -1])
def test_within_radius_rejects_nonpositive(r):
    p = GeoPoint(0, 0)
    with pytest.raises(InvalidArgument):
        within_radius(p, p, r)


def test_sp_interval_examples():
    assert sp_interval_to_distance(0, 6.0, 3.5) == 0
    # 1 / (1/3.5 - 1/6) = 21 / 2.5
    assert sp_interval_to_distance(1, 6.0, 3.5) == pytest.approx(8.4, rel=1e-14)
    assert sp_interval_to_distance(5, 6.0, 3.5) == pytest.approx(42.0, rel=1e-14)


@given(st.floats(0, 100, allow_nan=False, allow_subnormal=False))
def test_sp_interval_linear(dt):
    assert sp_interval_to_distance(2 * dt, 6.0, 3.5) == 2 * sp_interval_to_distance(dt, 6.0, 3.5)


@pytest.mark.parametrize("dt, vp, vs", [(1, 3.5, 3.5), (1, 3.0, 3.5), (-1, 6, 3.5), (1, 6, 0)])
def test_sp_interval_rejects(dt, vp, vs):
    with pytest.raises(InvalidArgument):
        sp_interval_to_distance(dt, vp, vs)
