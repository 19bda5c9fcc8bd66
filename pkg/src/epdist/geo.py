"""Great-circle helpers used to build distance targets and regional subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidArgument

EARTH_RADIUS_KM = 6371.0

# geographic center of California; override through FilterSpec.local_center
CALIFORNIA_CENTER = (36.7783, -119.4179)


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or math.isnan(self.lat):
            raise InvalidArgument(f"latitude range: {self.lat} not in [-90, 90]")
        if not (-180.0 < self.lon <= 180.0) or math.isnan(self.lon):
            raise InvalidArgument(f"longitude range: {self.lon} not in (-180, 180]")


def haversine_km(a: GeoPoint, b: GeoPoint, radius_km: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance in kilometres on a sphere.

    The expression is symmetric in its arguments term by term, so
    ``haversine_km(a, b) == haversine_km(b, a)`` holds exactly.
    """
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    h = min(1.0, h)
    return 2.0 * radius_km * math.asin(math.sqrt(h))


def within_radius(center: GeoPoint, p: GeoPoint, r_km: float) -> bool:
    if not r_km > 0:
        raise InvalidArgument(f"radius must be positive, got {r_km}")
    return haversine_km(center, p) <= r_km


def destination(origin: GeoPoint, bearing_deg: float, distance_km: float,
                radius_km: float = EARTH_RADIUS_KM) -> GeoPoint:
    """Point reached by travelling ``distance_km`` along a great circle."""
    delta = distance_km / radius_km
    theta = math.radians(bearing_deg)
    phi1, lmb1 = math.radians(origin.lat), math.radians(origin.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    y = math.sin(theta) * math.sin(delta) * math.cos(phi1)
    x = math.cos(delta) - math.sin(phi1) * sin_phi2
    lmb2 = lmb1 + math.atan2(y, x)
    lon = (math.degrees(lmb2) + 180.0) % 360.0 - 180.0
    if lon == -180.0:
        lon = 180.0
    return GeoPoint(math.degrees(phi2), lon)


def sp_interval_to_distance(dt_s: float, vp_kms: float, vs_kms: float) -> float:
    """Distance implied by an S-minus-P delay for constant body-wave speeds."""
    if dt_s < 0:
        raise InvalidArgument(f"S-P interval must be >= 0, got {dt_s}")
    if not (vp_kms > vs_kms > 0):
        raise InvalidArgument(f"need vp > vs > 0, got vp={vp_kms}, vs={vs_kms}")
    return dt_s / (1.0 / vs_kms - 1.0 / vp_kms)
