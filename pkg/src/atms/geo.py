"""Spherical geodesy for vehicle tracking.

Great-circle distances between GPS coordinates, the error distance between a
true and a measured position, and station-to-station lengths along a route
polyline. All public APIs take decimal degrees; conversion to radians is
internal. Everything here is pure and safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

MEAN_EARTH_RADIUS_M = 6_371_000.0


class UnknownStationError(KeyError):
    """Raised when a station id is not present on the given route."""


@dataclass(frozen=True)
class EarthModel:
    """Spherical earth of a fixed radius in meters."""

    radius_m: float = MEAN_EARTH_RADIUS_M

    def __post_init__(self) -> None:
        if not (math.isfinite(self.radius_m) and self.radius_m > 0):
            raise ValueError(f"earth radius must be finite and positive, got {self.radius_m!r}")


#: Default earth model shared by every service in the platform.
EARTH = EarthModel()


@dataclass(frozen=True)
class GeoPoint:
    """A WGS-84 style coordinate in decimal degrees.

    Latitude must lie in [-90, +90] and longitude in [-180, +180]; both must
    be finite. Range violations are rejected at construction so downstream
    math never sees garbage.
    """

    lat_deg: float
    lon_deg: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat_deg) and math.isfinite(self.lon_deg)):
            raise ValueError(f"coordinates must be finite, got ({self.lat_deg!r}, {self.lon_deg!r})")
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude out of range [-90, 90]: {self.lat_deg!r}")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise ValueError(f"longitude out of range [-180, 180]: {self.lon_deg!r}")


@dataclass(frozen=True)
class GpsFix:
    """A timestamped vehicle position.

    ``seq`` is assigned by the producer and must increase strictly per
    vehicle; consumers use it to drop stale or replayed fixes.
    """

    vehicle_id: str
    point: GeoPoint
    timestamp_ms: int
    seq: int

    def __post_init__(self) -> None:
        if not self.vehicle_id:
            raise ValueError("vehicle_id must be non-empty")
        if self.timestamp_ms < 0:
            raise ValueError(f"timestamp_ms must be nonnegative, got {self.timestamp_ms}")
        if self.seq < 0:
            raise ValueError(f"seq must be nonnegative, got {self.seq}")


@dataclass(frozen=True)
class Route:
    """An ordered polyline with named stations pinned to polyline vertices.

    Station indices must be strictly increasing and consecutive polyline
    points must differ, so segment lengths are always positive.
    """

    route_id: str
    polyline: tuple[GeoPoint, ...]
    stations: tuple[tuple[str, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "polyline", tuple(self.polyline))
        object.__setattr__(self, "stations", tuple((sid, idx) for sid, idx in self.stations))
        if len(self.polyline) < 2:
            raise ValueError("route polyline needs at least 2 points")
        for i in range(1, len(self.polyline)):
            if self.polyline[i] == self.polyline[i - 1]:
                raise ValueError(f"consecutive polyline points identical at index {i}")
        last = -1
        for sid, idx in self.stations:
            if not 0 <= idx < len(self.polyline):
                raise ValueError(f"station {sid!r} index {idx} outside polyline")
            if idx <= last:
                raise ValueError("station indices must be strictly increasing")
            last = idx

    def station_index(self, station_id: str) -> int:
        for sid, idx in self.stations:
            if sid == station_id:
                return idx
        raise UnknownStationError(station_id)

    def station_ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.stations)


def haversine_distance(a: GeoPoint, b: GeoPoint, earth: EarthModel = EARTH) -> float:
    """Great-circle distance in meters between two points on the sphere.

    Uses the haversine form: symmetric, zero for identical points, and at
    most pi * radius. The square-root operand is clamped into [0, 1] so
    rounding near antipodal points can never produce a NaN.
    """
    lat1 = math.radians(a.lat_deg)
    lat2 = math.radians(b.lat_deg)
    half_dlat = (lat2 - lat1) / 2.0
    half_dlon = (math.radians(b.lon_deg) - math.radians(a.lon_deg)) / 2.0
    h = math.sin(half_dlat) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(half_dlon) ** 2
    h = min(max(h, 0.0), 1.0)
    return 2.0 * earth.radius_m * math.asin(math.sqrt(h))


def error_distance(true_point: GeoPoint, measured_point: GeoPoint, earth: EarthModel = EARTH) -> float:
    """Distance in meters between a true position and its measured position.

    This is the accuracy metric for a GPS receiver: the great-circle
    distance between where the vehicle actually was and where the fix says
    it was.
    """
    return haversine_distance(true_point, measured_point, earth)


def distance_to_destination(fix: GpsFix, destination: GeoPoint, earth: EarthModel = EARTH) -> float:
    """Straight-line (great-circle) meters from a fix to a destination.

    Deliberately point-to-point rather than along-track: rail geometry is
    close enough to straight that the direct distance is an adequate
    arrival estimate, and it needs no route knowledge.
    """
    return haversine_distance(fix.point, destination, earth)


def project_along_route(
    route: Route,
    from_station: str,
    to_station: str,
    earth: EarthModel = EARTH,
) -> float:
    """Sum of polyline segment lengths between two stations, in meters.

    Symmetric in its station arguments. Raises :class:`UnknownStationError`
    if either station is not on the route.
    """
    i = route.station_index(from_station)
    j = route.station_index(to_station)
    if i > j:
        i, j = j, i
    total = 0.0
    for k in range(i, j):
        total += haversine_distance(route.polyline[k], route.polyline[k + 1], earth)
    return total


def meters_per_degree(lat_deg: float, earth: EarthModel = EARTH) -> tuple[float, float]:
    """(meters per degree latitude, meters per degree longitude) at a latitude."""
    m_per_deg = earth.radius_m * math.pi / 180.0
    return m_per_deg, m_per_deg * math.cos(math.radians(lat_deg))


def polyline_cumulative_m(polyline: tuple[GeoPoint, ...], earth: EarthModel = EARTH) -> list[float]:
    """Cumulative distance in meters at each polyline vertex, starting at 0."""
    out = [0.0]
    for i in range(1, len(polyline)):
        out.append(out[-1] + haversine_distance(polyline[i - 1], polyline[i], earth))
    return out
