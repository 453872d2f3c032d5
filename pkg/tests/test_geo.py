import math
import random

import pytest
from hypothesis import given, strategies as st

from atms.geo import (
    EARTH,
    EarthModel,
    GeoPoint,
    GpsFix,
    Route,
    UnknownStationError,
    distance_to_destination,
    error_distance,
    haversine_distance,
    meters_per_degree,
    project_along_route,
)

R = EARTH.radius_m


def vector_great_circle_m(a: GeoPoint, b: GeoPoint, radius_m: float = R) -> float:
    # Independent oracle: 3-D unit vectors, angle via atan2(|u x v|, u . v).
    # Shares no code path with the haversine implementation.
    def unit(p):
        lat, lon = math.radians(p.lat_deg), math.radians(p.lon_deg)
        return (
            math.cos(lat) * math.cos(lon),
            math.cos(lat) * math.sin(lon),
            math.sin(lat),
        )

    ux, uy, uz = unit(a)
    vx, vy, vz = unit(b)
    cx, cy, cz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
    cross = math.sqrt(cx * cx + cy * cy + cz * cz)
    dot = ux * vx + uy * vy + uz * vz
    return radius_m * math.atan2(cross, dot)


geo_points = st.builds(
    GeoPoint,
    lat_deg=st.floats(min_value=-90.0, max_value=90.0, allow_nan=False),
    lon_deg=st.floats(min_value=-180.0, max_value=180.0, allow_nan=False),
)


class TestGeoPoint:
    def test_rejects_out_of_range_latitude(self):
        with pytest.raises(ValueError):
            GeoPoint(91.0, 0.0)

    def test_rejects_out_of_range_longitude(self):
        with pytest.raises(ValueError):
            GeoPoint(0.0, -180.5)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            GeoPoint(float("nan"), 0.0)

    def test_rejects_infinite_longitude(self):
        with pytest.raises(ValueError):
            GeoPoint(0.0, float("inf"))


class TestGpsFix:
    def test_rejects_negative_timestamp(self):
        with pytest.raises(ValueError):
            GpsFix("t1", GeoPoint(0, 0), -1, 1)

    def test_rejects_empty_vehicle(self):
        with pytest.raises(ValueError):
            GpsFix("", GeoPoint(0, 0), 0, 1)


class TestEarthModel:
    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError):
            EarthModel(0.0)
        with pytest.raises(ValueError):
            EarthModel(-1.0)


class TestHaversine:
    def test_identical_points_zero(self):
        p = GeoPoint(6.9331, 79.8501)
        assert haversine_distance(p, p) == 0.0

    def test_half_great_circle(self):
        d = haversine_distance(GeoPoint(0, 0), GeoPoint(0, 180))
        assert d == pytest.approx(math.pi * R, abs=1e-6)

    def test_one_degree_meridian_arc(self):
        d = haversine_distance(GeoPoint(0, 0), GeoPoint(1, 0))
        assert d == pytest.approx(R * math.pi / 180.0, abs=1e-6)

    def test_matches_independent_oracle_on_random_pairs(self):
        rng = random.Random(20260816)
        for _ in range(1000):
            a = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            got = haversine_distance(a, b)
            want = vector_great_circle_m(a, b)
            assert abs(got - want) / max(want, 1e-9) < 1e-9

    def test_antipodal_points_no_nan(self):
        for a, b in [
            (GeoPoint(90, 0), GeoPoint(-90, 0)),
            (GeoPoint(0, 0), GeoPoint(0, 180)),
            (GeoPoint(45.0, 10.0), GeoPoint(-45.0, -170.0)),
            # Slight perturbations around the antipode stress the sqrt clamp.
            (GeoPoint(45.0, 10.0), GeoPoint(-44.9999999999, -170.0)),
            (GeoPoint(0.0, 179.9999999999), GeoPoint(0.0, -180.0)),
        ]:
            d = haversine_distance(a, b)
            assert math.isfinite(d)
            assert d <= math.pi * R + 1e-6

    @given(geo_points, geo_points)
    def test_symmetry_exact(self, a, b):
        assert haversine_distance(a, b) == haversine_distance(b, a)

    @given(geo_points, geo_points)
    def test_bounds(self, a, b):
        d = haversine_distance(a, b)
        assert 0.0 <= d <= math.pi * R + 1e-6

    @given(geo_points)
    def test_identity(self, p):
        assert haversine_distance(p, p) == 0.0


class TestErrorDistance:
    def test_zero_when_measurement_is_exact(self):
        p = GeoPoint(7.2906, 80.6337)
        assert error_distance(p, p) == 0.0

    def test_small_longitude_offset(self):
        # 0.001 degree of longitude on the equator is an analytic arc.
        d = error_distance(GeoPoint(0, 0), GeoPoint(0, 0.001))
        assert d == pytest.approx(R * math.pi / 180.0 * 0.001, rel=1e-9)
        assert d == pytest.approx(111.19, abs=0.01)


class TestDistanceToDestination:
    def test_fix_at_destination(self):
        dest = GeoPoint(6.0535, 80.2210)
        fix = GpsFix("t1", dest, 1_700_000_000_000, 1)
        assert distance_to_destination(fix, dest) == 0.0

    def test_one_degree_on_equator(self):
        fix = GpsFix("t1", GeoPoint(0, 10), 0, 1)
        d = distance_to_destination(fix, GeoPoint(0, 11))
        assert d == pytest.approx(R * math.pi / 180.0, abs=1e-6)

    def test_definitional_consistency(self):
        fix = GpsFix("t1", GeoPoint(6.9, 79.8), 0, 1)
        dest = GeoPoint(7.3, 80.6)
        assert distance_to_destination(fix, dest) == haversine_distance(fix.point, dest)


def make_route():
    # Equatorial polyline with analytically known segment lengths.
    pts = tuple(GeoPoint(0.0, lon / 10.0) for lon in range(6))
    return Route("r1", pts, (("s-a", 0), ("s-b", 2), ("s-c", 5)))


class TestRoute:
    def test_rejects_single_point(self):
        with pytest.raises(ValueError):
            Route("r", (GeoPoint(0, 0),), ())

    def test_rejects_duplicate_consecutive_points(self):
        with pytest.raises(ValueError):
            Route("r", (GeoPoint(0, 0), GeoPoint(0, 0)), ())

    def test_rejects_unsorted_stations(self):
        pts = (GeoPoint(0, 0), GeoPoint(0, 1), GeoPoint(0, 2))
        with pytest.raises(ValueError):
            Route("r", pts, (("a", 2), ("b", 1)))

    def test_rejects_station_out_of_polyline(self):
        pts = (GeoPoint(0, 0), GeoPoint(0, 1))
        with pytest.raises(ValueError):
            Route("r", pts, (("a", 5),))


class TestProjectAlongRoute:
    def test_same_station_zero(self):
        r = make_route()
        assert project_along_route(r, "s-b", "s-b") == 0.0

    def test_analytic_two_point_route(self):
        r = Route("r2", (GeoPoint(0, 0), GeoPoint(0, 1)), (("a", 0), ("b", 1)))
        d = project_along_route(r, "a", "b")
        assert d == pytest.approx(R * math.pi / 180.0, abs=1e-6)

    def test_symmetry(self):
        r = make_route()
        assert project_along_route(r, "s-a", "s-c") == project_along_route(r, "s-c", "s-a")

    def test_segment_sum_is_additive(self):
        r = make_route()
        ab = project_along_route(r, "s-a", "s-b")
        bc = project_along_route(r, "s-b", "s-c")
        ac = project_along_route(r, "s-a", "s-c")
        assert ac == pytest.approx(ab + bc, rel=1e-12)

    def test_unknown_station(self):
        r = make_route()
        with pytest.raises(UnknownStationError):
            project_along_route(r, "s-a", "s-zz")


class TestMetersPerDegree:
    def test_equator(self):
        m_lat, m_lon = meters_per_degree(0.0)
        assert m_lat == pytest.approx(R * math.pi / 180.0)
        assert m_lon == pytest.approx(m_lat)

    def test_longitude_shrinks_with_latitude(self):
        m_lat, m_lon = meters_per_degree(60.0)
        assert m_lon == pytest.approx(m_lat * 0.5, rel=1e-9)
