"""Scenario description for the train simulator.

A scenario bundles the routes, the trains that ride them, the GPS noise
model, and the master seed. Everything a run produces is a pure function of
this object, which is what makes replays byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from atms import topics
from atms.geo import GeoPoint, Route


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean isotropic 2-D Gaussian position error, in meters per axis.

    With per-axis deviation sigma the error magnitude is Rayleigh
    distributed with mean sigma * sqrt(pi / 2); sigma = 19.15 m yields a
    mean offset of about 24 m.
    """

    sigma_m: float = 0.0

    def __post_init__(self) -> None:
        if not self.sigma_m >= 0.0:
            raise ScenarioError(f"sigma_m must be >= 0, got {self.sigma_m!r}")


@dataclass(frozen=True)
class TrainSpec:
    vehicle_id: str
    route_id: str
    travel_service: str
    region: str
    line_id: str
    speed_mps: float
    start_time_ms: int = 0
    fix_interval_ms: int = 1000

    def __post_init__(self) -> None:
        if not self.speed_mps > 0:
            raise ScenarioError(f"speed_mps must be > 0, got {self.speed_mps!r}")
        if self.fix_interval_ms < 100:
            raise ScenarioError(f"fix_interval_ms must be >= 100, got {self.fix_interval_ms!r}")
        if self.start_time_ms < 0:
            raise ScenarioError(f"start_time_ms must be >= 0, got {self.start_time_ms!r}")
        # Token validity is enforced here so bad names fail at load time, not
        # at first publish.
        try:
            self.topic_address()
        except ValueError as e:
            raise ScenarioError(f"train {self.vehicle_id!r}: {e}") from e

    def topic_address(self) -> topics.TopicAddress:
        return topics.TopicAddress(
            region=self.region,
            method="train",
            travel_service=self.travel_service,
            line_id=self.line_id,
            vehicle_id=self.vehicle_id,
            channel="telemetry/gps",
        )


@dataclass(frozen=True)
class Scenario:
    routes: tuple[Route, ...]
    trains: tuple[TrainSpec, ...]
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "trains", tuple(self.trains))
        if not (0 <= self.seed < 2**64):
            raise ScenarioError(f"seed must fit in 64 bits, got {self.seed!r}")
        route_ids = [r.route_id for r in self.routes]
        if len(set(route_ids)) != len(route_ids):
            raise ScenarioError("duplicate route_id")
        vehicle_ids = [t.vehicle_id for t in self.trains]
        if len(set(vehicle_ids)) != len(vehicle_ids):
            raise ScenarioError("duplicate vehicle_id")
        known = set(route_ids)
        for t in self.trains:
            if t.route_id not in known:
                raise ScenarioError(f"train {t.vehicle_id!r} references unknown route {t.route_id!r}")

    def route_of(self, train: TrainSpec) -> Route:
        for r in self.routes:
            if r.route_id == train.route_id:
                return r
        raise KeyError(train.route_id)

    def train(self, vehicle_id: str) -> TrainSpec:
        for t in self.trains:
            if t.vehicle_id == vehicle_id:
                return t
        raise KeyError(vehicle_id)


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        routes = tuple(
            Route(
                route_id=r["route_id"],
                polyline=tuple(GeoPoint(lat, lon) for lat, lon in r["polyline"]),
                stations=tuple((sid, idx) for sid, idx in r.get("stations", [])),
            )
            for r in doc["routes"]
        )
        trains = tuple(
            TrainSpec(
                vehicle_id=t["vehicle_id"],
                route_id=t["route_id"],
                travel_service=t["travel_service"],
                region=t["region"],
                line_id=t["line_id"],
                speed_mps=float(t["speed_mps"]),
                start_time_ms=int(t.get("start_time_ms", 0)),
                fix_interval_ms=int(t.get("fix_interval_ms", 1000)),
            )
            for t in doc["trains"]
        )
        noise = NoiseModel(sigma_m=float(doc.get("noise", {}).get("sigma_m", 0.0)))
        seed = int(doc.get("seed", 0))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioError(f"malformed scenario document: {e}") from e
    return Scenario(routes=routes, trains=trains, noise=noise, seed=seed)


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "seed": sc.seed,
        "noise": {"sigma_m": sc.noise.sigma_m},
        "routes": [
            {
                "route_id": r.route_id,
                "polyline": [[p.lat_deg, p.lon_deg] for p in r.polyline],
                "stations": [[sid, idx] for sid, idx in r.stations],
            }
            for r in sc.routes
        ],
        "trains": [
            {
                "vehicle_id": t.vehicle_id,
                "route_id": t.route_id,
                "travel_service": t.travel_service,
                "region": t.region,
                "line_id": t.line_id,
                "speed_mps": t.speed_mps,
                "start_time_ms": t.start_time_ms,
                "fix_interval_ms": t.fix_interval_ms,
            }
            for t in sc.trains
        ],
    }


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{path}: not valid JSON: {e}") from e
    return scenario_from_dict(doc)
