"""Deterministic train motion simulator publishing GPS fixes to the bus."""

from atms.sim.engine import (
    BusPublisher,
    FixParseError,
    Simulator,
    fix_payload,
    fix_topic,
    parse_fix,
    step,
)
from atms.sim.scenario import (
    NoiseModel,
    Scenario,
    ScenarioError,
    TrainSpec,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
)

__all__ = [
    "BusPublisher",
    "FixParseError",
    "NoiseModel",
    "Scenario",
    "ScenarioError",
    "Simulator",
    "TrainSpec",
    "fix_payload",
    "fix_topic",
    "load_scenario",
    "parse_fix",
    "scenario_from_dict",
    "scenario_to_dict",
    "step",
]
