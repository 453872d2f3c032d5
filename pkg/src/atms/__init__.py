"""Software-defined train fleet platform.

Simulated trains publish GPS fixes over a standardized MQTT topic scheme;
services consume them for destination alarms, distance-based fares, seat
reservations, and compartment occupancy counts. A benchmark harness compares
MQTT against HTTP publish latency under controlled network delay.
"""

__version__ = "0.1.0"
