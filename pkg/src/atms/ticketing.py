"""E-pass ticketing: accounts, tap-in/tap-out fares, top-ups, seat booking.

Money is integer cents throughout. Every mutation appends a typed record to
a JSON-lines ledger, and replaying that file rebuilds the full service
state, so balances are always explainable as a sum of entries.

Tap handling is idempotent on the exact event: the tap channel rides QoS 1,
which may redeliver, and a duplicate tap must echo the original outcome
rather than charge twice.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

from atms import topics
from atms.geo import Route, UnknownStationError, polyline_cumulative_m, project_along_route

log = logging.getLogger(__name__)

TAP_CHANNEL = "tickets/taps"
JOURNEY_TTL_MS = 24 * 3600 * 1000
_DEDUP_CACHE_SIZE = 4096


class UnknownAccountError(KeyError):
    pass


class BlockedAccountError(RuntimeError):
    pass


class SeatTakenError(RuntimeError):
    pass


class UnknownSeatError(KeyError):
    pass


class UnknownReservationError(KeyError):
    pass


class AccountStatus(str, Enum):
    ACTIVE = "active"
    BLOCKED = "blocked"


class TapDirection(str, Enum):
    IN = "in"
    OUT = "out"


class EntryKind(str, Enum):
    TOP_UP = "topup"
    FARE = "fare"
    REFUND = "refund"


class ReservationState(str, Enum):
    HELD = "held"
    CONFIRMED = "confirmed"
    RELEASED = "released"


@dataclass(frozen=True)
class Account:
    account_id: str
    balance_cents: int
    status: AccountStatus

    def __post_init__(self) -> None:
        if self.balance_cents < 0:
            raise ValueError(f"balance_cents must be >= 0, got {self.balance_cents}")


@dataclass(frozen=True)
class TapEvent:
    account_id: str
    station_id: str
    direction: TapDirection
    ts_ms: int
    gate_id: str

    def payload(self) -> bytes:
        doc = {
            "account": self.account_id,
            "station": self.station_id,
            "direction": self.direction.value,
            "ts_ms": self.ts_ms,
            "gate": self.gate_id,
        }
        return json.dumps(doc, separators=(",", ":")).encode("ascii")


def parse_tap(payload: bytes) -> TapEvent:
    try:
        doc = json.loads(payload)
        return TapEvent(
            account_id=doc["account"],
            station_id=doc["station"],
            direction=TapDirection(doc["direction"]),
            ts_ms=int(doc["ts_ms"]),
            gate_id=doc["gate"],
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValueError(f"bad tap payload: {e}") from e


@dataclass(frozen=True)
class LedgerEntry:
    entry_id: str
    account_id: str
    kind: EntryKind
    amount_cents: int  # signed: top-ups/refunds positive, fares negative
    ts_ms: int
    journey: tuple[str, str | None] | None = None


@dataclass(frozen=True)
class SeatReservation:
    reservation_id: str
    account_id: str
    vehicle_id: str
    departure_date: str  # ISO date, e.g. "2026-08-16"
    compartment_id: str
    seat_number: int
    state: ReservationState


# -- tap outcomes -------------------------------------------------------------

@dataclass(frozen=True)
class EntryGranted:
    station_id: str
    ts_ms: int


@dataclass(frozen=True)
class ExitSettled:
    fare_cents: int
    from_station: str
    to_station: str
    balance_cents: int


@dataclass(frozen=True)
class Rejected:
    reason: str


REJECT_REASONS = (
    "unknown-account",
    "blocked-account",
    "insufficient-balance",
    "no-open-journey",
    "journey-already-open",
    "stations-not-connected",
    "stale-timestamp",
)


# -- fares --------------------------------------------------------------------

@dataclass(frozen=True)
class FareRule:
    base_cents: int
    rate_cents_per_km: int

    def __post_init__(self) -> None:
        if self.base_cents < 0 or self.rate_cents_per_km < 0:
            raise ValueError("fare components must be >= 0")


def _started_km(meters: float) -> int:
    # Round to whole meters first so float dust cannot bump a trip into the
    # next kilometer band.
    m = round(meters)
    return -(-m // 1000)


def compute_fare(route: Route, from_station: str, to_station: str, rule: FareRule) -> int:
    """base + (whole started km along the route) * per-km rate, in cents.

    Symmetric in its stations; raises UnknownStationError if either station
    is not on the route.
    """
    meters = project_along_route(route, from_station, to_station)
    return rule.base_cents + _started_km(meters) * rule.rate_cents_per_km


class _AccountState:
    __slots__ = ("balance", "status", "lock")

    def __init__(self):
        self.balance = 0
        self.status = AccountStatus.ACTIVE
        self.lock = threading.Lock()


class _OpenJourney:
    __slots__ = ("station_id", "ts_ms", "gate_id")

    def __init__(self, station_id: str, ts_ms: int, gate_id: str):
        self.station_id = station_id
        self.ts_ms = ts_ms
        self.gate_id = gate_id


class TicketingService:
    """All ticketing state behind per-resource locks.

    Account mutations serialize on the account's own lock, seat operations
    on a shared reservation lock; a registry lock guards the maps that hold
    them. Conservation (sum of balances == sum of signed entries) holds at
    every quiescent point.
    """

    def __init__(
        self,
        routes: tuple[Route, ...] = (),
        fare_rule: FareRule = FareRule(base_cents=2000, rate_cents_per_km=300),
        ledger_path: str | None = None,
        seat_layout: dict[str, int] | None = None,
        clock_ms=None,
    ):
        self.routes = tuple(routes)
        self.fare_rule = fare_rule
        self.seat_layout = dict(seat_layout or {"c1": 40, "c2": 40})
        self._clock_ms = clock_ms or (lambda: int(time.time() * 1000))
        self._registry = threading.RLock()
        self._accounts: dict[str, _AccountState] = {}
        self._open: dict[str, _OpenJourney] = {}
        self._entries: list[LedgerEntry] = []
        self._reservations: dict[str, SeatReservation] = {}
        self._seat_owner: dict[tuple[str, str, str, int], str] = {}
        self._res_lock = threading.Lock()
        self._gate_last_ts: dict[str, int] = {}
        self._tap_dedup: OrderedDict[tuple, object] = OrderedDict()
        self._anomalies = 0
        self._file_lock = threading.Lock()
        self._ledger_path = ledger_path
        self._ledger_file = open(ledger_path, "a", encoding="utf-8") if ledger_path else None
        self._max_fare = self._compute_max_fare()

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def load(cls, ledger_path: str, **kwargs) -> "TicketingService":
        """Rebuild a service from its ledger file, then keep appending to it.

        A missing file is a first boot: start empty, create it on append.
        """
        svc = cls(ledger_path=None, **kwargs)
        try:
            f = open(ledger_path, encoding="utf-8")
        except FileNotFoundError:
            f = None
        if f is not None:
            with f:
                for line_no, line in enumerate(f, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        svc._replay(json.loads(line))
                    except (json.JSONDecodeError, KeyError, ValueError) as e:
                        raise ValueError(f"{ledger_path}:{line_no}: bad ledger record: {e}") from e
        svc._ledger_path = ledger_path
        svc._ledger_file = open(ledger_path, "a", encoding="utf-8")
        return svc

    def close(self) -> None:
        if self._ledger_file is not None:
            self._ledger_file.close()
            self._ledger_file = None

    # -- accounts --------------------------------------------------------------

    def create_account(self, account_id: str | None = None) -> Account:
        account_id = account_id or f"a-{uuid.uuid4().hex[:8]}"
        with self._registry:
            if account_id in self._accounts:
                raise ValueError(f"account {account_id!r} already exists")
            self._accounts[account_id] = _AccountState()
        self._append({"type": "account", "account_id": account_id, "ts_ms": self._clock_ms()})
        return Account(account_id, 0, AccountStatus.ACTIVE)

    def get_account(self, account_id: str) -> Account:
        st = self._state(account_id)
        with st.lock:
            return Account(account_id, st.balance, st.status)

    def set_status(self, account_id: str, status: AccountStatus) -> Account:
        st = self._state(account_id)
        with st.lock:
            st.status = status
            snapshot = Account(account_id, st.balance, st.status)
        self._append({
            "type": "status", "account_id": account_id,
            "status": status.value, "ts_ms": self._clock_ms(),
        })
        return snapshot

    def top_up(self, account_id: str, amount_cents: int) -> int:
        if amount_cents <= 0:
            raise ValueError(f"top-up must be positive, got {amount_cents}")
        st = self._state(account_id)
        with st.lock:
            if st.status is not AccountStatus.ACTIVE:
                raise BlockedAccountError(account_id)
            st.balance += amount_cents
            balance = st.balance
            self._record_entry(account_id, EntryKind.TOP_UP, amount_cents, self._clock_ms())
        return balance

    # -- taps --------------------------------------------------------------------

    def tap(self, event: TapEvent):
        """Process one gate tap; returns EntryGranted, ExitSettled, or Rejected."""
        key = (event.account_id, event.gate_id, event.ts_ms, event.direction.value, event.station_id)
        outcome = None
        with self._registry:
            if key in self._tap_dedup:
                return self._tap_dedup[key]  # redelivered event: echo outcome
            if event.ts_ms < self._gate_last_ts.get(event.gate_id, 0):
                outcome = Rejected("stale-timestamp")
            else:
                self._gate_last_ts[event.gate_id] = event.ts_ms
            st = self._accounts.get(event.account_id)
        if outcome is None:
            if st is None:
                outcome = Rejected("unknown-account")
            else:
                with st.lock:
                    self._settle_expired_locked(event.account_id, st, event.ts_ms)
                    if event.direction is TapDirection.IN:
                        outcome = self._tap_in_locked(event, st)
                    else:
                        outcome = self._tap_out_locked(event, st)
        if isinstance(outcome, Rejected):
            self._anomalies += 1
            log.info("tap rejected (%s): %s at %s", outcome.reason, event.account_id, event.station_id)
        with self._registry:
            self._tap_dedup[key] = outcome
            while len(self._tap_dedup) > _DEDUP_CACHE_SIZE:
                self._tap_dedup.popitem(last=False)
        return outcome

    def handle_tap_message(self, topic: str, payload: bytes):
        """Bus entry point for the tap channel; bad input is logged, not fatal."""
        try:
            addr = topics.parse(topic)
        except topics.TopicParseError:
            return None
        if addr.channel != TAP_CHANNEL:
            return None
        try:
            event = parse_tap(payload)
        except ValueError as e:
            log.warning("dropping bad tap on %s: %s", topic, e)
            return None
        return self.tap(event)

    def attach(self, client) -> None:
        client.subscribe("pts/+/+/+/+/+/tickets/taps", qos=1, handler=self.handle_tap_message)

    # -- seats -------------------------------------------------------------------

    def reserve_seat(
        self,
        account_id: str,
        vehicle_id: str,
        departure_date: str,
        compartment_id: str,
        seat_number: int,
    ) -> SeatReservation:
        seats = self.seat_layout.get(compartment_id)
        if seats is None or not 1 <= seat_number <= seats:
            raise UnknownSeatError(f"{compartment_id}/{seat_number}")
        st = self._state(account_id)
        with st.lock:
            if st.status is not AccountStatus.ACTIVE:
                raise BlockedAccountError(account_id)
        key = (vehicle_id, departure_date, compartment_id, seat_number)
        with self._res_lock:
            owner = self._seat_owner.get(key)
            if owner is not None:
                raise SeatTakenError(f"seat {compartment_id}/{seat_number} already reserved")
            res = SeatReservation(
                reservation_id=f"rsv-{uuid.uuid4().hex[:10]}",
                account_id=account_id,
                vehicle_id=vehicle_id,
                departure_date=departure_date,
                compartment_id=compartment_id,
                seat_number=seat_number,
                state=ReservationState.CONFIRMED,
            )
            self._reservations[res.reservation_id] = res
            self._seat_owner[key] = res.reservation_id
        self._append(self._reservation_record(res))
        return res

    def release_seat(self, reservation_id: str) -> SeatReservation:
        with self._res_lock:
            res = self._reservations.get(reservation_id)
            if res is None:
                raise UnknownReservationError(reservation_id)
            if res.state is ReservationState.RELEASED:
                return res
            res = SeatReservation(
                reservation_id=res.reservation_id,
                account_id=res.account_id,
                vehicle_id=res.vehicle_id,
                departure_date=res.departure_date,
                compartment_id=res.compartment_id,
                seat_number=res.seat_number,
                state=ReservationState.RELEASED,
            )
            self._reservations[reservation_id] = res
            key = (res.vehicle_id, res.departure_date, res.compartment_id, res.seat_number)
            if self._seat_owner.get(key) == reservation_id:
                del self._seat_owner[key]
        self._append(self._reservation_record(res))
        return res

    def reservations(self, vehicle_id: str | None = None, departure_date: str | None = None):
        with self._res_lock:
            out = list(self._reservations.values())
        if vehicle_id is not None:
            out = [r for r in out if r.vehicle_id == vehicle_id]
        if departure_date is not None:
            out = [r for r in out if r.departure_date == departure_date]
        return out

    # -- inspection ---------------------------------------------------------------

    def ledger_entries(self, account_id: str | None = None) -> list[LedgerEntry]:
        with self._registry:
            entries = list(self._entries)
        if account_id is not None:
            entries = [e for e in entries if e.account_id == account_id]
        return entries

    def balances(self) -> dict[str, int]:
        with self._registry:
            ids = list(self._accounts)
        return {aid: self.get_account(aid).balance_cents for aid in ids}

    def open_journeys(self) -> dict[str, str]:
        with self._registry:
            return {aid: j.station_id for aid, j in self._open.items()}

    @property
    def anomaly_count(self) -> int:
        return self._anomalies

    def conservation(self) -> dict[str, int]:
        """Totals for the money-conservation identity at a quiescent point.

        balances == topups + refunds - fares  (all nonnegative magnitudes)
        """
        entries = self.ledger_entries()
        topups = sum(e.amount_cents for e in entries if e.kind is EntryKind.TOP_UP)
        refunds = sum(e.amount_cents for e in entries if e.kind is EntryKind.REFUND)
        fares = sum(-e.amount_cents for e in entries if e.kind is EntryKind.FARE)
        return {
            "balances": sum(self.balances().values()),
            "topups": topups,
            "refunds": refunds,
            "fares": fares,
        }

    def replay_balances(self) -> dict[str, int]:
        """Balances recomputed purely from ledger entries."""
        out: dict[str, int] = {}
        with self._registry:
            for aid in self._accounts:
                out[aid] = 0
            for e in self._entries:
                out[e.account_id] = out.get(e.account_id, 0) + e.amount_cents
        return out

    # -- internals ------------------------------------------------------------------

    def _state(self, account_id: str) -> _AccountState:
        with self._registry:
            st = self._accounts.get(account_id)
        if st is None:
            raise UnknownAccountError(account_id)
        return st

    def _tap_in_locked(self, event: TapEvent, st: _AccountState):
        if st.status is not AccountStatus.ACTIVE:
            return Rejected("blocked-account")
        with self._registry:
            if event.account_id in self._open:
                return Rejected("journey-already-open")
        if st.balance < self.fare_rule.base_cents:
            return Rejected("insufficient-balance")
        with self._registry:
            self._open[event.account_id] = _OpenJourney(event.station_id, event.ts_ms, event.gate_id)
        self._append({
            "type": "journey-open", "account_id": event.account_id,
            "station": event.station_id, "ts_ms": event.ts_ms, "gate": event.gate_id,
        })
        return EntryGranted(station_id=event.station_id, ts_ms=event.ts_ms)

    def _tap_out_locked(self, event: TapEvent, st: _AccountState):
        with self._registry:
            journey = self._open.get(event.account_id)
        if journey is None:
            return Rejected("no-open-journey")
        route = self._route_connecting(journey.station_id, event.station_id)
        if route is None:
            return Rejected("stations-not-connected")
        fare = compute_fare(route, journey.station_id, event.station_id, self.fare_rule)
        fare = min(fare, st.balance)  # never drive a balance negative
        st.balance -= fare
        self._record_entry(
            event.account_id, EntryKind.FARE, -fare, event.ts_ms,
            journey=(journey.station_id, event.station_id),
        )
        with self._registry:
            self._open.pop(event.account_id, None)
        self._append({"type": "journey-close", "account_id": event.account_id, "ts_ms": event.ts_ms})
        return ExitSettled(
            fare_cents=fare,
            from_station=journey.station_id,
            to_station=event.station_id,
            balance_cents=st.balance,
        )

    def _settle_expired_locked(self, account_id: str, st: _AccountState, now_ms: int) -> None:
        """Charge the max fare for a journey left open past the TTL."""
        with self._registry:
            journey = self._open.get(account_id)
            if journey is None or now_ms - journey.ts_ms <= JOURNEY_TTL_MS:
                return
            self._open.pop(account_id, None)
        fare = min(self._max_fare, st.balance)
        st.balance -= fare
        self._record_entry(
            account_id, EntryKind.FARE, -fare, now_ms, journey=(journey.station_id, None),
        )
        self._append({"type": "journey-close", "account_id": account_id, "ts_ms": now_ms})
        log.warning("journey for %s expired; charged max fare %d cents", account_id, fare)

    def _route_connecting(self, a: str, b: str) -> Route | None:
        for route in self.routes:
            try:
                route.station_index(a)
                route.station_index(b)
                return route
            except UnknownStationError:
                continue
        return None

    def _compute_max_fare(self) -> int:
        worst = 0
        for route in self.routes:
            total_m = polyline_cumulative_m(route.polyline)[-1]
            worst = max(worst, _started_km(total_m) * self.fare_rule.rate_cents_per_km)
        return self.fare_rule.base_cents + worst

    def _record_entry(self, account_id, kind, amount_cents, ts_ms, journey=None) -> LedgerEntry:
        entry = LedgerEntry(
            entry_id=f"e-{uuid.uuid4().hex[:12]}",
            account_id=account_id,
            kind=kind,
            amount_cents=amount_cents,
            ts_ms=ts_ms,
            journey=journey,
        )
        with self._registry:
            self._entries.append(entry)
        self._append({
            "type": "entry", "entry_id": entry.entry_id, "account_id": account_id,
            "kind": kind.value, "amount_cents": amount_cents, "ts_ms": ts_ms,
            "from_station": journey[0] if journey else None,
            "to_station": journey[1] if journey else None,
        })
        return entry

    def _reservation_record(self, res: SeatReservation) -> dict:
        return {
            "type": "reservation", "reservation_id": res.reservation_id,
            "account_id": res.account_id, "vehicle_id": res.vehicle_id,
            "date": res.departure_date, "compartment": res.compartment_id,
            "seat": res.seat_number, "state": res.state.value, "ts_ms": self._clock_ms(),
        }

    def _append(self, record: dict) -> None:
        if self._ledger_file is None:
            return
        with self._file_lock:
            self._ledger_file.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._ledger_file.flush()

    def _replay(self, record: dict) -> None:
        kind = record["type"]
        if kind == "account":
            with self._registry:
                self._accounts.setdefault(record["account_id"], _AccountState())
        elif kind == "status":
            self._accounts[record["account_id"]].status = AccountStatus(record["status"])
        elif kind == "entry":
            st = self._accounts[record["account_id"]]
            st.balance += record["amount_cents"]
            journey = None
            if record.get("from_station") is not None:
                journey = (record["from_station"], record.get("to_station"))
            self._entries.append(LedgerEntry(
                entry_id=record["entry_id"],
                account_id=record["account_id"],
                kind=EntryKind(record["kind"]),
                amount_cents=record["amount_cents"],
                ts_ms=record["ts_ms"],
                journey=journey,
            ))
        elif kind == "journey-open":
            self._open[record["account_id"]] = _OpenJourney(
                record["station"], record["ts_ms"], record["gate"]
            )
        elif kind == "journey-close":
            self._open.pop(record["account_id"], None)
        elif kind == "reservation":
            res = SeatReservation(
                reservation_id=record["reservation_id"],
                account_id=record["account_id"],
                vehicle_id=record["vehicle_id"],
                departure_date=record["date"],
                compartment_id=record["compartment"],
                seat_number=record["seat"],
                state=ReservationState(record["state"]),
            )
            self._reservations[res.reservation_id] = res
            key = (res.vehicle_id, res.departure_date, res.compartment_id, res.seat_number)
            if res.state is ReservationState.RELEASED:
                if self._seat_owner.get(key) == res.reservation_id:
                    del self._seat_owner[key]
            else:
                self._seat_owner[key] = res.reservation_id
        else:
            raise ValueError(f"unknown ledger record type {kind!r}")
