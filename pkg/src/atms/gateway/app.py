"""HTTP application: REST endpoints plus the WebSocket bus bridge.

All responses are JSON with snake_case keys; errors always carry
``{"error": <code>, "message": <text>}``. Authentication is the bearer
token issued at registration, one static token per user. That is fine
for a desk-scale deployment and nothing more.
"""

from __future__ import annotations

import asyncio
import logging
import queue
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass

from fastapi import Depends, FastAPI, Request, Response, WebSocket
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from atms import topics
from atms.alarms import AlarmService, AlarmState, AlarmStateError, DestinationAlarm, UnknownAlarmError
from atms.gateway.state import GatewayState, TrainSnapshot, UserProfile
from atms.geo import GeoPoint, Route
from atms.mqtt.client import MqttClient
from atms.sim.engine import FixParseError, parse_fix
from atms.ticketing import (
    BlockedAccountError,
    EntryGranted,
    ExitSettled,
    FareRule,
    Rejected,
    SeatTakenError,
    TicketingService,
    UnknownAccountError,
    UnknownSeatError,
    parse_tap,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GatewayConfig:
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    host: str = "127.0.0.1"
    port: int = 8080
    ledger_path: str | None = None
    routes: tuple[Route, ...] = ()
    fare_rule: FareRule | None = None
    seat_layout: dict[str, int] | None = None
    staleness_ms: int = 15_000
    connect_broker: bool = True
    static_dir: str | None = None


class _BusHandle:
    """Late-bound publish target; the client exists only while serving."""

    def __init__(self) -> None:
        self.client: MqttClient | None = None

    def publish(self, topic: str, payload: bytes, qos: int = 1) -> None:
        client = self.client
        if client is None:
            log.warning("dropping publish to %s: bus not connected", topic)
            return
        client.publish(topic, payload, qos)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


class UserCreate(BaseModel):
    display_name: str = Field(min_length=1, max_length=120)
    user_id: str | None = None


class AlarmCreate(BaseModel):
    vehicle: str
    lat: float
    lon: float
    threshold_m: float


class TopUpBody(BaseModel):
    amount_cents: int


class ReservationCreate(BaseModel):
    account: str
    vehicle: str
    departure_date: str
    compartment: str
    seat: int


def _alarm_dict(a: DestinationAlarm) -> dict:
    return {
        "alarm_id": a.alarm_id,
        "user_id": a.user_id,
        "vehicle": a.vehicle_id,
        "lat": a.destination.lat_deg,
        "lon": a.destination.lon_deg,
        "threshold_m": a.threshold_m,
        "state": a.state.value,
        "created_at_ms": a.created_at_ms,
        "fired_at_ms": a.fired_at_ms,
    }


def _position_dict(snap: TrainSnapshot, now_ms: int, staleness_ms: int) -> dict:
    return {
        "vehicle": snap.vehicle_id,
        "lat_deg": snap.fix.point.lat_deg,
        "lon_deg": snap.fix.point.lon_deg,
        "ts_ms": snap.fix.timestamp_ms,
        "seq": snap.fix.seq,
        "status": snap.status(now_ms, staleness_ms),
    }


def create_app(
    config: GatewayConfig | None = None,
    *,
    state: GatewayState | None = None,
    ticketing: TicketingService | None = None,
    alarms: AlarmService | None = None,
) -> FastAPI:
    config = config or GatewayConfig()
    state = state or GatewayState(staleness_ms=config.staleness_ms)
    bus = _BusHandle()
    if ticketing is None:
        kwargs = dict(routes=config.routes)
        if config.fare_rule is not None:
            kwargs["fare_rule"] = config.fare_rule
        if config.seat_layout is not None:
            kwargs["seat_layout"] = config.seat_layout
        if config.ledger_path:
            ticketing = TicketingService.load(config.ledger_path, **kwargs)
        else:
            ticketing = TicketingService(**kwargs)
    if alarms is None:
        alarms = AlarmService(publish=bus.publish, user_exists=state.user_exists)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        client = None
        if config.connect_broker:
            client = MqttClient(client_id=f"gw-{uuid.uuid4().hex[:8]}")
            client.connect(config.broker_host, config.broker_port)
            client.subscribe("pts/#", qos=1, handler=state.handle_bus)
            alarms.attach(client)
            ticketing.attach(client)
            bus.client = client
        app.state.bus_client = client
        try:
            yield
        finally:
            bus.client = None
            if client is not None:
                try:
                    client.disconnect()
                except Exception:
                    client.close()
            ticketing.close()

    app = FastAPI(title="train bus gateway", lifespan=lifespan)
    app.state.gw = state
    app.state.ticketing = ticketing
    app.state.alarms = alarms
    app.state.config = config

    @app.exception_handler(ApiError)
    async def api_error_handler(_req: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"error": exc.code, "message": exc.message}
        )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400, content={"error": "bad-request", "message": str(exc.errors()[:3])}
        )

    def current_user(request: Request) -> UserProfile:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise ApiError(401, "unauthorized", "missing bearer token")
        user = state.user_for_token(header[7:].strip())
        if user is None:
            raise ApiError(401, "unauthorized", "unknown token")
        return user

    def owned_account(user: UserProfile, account_id: str) -> str:
        if user.account_id is None:
            raise ApiError(409, "no-account", "user has no linked account")
        if user.account_id != account_id:
            raise ApiError(404, "not-found", f"account {account_id} not found for user")
        return account_id

    # -- users ---------------------------------------------------------

    @app.post("/users", status_code=201)
    def create_user(body: UserCreate):
        try:
            profile = state.create_user(body.display_name, body.user_id)
        except KeyError:
            raise ApiError(409, "duplicate-user", f"user {body.user_id} already exists")
        except ValueError as e:
            raise ApiError(400, "bad-request", str(e))
        out = profile.public_dict()
        out["token"] = profile.token  # shown once, at registration
        return out

    @app.get("/users/{user_id}")
    def get_user(user_id: str):
        profile = state.get_user(user_id)
        if profile is None:
            raise ApiError(404, "not-found", f"user {user_id} not found")
        return profile.public_dict()

    @app.post("/users/{user_id}/epass", status_code=201)
    def create_epass(user_id: str, user: UserProfile = Depends(current_user)):
        if user.user_id != user_id:
            raise ApiError(404, "not-found", f"user {user_id} not found for token")
        if user.account_id is not None:
            raise ApiError(409, "already-linked", f"user already has account {user.account_id}")
        account = ticketing.create_account(f"a-{uuid.uuid4().hex[:8]}")
        state.link_account(user_id, account.account_id)
        return {"account_id": account.account_id, "balance_cents": account.balance_cents}

    # -- trains ----------------------------------------------------------

    @app.get("/trains")
    def list_trains():
        now = state.now_ms()
        return {
            "trains": [
                _position_dict(s, now, config.staleness_ms) for s in state.snapshots()
            ]
        }

    @app.get("/trains/{vehicle_id}/position")
    def train_position(vehicle_id: str):
        snap = state.snapshot(vehicle_id)
        if snap is None:
            raise ApiError(404, "not-found", f"no fix seen for {vehicle_id}")
        return _position_dict(snap, state.now_ms(), config.staleness_ms)

    @app.get("/occupancy/{vehicle_id}")
    def occupancy(vehicle_id: str):
        readings = state.occupancy_for(vehicle_id)
        if readings is None:
            raise ApiError(404, "not-found", f"no occupancy seen for {vehicle_id}")
        return {
            "vehicle": vehicle_id,
            "compartments": {
                cid: {
                    "lambda_i": r.lambda_i,
                    "lambda_o": r.lambda_o,
                    "lambda_t": r.lambda_t,
                    "ts_ms": r.ts_ms,
                }
                for cid, r in sorted(readings.items())
            },
        }

    # -- alarms ----------------------------------------------------------

    @app.post("/alarms", status_code=201)
    def arm_alarm(body: AlarmCreate, user: UserProfile = Depends(current_user)):
        if not topics.is_valid_token(body.vehicle):
            raise ApiError(400, "bad-request", f"bad vehicle id {body.vehicle!r}")
        try:
            destination = GeoPoint(body.lat, body.lon)
            alarm = alarms.arm(user.user_id, body.vehicle, destination, body.threshold_m)
        except ValueError as e:
            raise ApiError(400, "bad-request", str(e))
        return _alarm_dict(alarm)

    @app.get("/alarms")
    def list_alarms(user: UserProfile = Depends(current_user)):
        return {"alarms": [_alarm_dict(a) for a in alarms.list_alarms(user.user_id)]}

    @app.delete("/alarms/{alarm_id}", status_code=204)
    def cancel_alarm(alarm_id: str, user: UserProfile = Depends(current_user)):
        try:
            alarm = alarms.get(alarm_id)
        except UnknownAlarmError:
            raise ApiError(404, "not-found", f"alarm {alarm_id} not found")
        if alarm.user_id != user.user_id:
            raise ApiError(404, "not-found", f"alarm {alarm_id} not found")
        try:
            alarms.cancel(alarm_id)
        except AlarmStateError as e:
            raise ApiError(409, "already-fired", str(e))
        return Response(status_code=204)

    # -- ticketing -------------------------------------------------------

    @app.post("/accounts/{account_id}/topup")
    def top_up(account_id: str, body: TopUpBody, user: UserProfile = Depends(current_user)):
        owned_account(user, account_id)
        try:
            balance = ticketing.top_up(account_id, body.amount_cents)
        except UnknownAccountError:
            raise ApiError(404, "not-found", f"account {account_id} not found")
        except BlockedAccountError:
            raise ApiError(409, "blocked-account", f"account {account_id} is blocked")
        except ValueError as e:
            raise ApiError(400, "bad-request", str(e))
        return {"account_id": account_id, "balance_cents": balance}

    @app.post("/taps")
    async def tap(request: Request):
        raw = await request.body()
        try:
            event = parse_tap(raw)
        except ValueError as e:
            raise ApiError(400, "bad-request", str(e))
        outcome = ticketing.tap(event)
        if isinstance(outcome, EntryGranted):
            return {"result": "entry-granted", "station": outcome.station_id, "ts_ms": outcome.ts_ms}
        if isinstance(outcome, ExitSettled):
            return {
                "result": "exit-settled",
                "fare_cents": outcome.fare_cents,
                "from_station": outcome.from_station,
                "to_station": outcome.to_station,
                "balance_cents": outcome.balance_cents,
            }
        assert isinstance(outcome, Rejected)
        status = {
            "insufficient-balance": 402,
            "unknown-account": 404,
        }.get(outcome.reason, 409)
        return JSONResponse(
            status_code=status,
            content={"error": outcome.reason, "message": f"tap rejected: {outcome.reason}",
                     "result": "rejected", "reason": outcome.reason},
        )

    @app.post("/reservations", status_code=201)
    def reserve(body: ReservationCreate, user: UserProfile = Depends(current_user)):
        owned_account(user, body.account)
        try:
            res = ticketing.reserve_seat(
                body.account, body.vehicle, body.departure_date, body.compartment, body.seat
            )
        except SeatTakenError as e:
            raise ApiError(409, "seat-taken", str(e))
        except UnknownSeatError as e:
            raise ApiError(404, "not-found", f"no such seat {e}")
        except UnknownAccountError:
            raise ApiError(404, "not-found", f"account {body.account} not found")
        except BlockedAccountError:
            raise ApiError(409, "blocked-account", f"account {body.account} is blocked")
        return {
            "reservation_id": res.reservation_id,
            "account_id": res.account_id,
            "vehicle_id": res.vehicle_id,
            "departure_date": res.departure_date,
            "compartment_id": res.compartment_id,
            "seat_number": res.seat_number,
            "state": res.state.value,
        }

    # -- metrics and ingest ------------------------------------------------

    @app.get("/metrics")
    def metrics():
        return state.metrics_dict()

    @app.post("/ingest/fix")
    async def ingest_fix(request: Request):
        raw = await request.body()
        try:
            parse_fix(raw)
        except FixParseError as e:
            raise ApiError(400, "bad-request", str(e))
        state.metrics["ingested_fixes"] += 1
        return Response(status_code=200)

    # -- websocket bridge ---------------------------------------------------

    @app.websocket("/ws")
    async def ws_stream(websocket: WebSocket):
        filter_str = websocket.query_params.get("filter", "pts/#")
        await websocket.accept()
        try:
            filt = topics.TopicFilter.from_string(filter_str)
        except topics.TopicFilterError as e:
            await websocket.send_json({"error": "bad-filter", "message": str(e)})
            await websocket.close(code=4400)
            return
        sub_id = state.add_ws(filt)
        q = state.ws_queue(sub_id)
        assert q is not None
        recv_task = asyncio.create_task(websocket.receive())
        try:
            while True:
                if recv_task.done():
                    msg = recv_task.result()
                    if msg.get("type") == "websocket.disconnect":
                        break
                    recv_task = asyncio.create_task(websocket.receive())
                sent_any = False
                while True:
                    try:
                        event = q.get_nowait()
                    except queue.Empty:
                        break
                    await websocket.send_json(event)
                    sent_any = True
                if not sent_any:
                    await asyncio.sleep(0.02)
        except Exception:
            pass
        finally:
            recv_task.cancel()
            state.remove_ws(sub_id)

    if config.static_dir:
        # mounted last so API routes keep precedence; serves the dashboard
        # bundle same-origin, which keeps the browser out of CORS territory
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="static")

    return app
