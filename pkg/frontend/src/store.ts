import type { FeedStatus } from "./livefeed.js";
import type {
  Alarm,
  AlarmFired,
  BusEvent,
  CompartmentReading,
  FixMessage,
  OccupancyMessage,
  TapOutcome,
  TrainPosition,
  TrainStatus,
} from "./types.js";

export interface TrainView {
  vehicle: string;
  lat_deg: number;
  lon_deg: number;
  seq: number;
  ts_ms: number;
  /** wall-clock ms when this fix reached the browser; drives stale flagging */
  seen_ms: number;
  status: TrainStatus;
}

export interface Notice {
  kind: "alarm" | "conflict" | "feed" | "info";
  text: string;
  at_ms: number;
}

export interface FareDisplay {
  fare_cents: number;
  from_station: string;
  to_station: string;
}

/**
 * Holds everything the dashboard renders. State changes only in response
 * to gateway data (WS frames or REST responses) and to explicit user
 * actions; positions are never invented or extrapolated client-side.
 *
 * The single optimistic path is top-ups: the pending amount is shown
 * immediately and reconciled against the balance the server returns.
 */
export class DashboardStore {
  trains = new Map<string, TrainView>();
  occupancy = new Map<string, Record<string, CompartmentReading>>();
  alarms: Alarm[] = [];
  notices: Notice[] = [];
  feed: FeedStatus = "closed";
  feedRetryMs: number | null = null;
  lastFare: FareDisplay | null = null;
  /** fix age beyond which a train is flagged stale; mirrors the gateway's window */
  stalenessMs = 15_000;

  private confirmedBalance: number | null = null;
  private pendingTopUpCents = 0;
  private notifiedAlarms = new Set<string>();
  private listeners: Array<() => void> = [];

  constructor(private now: () => number = () => Date.now()) {}

  subscribe(fn: () => void): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit(): void {
    for (const fn of [...this.listeners]) fn();
  }

  // ---- live feed ingest ----------------------------------------------

  setFeed(status: FeedStatus, retryInMs: number | null): void {
    this.feed = status;
    this.feedRetryMs = retryInMs;
    this.emit();
  }

  /** Routes one WS frame by its topic's vehicle and channel levels. */
  handleBusEvent(ev: BusEvent): void {
    const levels = ev.topic.split("/");
    if (levels.length < 7 || levels[0] !== "pts") return;
    const vehicle = levels[5];
    const channel = levels.slice(6).join("/");
    if (channel === "telemetry/gps") this.applyFixPayload(vehicle, ev.payload);
    else if (channel === "occupancy") this.applyOccupancyPayload(vehicle, ev.payload);
    else if (channel === "alarms") this.applyAlarmPayload(ev.payload);
    // tap traffic and unknown channels are not rendered live
  }

  private applyFixPayload(vehicle: string, payload: string): void {
    let msg: FixMessage;
    try {
      msg = JSON.parse(payload);
    } catch {
      return;
    }
    if (
      typeof msg.seq !== "number" ||
      typeof msg.lat_deg !== "number" ||
      typeof msg.lon_deg !== "number"
    ) {
      return;
    }
    const cur = this.trains.get(vehicle);
    // at-least-once delivery can replay or reorder; newest seq wins
    if (cur && msg.seq <= cur.seq) return;
    this.trains.set(vehicle, {
      vehicle,
      lat_deg: msg.lat_deg,
      lon_deg: msg.lon_deg,
      seq: msg.seq,
      ts_ms: msg.ts_ms,
      seen_ms: this.now(),
      status: "active",
    });
    this.emit();
  }

  private applyOccupancyPayload(vehicle: string, payload: string): void {
    let msg: OccupancyMessage;
    try {
      msg = JSON.parse(payload);
    } catch {
      return;
    }
    if (typeof msg.compartment !== "string" || typeof msg.lambda_t !== "number") return;
    const reading: CompartmentReading = {
      lambda_i: msg.lambda_i,
      lambda_o: msg.lambda_o,
      lambda_t: msg.lambda_t,
      ts_ms: msg.ts_ms,
    };
    if (this.mergeReading(vehicle, msg.compartment, reading)) this.emit();
  }

  private mergeReading(vehicle: string, compartment: string, r: CompartmentReading): boolean {
    let comps = this.occupancy.get(vehicle);
    if (!comps) {
      comps = {};
      this.occupancy.set(vehicle, comps);
    }
    const cur = comps[compartment];
    if (cur && r.ts_ms <= cur.ts_ms) return false;
    comps[compartment] = r;
    return true;
  }

  private applyAlarmPayload(payload: string): void {
    let msg: AlarmFired;
    try {
      msg = JSON.parse(payload);
    } catch {
      return;
    }
    if (typeof msg.alarm_id !== "string") return;
    // an alarm may be re-delivered; the user sees one notification per alarm
    if (this.notifiedAlarms.has(msg.alarm_id)) return;
    this.notifiedAlarms.add(msg.alarm_id);
    this.notices.push({
      kind: "alarm",
      text: `Destination alarm: ${msg.vehicle} is ${Math.round(msg.distance_m)} m away`,
      at_ms: this.now(),
    });
    this.alarms = this.alarms.map((a) =>
      a.alarm_id === msg.alarm_id ? { ...a, state: "fired", fired_at_ms: msg.ts_ms } : a,
    );
    this.emit();
  }

  /** Re-evaluates stale flags from fix age; call on a timer. */
  sweep(): void {
    const now = this.now();
    let changed = false;
    for (const t of this.trains.values()) {
      const status: TrainStatus = now - t.seen_ms <= this.stalenessMs ? "active" : "stale";
      if (status !== t.status) {
        t.status = status;
        changed = true;
      }
    }
    if (changed) this.emit();
  }

  // ---- REST snapshot merges ------------------------------------------

  /**
   * Merges a GET /trains snapshot. A snapshot entry wins only if it is at
   * least as new as what the feed already delivered, so a slow poll can
   * never roll a marker backwards.
   */
  loadTrains(list: TrainPosition[]): void {
    let changed = false;
    for (const p of list) {
      const cur = this.trains.get(p.vehicle);
      if (cur && p.seq < cur.seq) continue;
      if (cur && p.seq === cur.seq) {
        if (cur.status !== p.status) {
          cur.status = p.status;
          changed = true;
        }
        continue;
      }
      this.trains.set(p.vehicle, {
        vehicle: p.vehicle,
        lat_deg: p.lat_deg,
        lon_deg: p.lon_deg,
        seq: p.seq,
        ts_ms: p.ts_ms,
        seen_ms: this.now(),
        status: p.status,
      });
      changed = true;
    }
    if (changed) this.emit();
  }

  loadOccupancy(vehicle: string, compartments: Record<string, CompartmentReading>): void {
    let changed = false;
    for (const [cid, r] of Object.entries(compartments)) {
      if (this.mergeReading(vehicle, cid, r)) changed = true;
    }
    if (changed) this.emit();
  }

  setAlarms(list: Alarm[]): void {
    this.alarms = list;
    this.emit();
  }

  // ---- account -------------------------------------------------------

  /** Balance as confirmed by the gateway plus any top-ups still in flight. */
  displayedBalance(): number | null {
    if (this.confirmedBalance === null) return null;
    return this.confirmedBalance + this.pendingTopUpCents;
  }

  setBalance(cents: number): void {
    this.confirmedBalance = cents;
    this.emit();
  }

  /** Optimistically shows a top-up before the gateway confirms it. */
  beginTopUp(amountCents: number): void {
    this.pendingTopUpCents += amountCents;
    this.emit();
  }

  /**
   * Settles one optimistic top-up. Pass the server balance on success or
   * null on failure; either way the pending amount is retired and the
   * display falls back to server truth.
   */
  settleTopUp(amountCents: number, serverBalance: number | null): void {
    this.pendingTopUpCents -= amountCents;
    if (this.pendingTopUpCents < 0) this.pendingTopUpCents = 0;
    if (serverBalance !== null) this.confirmedBalance = serverBalance;
    this.emit();
  }

  applyTap(outcome: TapOutcome): void {
    if (outcome.result === "exit-settled") {
      this.lastFare = {
        fare_cents: outcome.fare_cents ?? 0,
        from_station: outcome.from_station ?? "?",
        to_station: outcome.to_station ?? "?",
      };
      if (typeof outcome.balance_cents === "number") {
        this.confirmedBalance = outcome.balance_cents;
      }
    } else if (outcome.result === "rejected") {
      this.notices.push({
        kind: "info",
        text: `Tap rejected: ${outcome.reason ?? "unknown"}`,
        at_ms: this.now(),
      });
    }
    this.emit();
  }

  // ---- notices ---------------------------------------------------------

  pushNotice(kind: Notice["kind"], text: string): void {
    this.notices.push({ kind, text, at_ms: this.now() });
    this.emit();
  }

  dismissNotice(index: number): void {
    if (index >= 0 && index < this.notices.length) {
      this.notices.splice(index, 1);
      this.emit();
    }
  }
}
