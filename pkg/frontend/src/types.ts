// Wire types matching the gateway's REST responses and WS frames.

export type TrainStatus = "active" | "stale";

export interface TrainPosition {
  vehicle: string;
  lat_deg: number;
  lon_deg: number;
  ts_ms: number;
  seq: number;
  status: TrainStatus;
}

export interface CompartmentReading {
  lambda_i: number;
  lambda_o: number;
  lambda_t: number;
  ts_ms: number;
}

export interface OccupancySnapshot {
  vehicle: string;
  compartments: Record<string, CompartmentReading>;
}

export type AlarmState = "armed" | "fired" | "cancelled";

export interface Alarm {
  alarm_id: string;
  user_id: string;
  vehicle: string;
  lat: number;
  lon: number;
  threshold_m: number;
  state: AlarmState;
  created_at_ms: number;
  fired_at_ms: number | null;
}

export interface UserSession {
  user_id: string;
  display_name: string;
  token: string;
  account_id: string | null;
}

/** One frame from the /ws bridge; payload is the raw bus message text. */
export interface BusEvent {
  topic: string;
  payload: string;
  ts_ms: number;
}

// payload carried on a telemetry/gps topic
export interface FixMessage {
  vehicle: string;
  ts_ms: number;
  lat_deg: number;
  lon_deg: number;
  seq: number;
}

// payload carried on an alarms topic when a destination alarm fires
export interface AlarmFired {
  alarm_id: string;
  user_id: string;
  vehicle: string;
  distance_m: number;
  ts_ms: number;
}

// payload carried on an occupancy topic
export interface OccupancyMessage {
  compartment: string;
  lambda_i: number;
  lambda_o: number;
  lambda_t: number;
  ts_ms: number;
}

export interface TapOutcome {
  result: "entry-granted" | "exit-settled" | "rejected";
  station?: string;
  ts_ms?: number;
  fare_cents?: number;
  from_station?: string;
  to_station?: string;
  balance_cents?: number;
  reason?: string;
}

export interface Reservation {
  reservation_id: string;
  account_id: string;
  vehicle_id: string;
  departure_date: string;
  compartment_id: string;
  seat_number: number;
  state: "held" | "confirmed";
}
