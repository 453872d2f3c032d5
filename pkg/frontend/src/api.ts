import type {
  Alarm,
  OccupancySnapshot,
  Reservation,
  TapOutcome,
  TrainPosition,
  UserSession,
} from "./types.js";

/** Non-2xx answer from the gateway, carrying its {error, message} body. */
export class GatewayError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "GatewayError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/**
 * Typed wrapper over the gateway REST API. Every mutation the dashboard
 * makes goes through here; views never touch the network directly.
 *
 * The fetch implementation is injectable so tests can run without a server.
 */
export class GatewayClient {
  token: string | null = null;
  private baseUrl: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["content-type"] = "application/json";
    if (this.token) headers["authorization"] = `Bearer ${this.token}`;
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (resp.status === 204) return undefined as T;
    if (!resp.ok) {
      let code = "http-error";
      let message = `HTTP ${resp.status}`;
      try {
        const doc = await resp.json();
        if (typeof doc.error === "string") code = doc.error;
        if (typeof doc.message === "string") message = doc.message;
      } catch {
        // non-JSON error body, keep the defaults
      }
      throw new GatewayError(resp.status, code, message);
    }
    return (await resp.json()) as T;
  }

  /** Registers a user and keeps the returned bearer token for later calls. */
  async createUser(displayName: string): Promise<UserSession> {
    const out = await this.request<UserSession>("POST", "/users", {
      display_name: displayName,
    });
    this.token = out.token;
    return out;
  }

  createEpass(userId: string): Promise<{ account_id: string; balance_cents: number }> {
    return this.request("POST", `/users/${encodeURIComponent(userId)}/epass`);
  }

  listTrains(): Promise<{ trains: TrainPosition[] }> {
    return this.request("GET", "/trains");
  }

  trainPosition(vehicle: string): Promise<TrainPosition> {
    return this.request("GET", `/trains/${encodeURIComponent(vehicle)}/position`);
  }

  occupancy(vehicle: string): Promise<OccupancySnapshot> {
    return this.request("GET", `/occupancy/${encodeURIComponent(vehicle)}`);
  }

  armAlarm(body: {
    vehicle: string;
    lat: number;
    lon: number;
    threshold_m: number;
  }): Promise<Alarm> {
    return this.request("POST", "/alarms", body);
  }

  listAlarms(): Promise<{ alarms: Alarm[] }> {
    return this.request("GET", "/alarms");
  }

  cancelAlarm(alarmId: string): Promise<void> {
    return this.request("DELETE", `/alarms/${encodeURIComponent(alarmId)}`);
  }

  topUp(accountId: string, amountCents: number): Promise<{ account_id: string; balance_cents: number }> {
    return this.request("POST", `/accounts/${encodeURIComponent(accountId)}/topup`, {
      amount_cents: amountCents,
    });
  }

  /**
   * Simulates a gate tap. Rejections come back as HTTP errors carrying a
   * reason code; for display purposes those are outcomes, not failures.
   */
  async tap(event: {
    account: string;
    station: string;
    direction: "in" | "out";
    ts_ms: number;
    gate: string;
  }): Promise<TapOutcome> {
    try {
      return await this.request<TapOutcome>("POST", "/taps", event);
    } catch (err) {
      if (err instanceof GatewayError) {
        return { result: "rejected", reason: err.code };
      }
      throw err;
    }
  }

  reserve(body: {
    account: string;
    vehicle: string;
    departure_date: string;
    compartment: string;
    seat: number;
  }): Promise<Reservation> {
    return this.request("POST", "/reservations", body);
  }

  metrics(): Promise<Record<string, number>> {
    return this.request("GET", "/metrics");
  }
}
