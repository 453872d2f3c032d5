// Browser entry point: wires the store, the live feed, and the REST client
// to a static DOM. Everything testable lives in the other modules; this
// file is deliberately thin glue.

import { GatewayClient, GatewayError } from "./api.js";
import { submitAlarm, type AlarmFormInput, type FieldErrors } from "./alarmform.js";
import { LiveFeed } from "./livefeed.js";
import { boundsOf, drawScene, unproject, type LatLon, type TrainMarker, type Viewport } from "./mapview.js";
import { SeatGrid } from "./seats.js";
import { DashboardStore } from "./store.js";

// Static outline of the demo coastal line; background decoration only,
// train markers come exclusively from gateway data.
const ROUTE_OUTLINE: LatLon[] = [
  { lat: 6.93, lon: 79.85 },
  { lat: 6.86, lon: 79.87 },
  { lat: 6.78, lon: 79.89 },
  { lat: 6.66, lon: 79.92 },
  { lat: 6.47, lon: 79.98 },
  { lat: 6.28, lon: 80.04 },
  { lat: 6.12, lon: 80.1 },
  { lat: 6.03, lon: 80.22 },
];

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

function cents(amount: number | null): string {
  if (amount === null) return "-";
  return (amount / 100).toFixed(2);
}

function main(): void {
  const base = window.location.origin;
  const wsUrl = base.replace(/^http/, "ws") + "/ws?filter=pts/%23";
  const client = new GatewayClient(base);
  const store = new DashboardStore();
  const seatGrid = new SeatGrid(client, 40);

  const session = {
    user_id: null as string | null,
    account_id: null as string | null,
  };

  const canvas = byId<HTMLCanvasElement>("map-canvas");
  const ctx = canvas.getContext("2d");
  const viewport: Viewport = { width: canvas.width, height: canvas.height, pad: 20 };
  const mapBounds = boundsOf(ROUTE_OUTLINE);

  const banner = byId<HTMLDivElement>("feed-banner");
  const trainsPanel = byId<HTMLDivElement>("trains-panel");
  const occupancyPanel = byId<HTMLDivElement>("occupancy-panel");
  const alarmList = byId<HTMLUListElement>("alarm-list");
  const noticesPanel = byId<HTMLDivElement>("notices");
  const balanceEl = byId<HTMLSpanElement>("balance");
  const fareEl = byId<HTMLDivElement>("fare-display");
  const seatsEl = byId<HTMLDivElement>("seat-grid");

  // ---- rendering -------------------------------------------------------

  function render(): void {
    if (store.feed === "open") {
      banner.className = "banner hidden";
      banner.textContent = "";
    } else {
      banner.className = "banner";
      banner.textContent =
        store.feed === "reconnecting" && store.feedRetryMs !== null
          ? `Live feed down, retrying in ${(store.feedRetryMs / 1000).toFixed(1)} s`
          : `Live feed: ${store.feed}`;
    }

    if (ctx) {
      const markers: TrainMarker[] = [...store.trains.values()].map((t) => ({
        vehicle: t.vehicle,
        lat: t.lat_deg,
        lon: t.lon_deg,
        stale: t.status === "stale",
      }));
      drawScene(ctx, viewport, ROUTE_OUTLINE, markers, mapBounds);
    }

    trainsPanel.innerHTML = "";
    for (const t of [...store.trains.values()].sort((a, b) => a.vehicle.localeCompare(b.vehicle))) {
      const row = document.createElement("div");
      row.className = t.status === "stale" ? "train stale" : "train";
      row.textContent = `${t.vehicle}  ${t.lat_deg.toFixed(5)}, ${t.lon_deg.toFixed(5)}  seq ${t.seq} (${t.status})`;
      trainsPanel.appendChild(row);
    }

    occupancyPanel.innerHTML = "";
    for (const [vehicle, comps] of store.occupancy) {
      for (const [cid, r] of Object.entries(comps)) {
        const row = document.createElement("div");
        row.textContent = `${vehicle}/${cid}: ${r.lambda_t} aboard (in ${r.lambda_i}, out ${r.lambda_o})`;
        occupancyPanel.appendChild(row);
      }
    }

    alarmList.innerHTML = "";
    for (const a of store.alarms) {
      const li = document.createElement("li");
      li.textContent = `${a.vehicle} within ${a.threshold_m} m of (${a.lat.toFixed(4)}, ${a.lon.toFixed(4)}) [${a.state}] `;
      if (a.state === "armed") {
        const btn = document.createElement("button");
        btn.textContent = "cancel";
        btn.onclick = () => void cancelAlarm(a.alarm_id);
        li.appendChild(btn);
      }
      alarmList.appendChild(li);
    }

    noticesPanel.innerHTML = "";
    store.notices.forEach((n, i) => {
      const div = document.createElement("div");
      div.className = `notice ${n.kind}`;
      div.textContent = n.text + " ";
      const btn = document.createElement("button");
      btn.textContent = "x";
      btn.onclick = () => store.dismissNotice(i);
      div.appendChild(btn);
      noticesPanel.appendChild(div);
    });

    balanceEl.textContent = cents(store.displayedBalance());
    fareEl.textContent = store.lastFare
      ? `Last fare: ${cents(store.lastFare.fare_cents)} (${store.lastFare.from_station} to ${store.lastFare.to_station})`
      : "";

    renderSeats();
  }

  function seatContext(): { vehicle: string; date: string; compartment: string } {
    return {
      vehicle: byId<HTMLInputElement>("seat-vehicle").value.trim(),
      date: byId<HTMLInputElement>("seat-date").value.trim(),
      compartment: byId<HTMLInputElement>("seat-compartment").value.trim(),
    };
  }

  function renderSeats(): void {
    const { vehicle, date, compartment } = seatContext();
    seatsEl.innerHTML = "";
    if (!vehicle || !date || !compartment) return;
    seatGrid.seats(vehicle, date, compartment).forEach((state, idx) => {
      const btn = document.createElement("button");
      btn.textContent = String(idx + 1);
      btn.className = `seat ${state}`;
      btn.disabled = state !== "unknown" || session.account_id === null;
      btn.onclick = () => void bookSeat(idx + 1);
      seatsEl.appendChild(btn);
    });
  }

  store.subscribe(render);

  // ---- live feed ---------------------------------------------------------

  const feed = new LiveFeed(wsUrl);
  feed.onEvent = (ev) => store.handleBusEvent(ev);
  feed.onStatus = (status, retryMs) => store.setFeed(status, retryMs);
  feed.start();
  setInterval(() => store.sweep(), 1000);

  // seed markers so a mid-journey page load is not empty until the next fix
  client
    .listTrains()
    .then((doc) => store.loadTrains(doc.trains))
    .catch(() => undefined);

  // ---- account flows -------------------------------------------------

  byId<HTMLButtonElement>("register-btn").onclick = async () => {
    const name = byId<HTMLInputElement>("display-name").value.trim();
    if (!name) {
      store.pushNotice("info", "Enter a display name first");
      return;
    }
    try {
      const user = await client.createUser(name);
      session.user_id = user.user_id;
      const pass = await client.createEpass(user.user_id);
      session.account_id = pass.account_id;
      store.setBalance(pass.balance_cents);
      store.pushNotice("info", `Registered ${user.user_id}, e-pass ${pass.account_id}`);
    } catch (err) {
      store.pushNotice("info", `Registration failed: ${(err as Error).message}`);
    }
  };

  byId<HTMLButtonElement>("topup-btn").onclick = async () => {
    const account = session.account_id;
    if (!account) {
      store.pushNotice("info", "Register first");
      return;
    }
    const amount = Math.round(Number(byId<HTMLInputElement>("topup-amount").value) * 100);
    if (!Number.isFinite(amount) || amount <= 0) {
      store.pushNotice("info", "Top-up amount must be positive");
      return;
    }
    store.beginTopUp(amount);
    try {
      const out = await client.topUp(account, amount);
      store.settleTopUp(amount, out.balance_cents);
    } catch (err) {
      store.settleTopUp(amount, null);
      store.pushNotice("info", `Top-up failed: ${(err as Error).message}`);
    }
  };

  async function tap(direction: "in" | "out"): Promise<void> {
    const account = session.account_id;
    if (!account) {
      store.pushNotice("info", "Register first");
      return;
    }
    const station = byId<HTMLInputElement>("tap-station").value.trim() || "alpha";
    const outcome = await client.tap({
      account,
      station,
      direction,
      ts_ms: Date.now(),
      gate: "web-sim",
    });
    store.applyTap(outcome);
  }

  byId<HTMLButtonElement>("tap-in-btn").onclick = () => void tap("in");
  byId<HTMLButtonElement>("tap-out-btn").onclick = () => void tap("out");

  // ---- alarms ----------------------------------------------------------

  function readAlarmForm(): AlarmFormInput {
    return {
      vehicle: byId<HTMLInputElement>("alarm-vehicle").value,
      lat: byId<HTMLInputElement>("alarm-lat").value,
      lon: byId<HTMLInputElement>("alarm-lon").value,
      threshold: byId<HTMLInputElement>("alarm-threshold").value,
    };
  }

  function showAlarmErrors(errors: FieldErrors): void {
    for (const field of ["vehicle", "lat", "lon", "threshold"] as const) {
      byId<HTMLSpanElement>(`alarm-${field}-error`).textContent = errors[field] ?? "";
    }
  }

  async function refreshAlarms(): Promise<void> {
    try {
      const doc = await client.listAlarms();
      store.setAlarms(doc.alarms);
    } catch {
      // not registered yet; the list stays empty
    }
  }

  byId<HTMLButtonElement>("alarm-arm-btn").onclick = async () => {
    if (!session.user_id) {
      store.pushNotice("info", "Register first");
      return;
    }
    const result = await submitAlarm(readAlarmForm(), client).catch((err: GatewayError) => ({
      errors: { vehicle: err.message } as FieldErrors,
    }));
    if ("errors" in result) {
      showAlarmErrors(result.errors);
      return;
    }
    showAlarmErrors({});
    await refreshAlarms();
  };

  async function cancelAlarm(alarmId: string): Promise<void> {
    try {
      await client.cancelAlarm(alarmId);
    } catch (err) {
      store.pushNotice("info", `Cancel failed: ${(err as Error).message}`);
    }
    await refreshAlarms();
  }

  // clicking the map fills the alarm destination fields
  canvas.onclick = (ev: MouseEvent) => {
    const rect = canvas.getBoundingClientRect();
    const pos = unproject(ev.clientX - rect.left, ev.clientY - rect.top, mapBounds, viewport);
    byId<HTMLInputElement>("alarm-lat").value = pos.lat.toFixed(5);
    byId<HTMLInputElement>("alarm-lon").value = pos.lon.toFixed(5);
  };

  // ---- seats -----------------------------------------------------------

  async function bookSeat(seat: number): Promise<void> {
    const account = session.account_id;
    if (!account) return;
    const { vehicle, date, compartment } = seatContext();
    const result = await seatGrid.book(account, vehicle, date, compartment, seat);
    if (result.conflict) {
      store.pushNotice("conflict", result.message);
    } else if (!result.ok) {
      store.pushNotice("info", result.message);
    } else {
      store.pushNotice("info", result.message);
    }
  }

  for (const id of ["seat-vehicle", "seat-date", "seat-compartment"]) {
    byId<HTMLInputElement>(id).onchange = renderSeats;
  }

  render();
}

main();
