import type { BusEvent } from "./types.js";

export type FeedStatus = "connecting" | "open" | "reconnecting" | "closed";

// the subset of WebSocket the feed touches; tests inject a scripted fake
export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  close(): void;
}

export interface FeedOptions {
  makeSocket?: (url: string) => SocketLike;
  schedule?: (fn: () => void, delayMs: number) => void;
  baseDelayMs?: number;
  maxDelayMs?: number;
}

/**
 * The dashboard's single WebSocket to the gateway bridge.
 *
 * Reconnects with exponential backoff after a drop (500 ms doubling up to
 * 15 s by default) and resets the backoff once a connection opens. Status
 * changes are surfaced through onStatus so the UI can show a banner while
 * the feed is down.
 */
export class LiveFeed {
  onEvent: (ev: BusEvent) => void = () => {};
  onStatus: (status: FeedStatus, retryInMs: number | null) => void = () => {};

  private sock: SocketLike | null = null;
  private failures = 0;
  private stopped = true;
  private makeSocket: (url: string) => SocketLike;
  private schedule: (fn: () => void, delayMs: number) => void;
  private baseDelayMs: number;
  private maxDelayMs: number;

  constructor(
    private url: string,
    opts: FeedOptions = {},
  ) {
    this.makeSocket = opts.makeSocket ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.schedule = opts.schedule ?? ((fn, ms) => void setTimeout(fn, ms));
    this.baseDelayMs = opts.baseDelayMs ?? 500;
    this.maxDelayMs = opts.maxDelayMs ?? 15_000;
  }

  start(): void {
    if (!this.stopped) return;
    this.stopped = false;
    this.failures = 0;
    this.onStatus("connecting", null);
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    const sock = this.sock;
    this.sock = null;
    if (sock) sock.close();
    this.onStatus("closed", null);
  }

  private connect(): void {
    if (this.stopped) return;
    const sock = this.makeSocket(this.url);
    this.sock = sock;
    sock.onopen = () => {
      if (this.sock !== sock) return;
      this.failures = 0;
      this.onStatus("open", null);
    };
    sock.onmessage = (ev) => {
      let doc: unknown;
      try {
        doc = JSON.parse(String(ev.data));
      } catch {
        console.error("dropping unparseable ws frame");
        return;
      }
      const frame = doc as Partial<BusEvent> & { error?: string };
      if (typeof frame.error === "string") {
        console.error("ws error frame:", frame.error);
        return;
      }
      if (typeof frame.topic === "string" && typeof frame.payload === "string") {
        this.onEvent(frame as BusEvent);
      }
    };
    sock.onclose = () => {
      if (this.stopped || this.sock !== sock) return;
      this.sock = null;
      const delay = Math.min(this.maxDelayMs, this.baseDelayMs * 2 ** this.failures);
      this.failures += 1;
      this.onStatus("reconnecting", delay);
      this.schedule(() => this.connect(), delay);
    };
  }
}
