import { GatewayError } from "./api.js";
import type { Reservation } from "./types.js";

export type SeatState = "unknown" | "mine" | "taken";

export interface BookingResult {
  ok: boolean;
  conflict: boolean;
  message: string;
  reservation?: Reservation;
}

interface ReserveClient {
  reserve(body: {
    account: string;
    vehicle: string;
    departure_date: string;
    compartment: string;
    seat: number;
  }): Promise<Reservation>;
}

/**
 * Seat grid state for one compartment per train and date.
 *
 * The gateway is the arbiter: a seat only becomes "mine" after a 201
 * and "taken" after a seat-taken conflict, so two tabs racing for the
 * same seat end with one success and one conflict toast. There is no
 * listing endpoint, so the grid reflects what this session has learned.
 */
export class SeatGrid {
  private states = new Map<string, SeatState[]>();

  constructor(
    private client: ReserveClient,
    readonly seatCount: number,
  ) {}

  private key(vehicle: string, date: string, compartment: string): string {
    return `${vehicle}|${date}|${compartment}`;
  }

  /** Seat states for the grid, index 0 being seat 1. */
  seats(vehicle: string, date: string, compartment: string): SeatState[] {
    const key = this.key(vehicle, date, compartment);
    let arr = this.states.get(key);
    if (!arr) {
      arr = new Array<SeatState>(this.seatCount).fill("unknown");
      this.states.set(key, arr);
    }
    return arr;
  }

  async book(
    account: string,
    vehicle: string,
    date: string,
    compartment: string,
    seat: number,
  ): Promise<BookingResult> {
    const arr = this.seats(vehicle, date, compartment);
    if (seat < 1 || seat > this.seatCount) {
      return { ok: false, conflict: false, message: `no seat ${seat}` };
    }
    try {
      const res = await this.client.reserve({
        account,
        vehicle,
        departure_date: date,
        compartment,
        seat,
      });
      arr[seat - 1] = "mine";
      return { ok: true, conflict: false, message: `seat ${seat} reserved`, reservation: res };
    } catch (err) {
      if (err instanceof GatewayError && err.status === 409 && err.code === "seat-taken") {
        arr[seat - 1] = "taken";
        return { ok: false, conflict: true, message: `seat ${seat} is already taken` };
      }
      if (err instanceof GatewayError) {
        return { ok: false, conflict: false, message: err.message };
      }
      throw err;
    }
  }
}
