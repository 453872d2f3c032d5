import type { Alarm } from "./types.js";

export interface AlarmFormInput {
  vehicle: string;
  lat: string;
  lon: string;
  threshold: string;
}

export interface AlarmRequest {
  vehicle: string;
  lat: number;
  lon: number;
  threshold_m: number;
}

export type FieldErrors = Partial<Record<keyof AlarmFormInput, string>>;

export type AlarmFormResult =
  | { ok: true; value: AlarmRequest }
  | { ok: false; errors: FieldErrors };

function parseNumber(text: string): number | null {
  const trimmed = text.trim();
  if (trimmed === "") return null;
  const n = Number(trimmed);
  return Number.isFinite(n) ? n : null;
}

/**
 * Validates the arm-alarm form. All checks happen client-side first so a
 * bad threshold never leaves the browser; the gateway re-validates anyway.
 */
export function validateAlarmForm(input: AlarmFormInput): AlarmFormResult {
  const errors: FieldErrors = {};

  const vehicle = input.vehicle.trim();
  if (vehicle === "") {
    errors.vehicle = "vehicle is required";
  } else if (/[/+#\s]/.test(vehicle)) {
    errors.vehicle = "vehicle must be a plain id";
  }

  const lat = parseNumber(input.lat);
  if (lat === null) errors.lat = "latitude must be a number";
  else if (lat < -90 || lat > 90) errors.lat = "latitude must be within -90..90";

  const lon = parseNumber(input.lon);
  if (lon === null) errors.lon = "longitude must be a number";
  else if (lon < -180 || lon > 180) errors.lon = "longitude must be within -180..180";

  const threshold = parseNumber(input.threshold);
  if (threshold === null) errors.threshold = "threshold must be a number";
  else if (threshold <= 0) errors.threshold = "threshold must be greater than 0";

  if (Object.keys(errors).length > 0) return { ok: false, errors };
  return {
    ok: true,
    value: { vehicle, lat: lat as number, lon: lon as number, threshold_m: threshold as number },
  };
}

export interface AlarmPoster {
  armAlarm(body: AlarmRequest): Promise<Alarm>;
}

/**
 * Form submit handler: invalid input returns inline errors without any
 * request being made; valid input posts to the gateway.
 */
export async function submitAlarm(
  input: AlarmFormInput,
  client: AlarmPoster,
): Promise<{ alarm: Alarm } | { errors: FieldErrors }> {
  const checked = validateAlarmForm(input);
  if (!checked.ok) return { errors: checked.errors };
  const alarm = await client.armAlarm(checked.value);
  return { alarm };
}
