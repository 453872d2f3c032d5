// Plain lat/lon to canvas projection over a static route outline.
// No map tiles, no third-party renderer: routes here span a few hundred
// km at most, so a linear fit inside the viewport is plenty.

export interface LatLon {
  lat: number;
  lon: number;
}

export interface Bounds {
  minLat: number;
  maxLat: number;
  minLon: number;
  maxLon: number;
}

export interface Viewport {
  width: number;
  height: number;
  pad: number;
}

export interface TrainMarker {
  vehicle: string;
  lat: number;
  lon: number;
  stale: boolean;
}

// the slice of CanvasRenderingContext2D the renderer uses; tests stub it
export interface Ctx2D {
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
}

export function boundsOf(points: LatLon[]): Bounds {
  if (points.length === 0) {
    return { minLat: -1, maxLat: 1, minLon: -1, maxLon: 1 };
  }
  let minLat = points[0].lat;
  let maxLat = points[0].lat;
  let minLon = points[0].lon;
  let maxLon = points[0].lon;
  for (const p of points) {
    if (p.lat < minLat) minLat = p.lat;
    if (p.lat > maxLat) maxLat = p.lat;
    if (p.lon < minLon) minLon = p.lon;
    if (p.lon > maxLon) maxLon = p.lon;
  }
  return { minLat, maxLat, minLon, maxLon };
}

/**
 * Maps a point into viewport pixels, north up. A degenerate axis (all
 * points sharing one latitude or longitude) lands on the centre line
 * rather than dividing by zero.
 */
export function project(p: LatLon, b: Bounds, vp: Viewport): { x: number; y: number } {
  const w = vp.width - 2 * vp.pad;
  const h = vp.height - 2 * vp.pad;
  const lonSpan = b.maxLon - b.minLon;
  const latSpan = b.maxLat - b.minLat;
  const x = lonSpan === 0 ? vp.pad + w / 2 : vp.pad + ((p.lon - b.minLon) / lonSpan) * w;
  const y = latSpan === 0 ? vp.pad + h / 2 : vp.pad + ((b.maxLat - p.lat) / latSpan) * h;
  return { x, y };
}

/** Inverse of project; used to turn a canvas click into a destination. */
export function unproject(x: number, y: number, b: Bounds, vp: Viewport): LatLon {
  const w = vp.width - 2 * vp.pad;
  const h = vp.height - 2 * vp.pad;
  const lonSpan = b.maxLon - b.minLon;
  const latSpan = b.maxLat - b.minLat;
  const lon = lonSpan === 0 ? b.minLon : b.minLon + ((x - vp.pad) / w) * lonSpan;
  const lat = latSpan === 0 ? b.minLat : b.maxLat - ((y - vp.pad) / h) * latSpan;
  return { lat, lon };
}

export const MARKER_COLORS = {
  route: "#888888",
  active: "#1a7f37",
  stale: "#b0b0b0",
};

/**
 * Repaints the scene: route outline first, then one marker per train.
 * Stale trains are drawn in the washed-out colour with a "(stale)" tag
 * so a silent feed is visible at a glance.
 */
export function drawScene(
  ctx: Ctx2D,
  vp: Viewport,
  route: LatLon[],
  trains: TrainMarker[],
  bounds?: Bounds,
): void {
  const b = bounds ?? boundsOf(route);
  ctx.clearRect(0, 0, vp.width, vp.height);

  if (route.length > 1) {
    ctx.beginPath();
    const first = project(route[0], b, vp);
    ctx.moveTo(first.x, first.y);
    for (let i = 1; i < route.length; i++) {
      const pt = project(route[i], b, vp);
      ctx.lineTo(pt.x, pt.y);
    }
    ctx.strokeStyle = MARKER_COLORS.route;
    ctx.lineWidth = 2;
    ctx.stroke();
  }

  ctx.font = "12px sans-serif";
  for (const t of trains) {
    const pt = project({ lat: t.lat, lon: t.lon }, b, vp);
    ctx.beginPath();
    ctx.arc(pt.x, pt.y, 6, 0, Math.PI * 2);
    ctx.fillStyle = t.stale ? MARKER_COLORS.stale : MARKER_COLORS.active;
    ctx.fill();
    const label = t.stale ? `${t.vehicle} (stale)` : t.vehicle;
    ctx.fillText(label, pt.x + 9, pt.y + 4);
  }
}
