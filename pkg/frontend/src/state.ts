/** Viewer state and its total, deterministic mapping onto server requests. */

export interface Bounds {
  yaw: [number, number];
  pitch: [number, number];
  radius: [number, number];
  fov: [number, number];
}

export interface Meta {
  checkpoint_id: string;
  levels: number[];
  surface_count: number;
  block_count: number;
  latent_dim: number;
  camera_radius: number;
  resolutions: number[];
  angles: string;
  bounds: Bounds;
}

export type ViewMode = "single" | "interpolate" | "mix";
export type RenderPath = "ray" | "fast";

export interface ViewerState {
  mode: ViewMode;
  seedPrimary: number;
  seedSecondary: number;
  yaw: number;
  pitch: number;
  radius: number;
  fov: number;
  /** Latent interpolation position, clamped to [0, 1]. */
  t: number;
  /** Style-mix split, clamped to [0, blockCount]. */
  split: number;
  path: RenderPath;
  resolution: number;
}

export const DEFAULT_BOUNDS: Bounds = {
  yaw: [-Math.PI, Math.PI],
  pitch: [-1.4, 1.4],
  radius: [1.0, 4.0],
  fov: [(3 * Math.PI) / 180, (60 * Math.PI) / 180],
};

export function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

export function defaultState(meta?: Meta): ViewerState {
  return {
    mode: "single",
    seedPrimary: 1,
    seedSecondary: 2,
    yaw: 0,
    pitch: 0,
    radius: meta ? meta.camera_radius : 2.0,
    fov: (12 * Math.PI) / 180,
    t: 0.5,
    split: meta ? Math.floor(meta.block_count / 2) : 2,
    path: "ray",
    resolution: 64,
  };
}

/** Clamp every continuous control into the server-advertised bounds. */
export function clampState(s: ViewerState, bounds: Bounds,
                           blockCount: number): ViewerState {
  return {
    ...s,
    yaw: clamp(s.yaw, bounds.yaw[0], bounds.yaw[1]),
    pitch: clamp(s.pitch, bounds.pitch[0], bounds.pitch[1]),
    radius: clamp(s.radius, bounds.radius[0], bounds.radius[1]),
    fov: clamp(s.fov, bounds.fov[0], bounds.fov[1]),
    t: clamp(s.t, 0, 1),
    split: Math.round(clamp(s.split, 0, blockCount)),
  };
}

export interface FrameRequest {
  path: string;
  params: Record<string, string>;
}

function poseParams(s: ViewerState): Record<string, string> {
  return {
    yaw: String(s.yaw),
    pitch: String(s.pitch),
    radius: String(s.radius),
    fov: String(s.fov),
    res: String(s.resolution),
  };
}

/**
 * The state -> request mapping. Total (every state maps to exactly one
 * request) and deterministic, so a replayed interaction log reproduces the
 * same request sequence.
 */
export function stateToRequest(s: ViewerState): FrameRequest {
  switch (s.mode) {
    case "single":
      return {
        path: s.path === "fast" ? "/render_fast" : "/render",
        params: { seed: String(s.seedPrimary), ...poseParams(s) },
      };
    case "interpolate":
      return {
        path: "/interpolate",
        params: {
          seed_a: String(s.seedPrimary),
          seed_b: String(s.seedSecondary),
          t: String(s.t),
          ...poseParams(s),
        },
      };
    case "mix":
      return {
        path: "/mix",
        params: {
          seed_geom: String(s.seedPrimary),
          seed_app: String(s.seedSecondary),
          split: String(s.split),
          ...poseParams(s),
        },
      };
  }
}

export function requestUrl(baseUrl: string, req: FrameRequest): string {
  const q = new URLSearchParams(req.params).toString();
  return `${baseUrl}${req.path}?${q}`;
}

/** Block labels for the style-mix panel: blocks below the split take their
 *  modulation from the geometry seed, the rest from the appearance seed. */
export function mixLabels(blockCount: number, split: number): string[] {
  const labels: string[] = [];
  for (let b = 0; b < blockCount; b++) {
    labels.push(b < split ? "geometry source" : "appearance source");
  }
  return labels;
}
