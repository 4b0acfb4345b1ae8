import { describe, expect, it } from "vitest";

import {
  DEFAULT_BOUNDS,
  clampState,
  defaultState,
  mixLabels,
  requestUrl,
  stateToRequest,
} from "../src/state.js";

describe("state -> request mapping", () => {
  it("is total and deterministic over all modes", () => {
    for (const mode of ["single", "interpolate", "mix"] as const) {
      const s = { ...defaultState(), mode };
      const a = stateToRequest(s);
      const b = stateToRequest(s);
      expect(a).toEqual(b);
      expect(a.path.startsWith("/")).toBe(true);
    }
  });

  it("maps the path toggle to /render vs /render_fast", () => {
    const s = defaultState();
    expect(stateToRequest({ ...s, path: "ray" }).path).toBe("/render");
    expect(stateToRequest({ ...s, path: "fast" }).path).toBe("/render_fast");
  });

  it("carries the full pose on every endpoint", () => {
    const s = { ...defaultState(), yaw: 0.3, pitch: -0.1, radius: 2.5 };
    for (const mode of ["single", "interpolate", "mix"] as const) {
      const req = stateToRequest({ ...s, mode });
      expect(req.params.yaw).toBe("0.3");
      expect(req.params.pitch).toBe("-0.1");
      expect(req.params.radius).toBe("2.5");
      expect(req.params.res).toBe("64");
    }
  });

  it("maps interpolation and mix params", () => {
    const s = { ...defaultState(), seedPrimary: 7, seedSecondary: 9 };
    const interp = stateToRequest({ ...s, mode: "interpolate", t: 0.25 });
    expect(interp.path).toBe("/interpolate");
    expect(interp.params.seed_a).toBe("7");
    expect(interp.params.seed_b).toBe("9");
    expect(interp.params.t).toBe("0.25");

    const mix = stateToRequest({ ...s, mode: "mix", split: 3 });
    expect(mix.path).toBe("/mix");
    expect(mix.params.seed_geom).toBe("7");
    expect(mix.params.seed_app).toBe("9");
    expect(mix.params.split).toBe("3");
  });

  it("builds a well-formed query URL", () => {
    const url = requestUrl("http://x", {
      path: "/render",
      params: { seed: "1", yaw: "0.5" },
    });
    expect(url).toBe("http://x/render?seed=1&yaw=0.5");
  });
});

describe("clamping to /meta bounds", () => {
  it("clamps pose, fov, t and split", () => {
    const wild = {
      ...defaultState(),
      yaw: 99,
      pitch: -99,
      radius: 0,
      fov: 9,
      t: 1.7,
      split: -3,
    };
    const c = clampState(wild, DEFAULT_BOUNDS, 4);
    expect(c.yaw).toBe(DEFAULT_BOUNDS.yaw[1]);
    expect(c.pitch).toBe(DEFAULT_BOUNDS.pitch[0]);
    expect(c.radius).toBe(DEFAULT_BOUNDS.radius[0]);
    expect(c.fov).toBe(DEFAULT_BOUNDS.fov[1]);
    expect(c.t).toBe(1);
    expect(c.split).toBe(0);
  });

  it("leaves in-bounds values untouched", () => {
    const s = defaultState();
    expect(clampState(s, DEFAULT_BOUNDS, 4)).toEqual(s);
  });
});

describe("style-mix labels", () => {
  it("labels blocks below the split as geometry source", () => {
    expect(mixLabels(4, 2)).toEqual([
      "geometry source",
      "geometry source",
      "appearance source",
      "appearance source",
    ]);
    expect(mixLabels(3, 0)).toEqual([
      "appearance source",
      "appearance source",
      "appearance source",
    ]);
    expect(mixLabels(2, 2)).toEqual(["geometry source", "geometry source"]);
  });
});
