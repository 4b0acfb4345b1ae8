/** End-to-end: a scripted interaction against a live `manifoldgen serve`
 *  instance. The server is trained for 0 iterations on a tiny config (the
 *  endpoints only need a valid model, not a good one). */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { FrameClient, FrameError, FrameResult } from "../src/client.js";
import { clampState, defaultState, stateToRequest, Meta, ViewerState }
  from "../src/state.js";

const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;

const TINY = [
  "model.field_width=16", "model.synthesis_width=8",
  "model.synthesis_blocks=2", "model.mapping_width=16",
  "model.latent_dim=8", "model.surface_count=3", "model.sample_count=24",
  "camera.resolution=16", "dataset.resolution=16", "dataset.count=8",
  "disc.base_width=8", "disc.max_width=32", "train.iterations=0",
];

let workDir: string;
let server: ChildProcess | null = null;
let meta: Meta;

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "viewer-e2e-"));
  const args = ["-m", "manifoldgen.cli", "train", "--out", workDir];
  for (const kv of TINY) args.push("--set", kv);
  const train = spawnSync("python3", args, { encoding: "utf-8" });
  expect(train.status, train.stderr).toBe(0);

  server = spawn("python3", [
    "-m", "manifoldgen.cli", "serve",
    "--checkpoint", join(workDir, "ckpt_000000.grmc"),
    "--port", String(PORT),
  ], { stdio: "ignore" });

  for (let i = 0; i < 120; i++) {
    try {
      const resp = await fetch(`${BASE}/meta`);
      if (resp.ok) {
        meta = (await resp.json()) as Meta;
        return;
      }
    } catch {
      /* not up yet */
    }
    await sleep(500);
  }
  throw new Error("server did not come up");
}, 120_000);

afterAll(() => {
  if (server) server.kill();
  rmSync(workDir, { recursive: true, force: true });
});

function isPng(bytes: Uint8Array): boolean {
  return bytes[0] === 0x89 && bytes[1] === 0x50 &&
         bytes[2] === 0x4e && bytes[3] === 0x47;
}

describe("scripted interaction against a live server", () => {
  it("set seed -> orbit -> zoom -> interpolate -> mix renders every response", async () => {
    const frames: FrameResult[] = [];
    const errors: FrameError[] = [];
    const urls: string[] = [];
    const client = new FrameClient({
      baseUrl: BASE,
      onFrame: (f) => frames.push(f),
      onError: (e) => errors.push(e),
      fetchImpl: ((url: string, init?: RequestInit) => {
        urls.push(url);
        return fetch(url, init);
      }) as typeof fetch,
    });

    let state: ViewerState = { ...defaultState(meta), resolution: 16 };
    const step = async (patch: Partial<ViewerState>) => {
      state = clampState({ ...state, ...patch }, meta.bounds,
                         meta.block_count);
      client.requestNow(stateToRequest(state));
      // The tiny model renders 16x16 in well under a second.
      for (let i = 0; i < 100 && frames.length + errors.length < urls.length; i++) {
        await sleep(100);
      }
    };

    await step({ seedPrimary: 5 });                    // set seed
    await step({ yaw: state.yaw + 0.3 });              // orbit
    await step({ radius: state.radius * 0.8 });        // zoom
    await step({ mode: "interpolate", t: 0.5 });       // interpolate
    await step({ mode: "mix", split: 1 });             // style mix

    expect(errors).toEqual([]);
    expect(urls.length).toBe(5);
    const paths = urls.map((u) => new URL(u).pathname);
    expect(paths).toEqual([
      "/render", "/render", "/render", "/interpolate", "/mix",
    ]);
    expect(new URL(urls[0]).searchParams.get("seed")).toBe("5");
    expect(new URL(urls[3]).searchParams.get("t")).toBe("0.5");
    expect(new URL(urls[4]).searchParams.get("split")).toBe("1");

    // Every response was rendered, in order, and each is a PNG.
    expect(frames.length).toBe(5);
    expect(frames.map((f) => f.sequence)).toEqual([1, 2, 3, 4, 5]);
    for (const f of frames) expect(isPng(f.bytes)).toBe(true);
  }, 120_000);

  it("discards a stale response from an artificially delayed request", async () => {
    const frames: FrameResult[] = [];
    let delayFirst = true;
    const client = new FrameClient({
      baseUrl: BASE,
      onFrame: (f) => frames.push(f),
      onError: () => { /* aborted first request is not an error */ },
      fetchImpl: (async (url: string) => {
        // Delay the *response* (not the request) so the server result for
        // the first query arrives after the second query's result.
        const resp = await fetch(url);
        const body = await resp.arrayBuffer();
        if (delayFirst) {
          delayFirst = false;
          await sleep(2000);
        }
        return new Response(body, { status: resp.status, headers: resp.headers });
      }) as typeof fetch,
    });

    const state = { ...defaultState(meta), resolution: 16 };
    client.requestNow(stateToRequest({ ...state, yaw: 0.0 }));
    await sleep(300); // first request reaches the server, response delayed
    client.requestNow(stateToRequest({ ...state, yaw: 0.5 }));
    await sleep(4000);

    // Only the newer frame was painted; the delayed one was discarded.
    expect(frames.length).toBe(1);
    expect(new URL(frames[0].url).searchParams.get("yaw")).toBe("0.5");
  }, 60_000);

  it("fast path renders and /meta bounds clamp the pose", async () => {
    const frames: FrameResult[] = [];
    const errors: FrameError[] = [];
    const client = new FrameClient({
      baseUrl: BASE,
      onFrame: (f) => frames.push(f),
      onError: (e) => errors.push(e),
    });
    // A wildly out-of-bounds pose must be clamped before it hits the server.
    const state = clampState(
      { ...defaultState(meta), resolution: 16, path: "fast", radius: 1e9 },
      meta.bounds, meta.block_count);
    expect(state.radius).toBe(meta.bounds.radius[1]);
    client.requestNow(stateToRequest(state));
    for (let i = 0; i < 300 && frames.length + errors.length === 0; i++) {
      await sleep(100); // first fast-path call bakes the meshes
    }
    expect(errors).toEqual([]);
    expect(frames.length).toBe(1);
    expect(isPng(frames[0].bytes)).toBe(true);
  }, 60_000);
});
