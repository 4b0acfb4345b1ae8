import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { FrameClient, FrameError, FrameResult } from "../src/client.js";
import { FrameRequest } from "../src/state.js";

const PNG = new Uint8Array([0x89, 0x50, 0x4e, 0x47]);

function pngResponse(delayMs: number): Promise<Response> {
  return new Promise((resolve) =>
    setTimeout(
      () => resolve(new Response(PNG.slice().buffer, { status: 200 })),
      delayMs,
    ),
  );
}

function req(yaw: number): FrameRequest {
  return { path: "/render", params: { seed: "1", yaw: String(yaw) } };
}

describe("FrameClient", () => {
  const frames: FrameResult[] = [];
  const errors: FrameError[] = [];
  const urls: string[] = [];

  beforeEach(() => {
    vi.useFakeTimers();
    frames.length = 0;
    errors.length = 0;
    urls.length = 0;
  });

  afterEach(() => vi.useRealTimers());

  function makeClient(fetchImpl: typeof fetch): FrameClient {
    return new FrameClient({
      baseUrl: "http://server",
      onFrame: (f) => frames.push(f),
      onError: (e) => errors.push(e),
      fetchImpl: ((url: string, init?: RequestInit) => {
        urls.push(url);
        return fetchImpl(url as never, init);
      }) as typeof fetch,
    });
  }

  it("debounces a burst of requests into one (80 ms quiet period)", async () => {
    const client = makeClient(() => pngResponse(0));
    for (let i = 0; i < 10; i++) {
      client.request(req(i * 0.1));
      await vi.advanceTimersByTimeAsync(20); // faster than the debounce
    }
    expect(urls.length).toBe(0); // still quiet-period-bound
    await vi.advanceTimersByTimeAsync(100);
    expect(urls.length).toBe(1);
    expect(urls[0]).toContain("yaw=0.9"); // newest state wins
    expect(frames.length).toBe(1);
  });

  it("issues exactly one request per settled drag step", async () => {
    const client = makeClient(() => pngResponse(0));
    client.request(req(0.1));
    await vi.advanceTimersByTimeAsync(200);
    client.request(req(0.4));
    await vi.advanceTimersByTimeAsync(200);
    expect(urls.length).toBe(2);
    expect(frames.length).toBe(2);
  });

  it("discards a stale response superseded by a newer request", async () => {
    let call = 0;
    const client = makeClient(() => pngResponse(call++ === 0 ? 500 : 0));
    client.requestNow(req(0.0)); // artificially delayed response
    client.requestNow(req(1.0)); // supersedes it immediately
    await vi.advanceTimersByTimeAsync(1000);
    expect(urls.length).toBe(2);
    expect(frames.length).toBe(1); // the delayed response never painted
    expect(frames[0].url).toContain("yaw=1");
    expect(frames[0].sequence).toBe(2);
  });

  it("never paints out of order even when responses arrive out of order", async () => {
    const delays = [300, 200, 100]; // responses arrive newest-first
    let call = 0;
    const client = makeClient(() => pngResponse(delays[call++]));
    client.requestNow(req(1));
    client.requestNow(req(2));
    client.requestNow(req(3));
    await vi.advanceTimersByTimeAsync(1000);
    expect(frames.length).toBe(1);
    expect(frames[0].url).toContain("yaw=3");
  });

  it("reports server errors with the server's message and supports retry", async () => {
    let fail = true;
    const client = makeClient(() => {
      if (fail) {
        return Promise.resolve(new Response(
          JSON.stringify({ code: 400, message: "malformed parameter 'seed'" }),
          { status: 400 },
        ));
      }
      return pngResponse(0);
    });
    client.requestNow(req(0));
    await vi.advanceTimersByTimeAsync(10);
    expect(errors.length).toBe(1);
    expect(errors[0].message).toContain("seed");
    expect(errors[0].status).toBe(400);

    fail = false;
    client.retry(); // same request again, succeeds now
    await vi.advanceTimersByTimeAsync(10);
    expect(frames.length).toBe(1);
    expect(urls[1]).toBe(urls[0]);
  });

  it("surfaces network failures without throwing", async () => {
    const client = makeClient(() => Promise.reject(new Error("connection refused")));
    client.requestNow(req(0));
    await vi.advanceTimersByTimeAsync(10);
    expect(errors.length).toBe(1);
    expect(errors[0].message).toContain("connection refused");
    expect(errors[0].status).toBeNull();
  });

  it("reports latency from issue to arrival", async () => {
    const client = makeClient(() => pngResponse(150));
    client.requestNow(req(0));
    await vi.advanceTimersByTimeAsync(500);
    expect(frames.length).toBe(1);
    expect(frames[0].latencyMs).toBeGreaterThanOrEqual(150);
  });
});
