/** Debounced, stale-discarding frame fetcher. Pure client: every pixel comes
 *  from the server; this module never computes imagery locally. */

import { FrameRequest, requestUrl } from "./state.js";

export interface FrameResult {
  bytes: Uint8Array;
  latencyMs: number;
  sequence: number;
  url: string;
}

export interface FrameError {
  message: string;
  status: number | null;
  request: FrameRequest;
}

export interface FrameClientOptions {
  baseUrl: string;
  onFrame: (frame: FrameResult) => void;
  onError: (error: FrameError) => void;
  /** Debounce on continuous controls; one request per quiet period. */
  debounceMs?: number;
  fetchImpl?: typeof fetch;
  now?: () => number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

/**
 * One control group: debounced scheduling, a monotonic sequence number per
 * issued request, and discard-on-arrival for any response whose sequence is
 * not the newest. A superseded in-flight fetch is also aborted so at most one
 * request is genuinely outstanding; transports that ignore the abort signal
 * still cannot paint stale pixels because of the sequence check.
 */
export class FrameClient {
  private readonly baseUrl: string;
  private readonly onFrame: (frame: FrameResult) => void;
  private readonly onError: (error: FrameError) => void;
  private readonly debounceMs: number;
  private readonly fetchImpl: typeof fetch;
  private readonly now: () => number;
  private readonly setTimer: (fn: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;

  private sequence = 0;
  private displayedSequence = 0;
  private debounceHandle: unknown = null;
  private lastRequest: FrameRequest | null = null;
  private inFlightAbort: AbortController | null = null;

  constructor(opts: FrameClientOptions) {
    this.baseUrl = opts.baseUrl;
    this.onFrame = opts.onFrame;
    this.onError = opts.onError;
    this.debounceMs = opts.debounceMs ?? 80;
    this.fetchImpl = opts.fetchImpl ?? fetch.bind(globalThis);
    this.now = opts.now ?? (() => Date.now());
    this.setTimer = opts.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as number));
  }

  /** Request a frame after the debounce quiet period; rapid calls collapse
   *  into one request carrying the newest state. */
  request(req: FrameRequest): void {
    this.lastRequest = req;
    if (this.debounceHandle !== null) this.clearTimer(this.debounceHandle);
    this.debounceHandle = this.setTimer(() => {
      this.debounceHandle = null;
      this.issue(req);
    }, this.debounceMs);
  }

  /** Request a frame immediately (discrete controls, retry button). */
  requestNow(req: FrameRequest): void {
    this.lastRequest = req;
    if (this.debounceHandle !== null) {
      this.clearTimer(this.debounceHandle);
      this.debounceHandle = null;
    }
    this.issue(req);
  }

  /** Re-issue the most recent request (retry after an error). */
  retry(): void {
    if (this.lastRequest !== null) this.requestNow(this.lastRequest);
  }

  private issue(req: FrameRequest): void {
    if (this.inFlightAbort !== null) this.inFlightAbort.abort();
    const abort = typeof AbortController !== "undefined"
      ? new AbortController() : null;
    this.inFlightAbort = abort;
    const seq = ++this.sequence;
    const url = requestUrl(this.baseUrl, req);
    const started = this.now();
    this.fetchImpl(url, abort ? { signal: abort.signal } : undefined)
      .then(async (resp) => {
        if (!resp.ok) {
          let message = `HTTP ${resp.status}`;
          try {
            const body = (await resp.json()) as { message?: string };
            if (body.message) message = body.message;
          } catch {
            /* non-JSON error body; keep the status line */
          }
          throw Object.assign(new Error(message), { status: resp.status });
        }
        const bytes = new Uint8Array(await resp.arrayBuffer());
        return { bytes, latencyMs: this.now() - started };
      })
      .then(
        ({ bytes, latencyMs }) => {
          if (seq <= this.displayedSequence || seq !== this.sequence) {
            return; // stale: a newer request was issued or already displayed
          }
          this.displayedSequence = seq;
          if (this.inFlightAbort === abort) this.inFlightAbort = null;
          this.onFrame({ bytes, latencyMs, sequence: seq, url });
        },
        (err: Error & { status?: number; name?: string }) => {
          if (seq !== this.sequence || err.name === "AbortError") {
            return; // superseded request; not a user-visible failure
          }
          if (this.inFlightAbort === abort) this.inFlightAbort = null;
          this.onError({
            message: err.message,
            status: err.status ?? null,
            request: req,
          });
        },
      );
  }
}
