/** DOM wiring for the viewer: controls mutate a single ViewerState, every
 *  mutation maps to exactly one (debounced) server request. */

import { FrameClient } from "./client.js";
import {
  DEFAULT_BOUNDS,
  Meta,
  ViewerState,
  clampState,
  defaultState,
  mixLabels,
  stateToRequest,
} from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function fetchMeta(baseUrl: string): Promise<Meta | undefined> {
  try {
    const resp = await fetch(`${baseUrl}/meta`);
    if (!resp.ok) return undefined;
    return (await resp.json()) as Meta;
  } catch {
    return undefined;
  }
}

function setup(meta: Meta | undefined): void {
  const baseUrl = "";
  const bounds = meta ? meta.bounds : DEFAULT_BOUNDS;
  const blockCount = meta ? meta.block_count : 4;
  let state: ViewerState = defaultState(meta);

  const image = el<HTMLImageElement>("frame");
  const banner = el<HTMLDivElement>("error-banner");
  const bannerText = el<HTMLSpanElement>("error-text");
  const retryBtn = el<HTMLButtonElement>("retry");
  const latencyOut = el<HTMLSpanElement>("latency");
  const rayLatencyOut = el<HTMLSpanElement>("latency-ray");
  const fastLatencyOut = el<HTMLSpanElement>("latency-fast");
  let objectUrl: string | null = null;

  const client = new FrameClient({
    baseUrl,
    onFrame: (frame) => {
      banner.hidden = true;
      if (objectUrl !== null) URL.revokeObjectURL(objectUrl);
      objectUrl = URL.createObjectURL(
        new Blob([frame.bytes.buffer as ArrayBuffer], { type: "image/png" }));
      image.src = objectUrl;
      const ms = `${frame.latencyMs.toFixed(0)} ms`;
      latencyOut.textContent = ms;
      if (state.mode === "single") {
        (state.path === "fast" ? fastLatencyOut : rayLatencyOut)
          .textContent = ms;
      }
    },
    onError: (error) => {
      bannerText.textContent = error.message;
      banner.hidden = false;
    },
  });

  retryBtn.addEventListener("click", () => client.retry());

  function apply(patch: Partial<ViewerState>,
                 opts: { immediate?: boolean } = {}): void {
    state = clampState({ ...state, ...patch }, bounds, blockCount);
    syncControls();
    const req = stateToRequest(state);
    if (opts.immediate) client.requestNow(req);
    else client.request(req);
  }

  // --- discrete controls -------------------------------------------------
  const seedA = el<HTMLInputElement>("seed-a");
  const seedB = el<HTMLInputElement>("seed-b");
  seedA.addEventListener("change", () =>
    apply({ seedPrimary: Number(seedA.value) || 0 }, { immediate: true }));
  seedB.addEventListener("change", () =>
    apply({ seedSecondary: Number(seedB.value) || 0 }, { immediate: true }));

  const modeSel = el<HTMLSelectElement>("mode");
  modeSel.addEventListener("change", () =>
    apply({ mode: modeSel.value as ViewerState["mode"] }, { immediate: true }));

  const pathToggle = el<HTMLInputElement>("fast-path");
  pathToggle.addEventListener("change", () =>
    apply({ path: pathToggle.checked ? "fast" : "ray" }, { immediate: true }));

  const resSel = el<HTMLSelectElement>("resolution");
  if (meta) {
    resSel.innerHTML = "";
    for (const r of meta.resolutions) {
      const opt = document.createElement("option");
      opt.value = String(r);
      opt.textContent = `${r} px`;
      resSel.appendChild(opt);
    }
    resSel.value = String(state.resolution);
  }
  resSel.addEventListener("change", () =>
    apply({ resolution: Number(resSel.value) }, { immediate: true }));

  // --- continuous controls (debounced) -----------------------------------
  const tSlider = el<HTMLInputElement>("t-slider");
  tSlider.addEventListener("input", () => apply({ t: Number(tSlider.value) }));

  const splitSlider = el<HTMLInputElement>("split-slider");
  splitSlider.max = String(blockCount);
  splitSlider.addEventListener("input", () =>
    apply({ split: Number(splitSlider.value) }));

  // Orbit: pointer drag changes yaw/pitch; wheel changes radius; a modifier
  // key (shift/ctrl) plus wheel changes fov.
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  image.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    image.setPointerCapture(ev.pointerId);
  });
  image.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    lastX = ev.clientX;
    lastY = ev.clientY;
    apply({ yaw: state.yaw + dx * 0.01, pitch: state.pitch + dy * 0.01 });
  });
  image.addEventListener("pointerup", () => (dragging = false));
  image.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    const scale = Math.exp(ev.deltaY * 0.001);
    if (ev.shiftKey || ev.ctrlKey) apply({ fov: state.fov * scale });
    else apply({ radius: state.radius * scale });
  }, { passive: false });

  // --- readouts ----------------------------------------------------------
  const yawOut = el<HTMLSpanElement>("yaw-out");
  const pitchOut = el<HTMLSpanElement>("pitch-out");
  const radiusOut = el<HTMLSpanElement>("radius-out");
  const fovOut = el<HTMLSpanElement>("fov-out");
  const tOut = el<HTMLSpanElement>("t-out");
  const splitOut = el<HTMLSpanElement>("split-out");
  const mixPanel = el<HTMLDivElement>("mix-blocks");

  function syncControls(): void {
    yawOut.textContent = state.yaw.toFixed(2);
    pitchOut.textContent = state.pitch.toFixed(2);
    radiusOut.textContent = state.radius.toFixed(2);
    fovOut.textContent = state.fov.toFixed(3);
    tOut.textContent = state.t.toFixed(2);
    splitOut.textContent = String(state.split);
    tSlider.value = String(state.t);
    splitSlider.value = String(state.split);
    el<HTMLDivElement>("interp-panel").hidden = state.mode !== "interpolate";
    el<HTMLDivElement>("mix-panel").hidden = state.mode !== "mix";
    el<HTMLDivElement>("path-panel").hidden = state.mode !== "single";
    mixPanel.innerHTML = "";
    for (const [b, label] of mixLabels(blockCount, state.split).entries()) {
      const chip = document.createElement("span");
      chip.className = label.startsWith("geometry") ? "chip geom" : "chip app";
      chip.textContent = `block ${b}: ${label}`;
      mixPanel.appendChild(chip);
    }
  }

  if (meta) {
    el<HTMLSpanElement>("ckpt-id").textContent = meta.checkpoint_id;
  } else {
    bannerText.textContent = "server unreachable (/meta failed)";
    banner.hidden = false;
  }
  syncControls();
  apply({}, { immediate: true });
}

fetchMeta("").then(setup);
