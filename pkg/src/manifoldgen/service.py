"""HTTP rendering service over an immutable generator snapshot.

Endpoints (all GET, image responses are PNG, errors are JSON
`{code, message}` with the offending field named):

  /render        ray-traced render for a seed and pose
  /render_fast   baked rasterized render (bakes once per seed, cached)
  /interpolate   render from z = (1-t) * z_a + t * z_b
  /mix           style-mixed render (geometry blocks from one seed,
                 appearance blocks from another)
  /meta          model metadata: levels, block count, bounds, presets
  /ui            static viewer assets, when built

All angles are radians. Requests are served concurrently against the
read-only model; the bake cache insertion is guarded by a single lock so
pixels never depend on request interleaving.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .config import EngineConfig
from .diffcore import latent_from_seed
from .geometry import bake_radiance, extract_manifolds, rasterize_layers
from .radiance import mix_conditioning
from .render import (CameraIntrinsics, CameraPose, image_to_png_bytes,
                     render_image, render_image_cond)

MAX_RESOLUTION = 256
BAKE_RESOLUTION = 64
BAKE_CACHE_LIMIT = 16


class QueryError(ValueError):
    """Malformed query parameter; message names the field."""


def _parse(params, name: str, kind, default=None):
    raw = params.get(name)
    if raw is None:
        if default is not None:
            return default
        raise QueryError(f"missing required parameter '{name}'")
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise QueryError(f"malformed parameter '{name}': {raw!r}")


def _parse_pose(params, default_radius: float):
    yaw = _parse(params, "yaw", float, 0.0)
    pitch = _parse(params, "pitch", float, 0.0)
    radius = _parse(params, "radius", float, default_radius)
    fov = _parse(params, "fov", float, math.radians(12.0))
    res = _parse(params, "res", int, 64)
    if radius <= 0:
        raise QueryError("malformed parameter 'radius': must be positive")
    if not 0 < fov < math.pi:
        raise QueryError("malformed parameter 'fov': must be in (0, pi) radians")
    if not 1 <= res <= MAX_RESOLUTION:
        raise QueryError(f"malformed parameter 'res': must be in [1, {MAX_RESOLUTION}]")
    pose = CameraPose(yaw=yaw, pitch=pitch, radius=radius)
    intr = CameraIntrinsics(fov=fov, height=res, width=res)
    return pose, intr


def _png(img: np.ndarray) -> Response:
    return Response(content=image_to_png_bytes(img), media_type="image/png")


def build_app(gen, config: EngineConfig, checkpoint_id: str = "") -> FastAPI:
    app = FastAPI(title="manifoldgen", docs_url=None, redoc_url=None)
    bake_cache: dict[int, object] = {}
    bake_lock = threading.Lock()

    @app.exception_handler(QueryError)
    async def _query_error(request: Request, exc: QueryError):
        return JSONResponse(status_code=400,
                            content={"code": 400, "message": str(exc)})

    def latent(params, name: str) -> np.ndarray:
        seed = _parse(params, name, int)
        return latent_from_seed(seed, gen.latent_dim)

    def baked_for_seed(seed: int):
        with bake_lock:
            cached = bake_cache.get(seed)
        if cached is not None:
            return cached
        z = latent_from_seed(seed, gen.latent_dim)
        meshes = extract_manifolds(gen.field, gen.schedule,
                                   resolution=BAKE_RESOLUTION,
                                   volume=gen.volume)
        baked = bake_radiance(gen, z, meshes, checkpoint_id=checkpoint_id,
                              latent_seed=seed, bake_resolution=BAKE_RESOLUTION)
        with bake_lock:
            if len(bake_cache) >= BAKE_CACHE_LIMIT:
                bake_cache.pop(next(iter(bake_cache)))
            bake_cache.setdefault(seed, baked)
            return bake_cache[seed]

    @app.get("/render")
    def render(request: Request):
        params = request.query_params
        z = latent(params, "seed")
        pose, intr = _parse_pose(params, gen.camera_radius)
        return _png(render_image(gen, z, pose, intr))

    @app.get("/render_fast")
    def render_fast(request: Request):
        params = request.query_params
        seed = _parse(params, "seed", int)
        pose, intr = _parse_pose(params, gen.camera_radius)
        baked = baked_for_seed(seed)
        return _png(rasterize_layers(baked, pose, intr))

    @app.get("/interpolate")
    def interpolate(request: Request):
        params = request.query_params
        z_a = latent(params, "seed_a")
        z_b = latent(params, "seed_b")
        t = _parse(params, "t", float)
        if not 0.0 <= t <= 1.0:
            raise QueryError("malformed parameter 't': must be in [0, 1]")
        pose, intr = _parse_pose(params, gen.camera_radius)
        z = (1.0 - t) * z_a + t * z_b
        return _png(render_image(gen, z, pose, intr))

    @app.get("/mix")
    def mix(request: Request):
        params = request.query_params
        z_geom = latent(params, "seed_geom")
        z_app = latent(params, "seed_app")
        split = _parse(params, "split", int)
        blocks = gen.synthesis.block_count
        if not 0 <= split <= blocks:
            raise QueryError(f"malformed parameter 'split': must be in [0, {blocks}]")
        pose, intr = _parse_pose(params, gen.camera_radius)
        with torch.no_grad():
            cond = mix_conditioning(gen.cond(z_geom), gen.cond(z_app), split)
        return _png(render_image_cond(gen, cond, pose, intr))

    @app.get("/meta")
    def meta():
        return {
            "checkpoint_id": checkpoint_id,
            "levels": list(map(float, gen.schedule.levels)),
            "surface_count": len(gen.schedule.levels)
                + (1 if gen.schedule.background_plane_depth is not None else 0),
            "block_count": gen.synthesis.block_count,
            "latent_dim": gen.latent_dim,
            "camera_radius": gen.camera_radius,
            "resolutions": [32, 64, 128, 256],
            "angles": "radians",
            "bounds": {
                "yaw": [-math.pi, math.pi],
                "pitch": [-1.4, 1.4],
                "radius": [0.5 * gen.camera_radius, 2.0 * gen.camera_radius],
                "fov": [math.radians(3.0), math.radians(60.0)],
            },
        }

    ui_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                          "..", "..", "frontend", "dist")
    ui_dir = os.path.normpath(ui_dir)
    if os.path.isdir(ui_dir):
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
