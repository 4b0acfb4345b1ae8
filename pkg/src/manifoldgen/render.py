"""Camera model, occupancy compositing and full-image synthesis.

Rendering an image is: one ray per pixel center -> first crossing of each
level surface -> radiance at the crossings -> front-to-back occupancy
compositing. The whole path is deterministic; the stochastic hierarchical
sampler at the bottom exists only to demonstrate the sampling-noise contrast.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .diffcore import ContractError, NumericError
from .intersect import intersect_batch

DEFAULT_BACKGROUND = np.array([-1.0, -1.0, -1.0])


@dataclass
class CameraPose:
    """Orbit camera: spherical position around the origin, roll fixed to 0."""

    yaw: float
    pitch: float
    radius: float

    def __post_init__(self):
        if not -math.pi / 2 < self.pitch < math.pi / 2:
            raise ContractError("pitch must lie in (-pi/2, pi/2)")
        if self.radius <= 0:
            raise ContractError("radius must be positive")

    def as_vector(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.radius])

    def eye(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        # yaw = pitch = 0 places the camera on the -z axis looking toward +z.
        return self.radius * np.array([sy * cp, sp, -cy * cp])


@dataclass
class CameraIntrinsics:
    fov: float = math.radians(12.0)  # vertical field of view
    height: int = 64
    width: int = 64
    t_near: Optional[float] = None  # defaults to 0.88 * radius
    t_far: Optional[float] = None  # defaults to 1.12 * radius

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ContractError("fov must lie in (0, pi)")
        if self.height < 1 or self.width < 1:
            raise ContractError("resolution must be >= 1")

    def t_range(self, radius: float) -> tuple[float, float]:
        tn = self.t_near if self.t_near is not None else 0.88 * radius
        tf = self.t_far if self.t_far is not None else 1.12 * radius
        if not tn < tf:
            raise ContractError("t_near must be < t_far")
        return tn, tf


def camera_frame(pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (eye, forward, right, up) of the look-at frame."""
    eye = pose.eye()
    forward = -eye / np.linalg.norm(eye)
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, forward, right, up


def generate_rays(pose: CameraPose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole rays through pixel centers: origins (H, W, 3), unit dirs (H, W, 3)."""
    eye, forward, right, up = camera_frame(pose)
    h, w = intr.height, intr.width
    tan_v = math.tan(intr.fov / 2.0)
    tan_h = tan_v * w / h
    xs = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_h
    ys = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tan_v
    px, py = np.meshgrid(xs, ys)
    dirs = forward[None, None, :] + px[..., None] * right[None, None, :] \
        + py[..., None] * up[None, None, :]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(eye, dirs.shape).copy()
    return origins, dirs


def composite_batch(
    alphas: np.ndarray,
    colors: np.ndarray,
    mask: Optional[np.ndarray] = None,
    background: np.ndarray = DEFAULT_BACKGROUND,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Front-to-back occupancy compositing over (B, K) sample rows.

    w_i = a_i * prod_{j<i} (1 - a_j); color = sum w_i c_i + (1 - sum w) * bg.
    This kernel is shared verbatim by the ray path and the mesh rasterizer.
    """
    alphas = np.asarray(alphas)
    colors = np.asarray(colors)
    if mask is None:
        mask = np.ones(alphas.shape, dtype=bool)
    a = np.where(mask, alphas, 0.0)
    one_minus = 1.0 - a
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = a * trans
    opacity = weights.sum(axis=1)
    color = (weights[..., None] * colors).sum(axis=1) \
        + (1.0 - opacity)[..., None] * np.asarray(background)
    return color, opacity, weights


def composite(samples: Sequence, background: np.ndarray = DEFAULT_BACKGROUND,
              ts: Optional[Sequence[float]] = None):
    """Composite one near-to-far sample list of objects with .color and .occupancy.

    If depth metadata `ts` is supplied, it must be sorted ascending.
    """
    if ts is not None and any(b < a for a, b in zip(ts, ts[1:])):
        raise ContractError("composite requires samples sorted near to far")
    if len(samples) == 0:
        bg = np.asarray(background, dtype=float)
        return bg.copy(), 0.0, np.zeros(0)
    alphas = np.array([s.occupancy for s in samples])[None, :]
    colors = np.array([np.asarray(s.color, dtype=float) for s in samples])[None, :, :]
    color, opacity, weights = composite_batch(alphas, colors, None, background)
    return color[0], float(opacity[0]), weights[0]


def _plane_hits(gen, origins: torch.Tensor, dirs: torch.Tensor,
                t_lo: torch.Tensor, t_hi: torch.Tensor):
    """Intersection with the optional fixed background plane z = depth."""
    depth = gen.schedule.background_plane_depth
    dz = dirs[:, 2]
    safe_dz = torch.where(dz.abs() < 1e-9, torch.ones_like(dz), dz)
    t = (depth - origins[:, 2]) / safe_dz
    valid = (dz.abs() >= 1e-9) & (t >= t_lo) & (t <= t_hi)
    t = torch.where(valid, t, torch.full_like(t, float("inf")))
    pos = origins + t.clamp(max=1e6)[:, None] * dirs
    return t, valid, pos


def render_rays(gen, cond, origins: torch.Tensor, dirs: torch.Tensor,
                t_lo: torch.Tensor, t_hi: torch.Tensor,
                background: np.ndarray = DEFAULT_BACKGROUND) -> torch.Tensor:
    """Differentiable color for a batch of rays; the training-path workhorse."""
    dtype = next(gen.synthesis.parameters()).dtype
    levels = torch.as_tensor(gen.schedule.levels, dtype=dtype)
    out = intersect_batch(gen.field, levels, origins, dirs, t_lo, t_hi,
                          gen.sample_count)
    t_hit, valid, positions = out["t_hit"], out["valid"], out["positions"]

    if gen.schedule.background_plane_depth is not None:
        tp, vp, pp = _plane_hits(gen, origins.to(dtype), dirs.to(dtype),
                                 t_lo.to(dtype), t_hi.to(dtype))
        t_hit = torch.cat([t_hit, tp[:, None]], dim=1)
        valid = torch.cat([valid, vp[:, None]], dim=1)
        positions = torch.cat([positions, pp[:, None, :]], dim=1)

    n_rays, n_surf = t_hit.shape
    flat_valid = valid.reshape(-1)
    flat_pos = positions.reshape(-1, 3)
    view = dirs.to(dtype)[:, None, :].expand(-1, n_surf, -1).reshape(-1, 3)

    colors = torch.zeros(n_rays * n_surf, 3, dtype=dtype)
    alphas = torch.zeros(n_rays * n_surf, dtype=dtype)
    if flat_valid.any():
        idx = flat_valid.nonzero(as_tuple=True)[0]
        # Conditioning may carry one style row per ray (batched training);
        # gather the right row for each surviving point.
        if cond.gammas[0].dim() == 2 and cond.gammas[0].shape[0] == n_rays:
            ray_of_point = torch.div(idx, n_surf, rounding_mode="floor")
            from .radiance import FiLMConditioning
            cond_sel = FiLMConditioning(
                gammas=[g[ray_of_point] for g in cond.gammas],
                betas=[b[ray_of_point] for b in cond.betas])
        else:
            cond_sel = cond
        c, a = gen.synthesis(flat_pos[idx], view[idx], cond_sel)
        colors = colors.index_put((idx,), c)
        alphas = alphas.index_put((idx,), a)
    colors = colors.reshape(n_rays, n_surf, 3)
    alphas = alphas.reshape(n_rays, n_surf)

    sort_key = torch.where(valid, t_hit.detach(),
                           torch.full_like(t_hit, float("inf")))
    order = torch.argsort(sort_key, dim=1)
    alphas = torch.gather(alphas, 1, order)
    colors = torch.gather(colors, 1, order[..., None].expand(-1, -1, 3))

    trans = torch.cumprod(1.0 - alphas, dim=1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    weights = alphas * trans
    opacity = weights.sum(dim=1)
    bg = torch.as_tensor(background, dtype=dtype)
    return (weights[..., None] * colors).sum(dim=1) \
        + (1.0 - opacity)[:, None] * bg


def ray_bundle(gen, pose: CameraPose, intr: CameraIntrinsics):
    """Clipped torch ray tensors for every pixel of an image."""
    origins, dirs = generate_rays(pose, intr)
    tn, tf = intr.t_range(pose.radius)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    lo, hi = gen.volume.clip_batch(o, d, tn, tf)
    return (torch.as_tensor(o), torch.as_tensor(d),
            torch.as_tensor(lo), torch.as_tensor(hi))


def render_image(gen, z, pose: CameraPose, intr: CameraIntrinsics,
                 background: np.ndarray = DEFAULT_BACKGROUND) -> np.ndarray:
    """Deterministic H x W x 3 image in [-1, 1] for one latent and pose."""
    with torch.no_grad():
        cond = gen.mapping(torch.as_tensor(
            z, dtype=next(gen.mapping.parameters()).dtype))
    return render_image_cond(gen, cond, pose, intr, background)


def render_image_cond(gen, cond, pose: CameraPose, intr: CameraIntrinsics,
                      background: np.ndarray = DEFAULT_BACKGROUND) -> np.ndarray:
    """render_image for a precomputed (possibly style-mixed) conditioning."""
    with torch.no_grad():
        o, d, lo, hi = ray_bundle(gen, pose, intr)
        try:
            colors = render_rays(gen, cond, o, d, lo, hi, background)
        except NumericError as e:
            raise NumericError(f"{e} (while rendering {intr.width}x{intr.height} image)")
    img = colors.reshape(intr.height, intr.width, 3).numpy()
    if not np.isfinite(img).all():
        bad = np.argwhere(~np.isfinite(img).all(axis=-1))[0]
        raise NumericError(f"non-finite pixel at (row={bad[0]}, col={bad[1]})")
    return img.astype(np.float32)


def sample_hierarchical_baseline(gen, cond, origins: torch.Tensor,
                                 dirs: torch.Tensor, t_lo: torch.Tensor,
                                 t_hi: torch.Tensor, n_coarse: int,
                                 n_fine: int, rng: np.random.Generator,
                                 background: np.ndarray = DEFAULT_BACKGROUND) -> torch.Tensor:
    """Stochastic coarse-stratified + fine-importance sampling along rays.

    Exists solely as the noise-contrast baseline: its output varies with the
    rng while the manifold path is bit-stable across repeats.
    """
    if n_coarse < 1 or n_fine < 1:
        raise ContractError("n_coarse and n_fine must be >= 1")
    dtype = next(gen.synthesis.parameters()).dtype
    n_rays = origins.shape[0]
    span = (t_hi - t_lo).clamp_min(0.0)

    u = (np.arange(n_coarse) + rng.random((n_rays, n_coarse))) / n_coarse
    t_coarse = t_lo[:, None] + span[:, None] * torch.as_tensor(u, dtype=t_lo.dtype)

    with torch.no_grad():
        pts = origins[:, None, :] + t_coarse[..., None] * dirs[:, None, :]
        view = dirs.to(dtype)[:, None, :].expand(-1, n_coarse, -1)
        _, a_coarse = gen.synthesis(pts.reshape(-1, 3).to(dtype),
                                    view.reshape(-1, 3), cond)
        a_coarse = a_coarse.reshape(n_rays, n_coarse)
        trans = torch.cumprod(1.0 - a_coarse, dim=1)
        trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
        w = (a_coarse * trans).numpy() + 1e-5

    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    draws = rng.random((n_rays, n_fine))
    bin_idx = np.minimum((cdf[:, None, :] < draws[:, :, None]).sum(axis=2),
                         n_coarse - 1)
    frac = rng.random((n_rays, n_fine))
    tc = t_coarse.numpy()
    edges = np.concatenate([t_lo.numpy()[:, None], tc], axis=1)
    left = np.take_along_axis(edges, bin_idx, axis=1)
    right = np.take_along_axis(tc, bin_idx, axis=1)
    t_fine = left + frac * (right - left)

    t_all = torch.sort(torch.cat(
        [t_coarse, torch.as_tensor(t_fine, dtype=t_coarse.dtype)], dim=1),
        dim=1).values
    n_all = n_coarse + n_fine
    pts = origins[:, None, :] + t_all[..., None] * dirs[:, None, :]
    view = dirs.to(dtype)[:, None, :].expand(-1, n_all, -1)
    with torch.no_grad():
        c, a = gen.synthesis(pts.reshape(-1, 3).to(dtype),
                             view.reshape(-1, 3), cond)
    c = c.reshape(n_rays, n_all, 3)
    a = a.reshape(n_rays, n_all)
    trans = torch.cumprod(1.0 - a, dim=1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    weights = a * trans
    opacity = weights.sum(dim=1)
    bg = torch.as_tensor(background, dtype=dtype)
    return (weights[..., None] * c).sum(dim=1) + (1.0 - opacity)[:, None] * bg


def image_to_png_bytes(img: np.ndarray) -> bytes:
    """[-1, 1] floats -> 8-bit RGB PNG, rounding half away from zero."""
    u = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    u8 = np.clip(np.floor(u + 0.5), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(img: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(image_to_png_bytes(img))


def png_bytes_to_image(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float64)
    return (arr / 127.5 - 1.0).astype(np.float32)
