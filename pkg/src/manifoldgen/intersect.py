"""Deterministic, differentiable ray-isosurface intersections.

Points are sampled uniformly along each ray, the first sample interval
bracketing each level value is located, and the crossing is placed by linear
interpolation between the interval endpoints. Gradients flow only through the
two endpoint field values; the interval choice and sample positions are
treated as locally constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .diffcore import ContractError
from .fields import LevelSchedule, ScalarField, SceneVolume

_DEGENERATE_EPS = 1e-12


def _field_dtype(field) -> torch.dtype:
    return next(iter(field.parameters()), torch.empty(0, dtype=torch.float64)).dtype


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ContractError(f"ray direction must be unit length, got |d|={n}")
        if not self.t_near < self.t_far:
            raise ContractError("ray needs t_near < t_far")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class Intersection:
    surface_index: int
    t_hit: float
    position: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    s_a: float
    s_b: float
    degenerate: bool = False


@dataclass
class IntersectionSet:
    """Per-ray crossings sorted by t_hit; at most one entry per surface."""

    hits: list[Intersection]

    def __post_init__(self):
        ts = [h.t_hit for h in self.hits]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ContractError("intersections must be strictly increasing in t")
        idx = [h.surface_index for h in self.hits]
        if len(set(idx)) != len(idx):
            raise ContractError("duplicate surface index in intersection set")


def sample_ray_points(ray: Ray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced t values (inclusive of both ends) and their positions."""
    if count < 2:
        raise ContractError("need at least 2 samples")
    t = np.linspace(ray.t_near, ray.t_far, count)
    pos = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    return t, pos


def intersect_batch(
    field: ScalarField,
    levels: torch.Tensor,
    origins: torch.Tensor,
    directions: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    sample_count: int = 64,
) -> dict:
    """Vectorized first-crossing intersection for R rays x L levels.

    Returns tensors: t_hit (R, L), valid (R, L) bool, positions (R, L, 3),
    plus the endpoint bookkeeping (s_a, s_b, interval index). Rays whose
    clipped t interval is empty must be filtered by the caller (t_far <=
    t_near rows yield no valid hits).
    """
    dtype = _field_dtype(field)
    origins = origins.to(dtype)
    directions = directions.to(dtype)
    t_near = t_near.to(dtype)
    t_far = t_far.to(dtype)
    n_rays = origins.shape[0]
    n_levels = levels.shape[0]

    alive = t_far > t_near
    u = torch.linspace(0.0, 1.0, sample_count, dtype=dtype)
    t = t_near[:, None] + (t_far - t_near).clamp_min(0.0)[:, None] * u[None, :]
    pts = origins[:, None, :] + t[..., None] * directions[:, None, :]
    s = field(pts.reshape(-1, 3)).reshape(n_rays, sample_count)

    s_det = s.detach()
    sa_det, sb_det = s_det[:, :-1], s_det[:, 1:]
    lo = torch.minimum(sa_det, sb_det)[:, None, :]
    hi = torch.maximum(sa_det, sb_det)[:, None, :]
    lv = levels.to(dtype)[None, :, None]
    cross = (lo <= lv) & (lv <= hi) & alive[:, None, None]

    valid = cross.any(dim=2)
    first = torch.argmax(cross.to(torch.int8), dim=2)  # (R, L)

    ray_idx = torch.arange(n_rays)[:, None].expand(-1, n_levels)
    s_a = s[ray_idx, first]
    s_b = s[ray_idx, first + 1]
    t_a = t.detach()[ray_idx, first]
    t_b = t.detach()[ray_idx, first + 1]

    denom = s_b - s_a
    degenerate = denom.detach().abs() < _DEGENERATE_EPS
    safe_denom = torch.where(degenerate, torch.ones_like(denom), denom)
    w = (levels.to(dtype)[None, :] - s_a) / safe_denom
    w = torch.where(degenerate, torch.full_like(w, 0.5).detach(), w)

    t_hit = t_a + w * (t_b - t_a)
    positions = origins[:, None, :] + t_hit[..., None] * directions[:, None, :]
    return {
        "t_hit": t_hit,
        "valid": valid,
        "positions": positions,
        "s_a": s_a,
        "s_b": s_b,
        "t_a": t_a,
        "t_b": t_b,
        "interval": first,
        "degenerate": degenerate,
        "samples_t": t,
        "samples_s": s,
    }


def find_intersections(
    field: ScalarField,
    schedule: LevelSchedule,
    ray: Ray,
    sample_count: int = 64,
    volume: Optional[SceneVolume] = None,
) -> IntersectionSet:
    """First crossing of each level along one ray, sorted near to far."""
    t_lo, t_hi = ray.t_near, ray.t_far
    if volume is not None:
        t_lo, t_hi = volume.clip_segment(ray.origin, ray.direction, t_lo, t_hi)
        if t_hi <= t_lo:
            return IntersectionSet(hits=[])
    dtype = _field_dtype(field)
    with torch.no_grad():
        out = intersect_batch(
            field,
            torch.as_tensor(schedule.levels, dtype=dtype),
            torch.as_tensor(ray.origin, dtype=dtype)[None, :],
            torch.as_tensor(ray.direction, dtype=dtype)[None, :],
            torch.tensor([t_lo], dtype=dtype),
            torch.tensor([t_hi], dtype=dtype),
            sample_count,
        )
    hits = []
    for i in range(len(schedule.levels)):
        if not bool(out["valid"][0, i]):
            continue
        t_hit = float(out["t_hit"][0, i])
        t_a, t_b = float(out["t_a"][0, i]), float(out["t_b"][0, i])
        hits.append(
            Intersection(
                surface_index=i,
                t_hit=t_hit,
                position=ray.at(t_hit),
                x_a=ray.at(t_a),
                x_b=ray.at(t_b),
                s_a=float(out["s_a"][0, i]),
                s_b=float(out["s_b"][0, i]),
                degenerate=bool(out["degenerate"][0, i]),
            )
        )
    hits.sort(key=lambda h: h.t_hit)
    # Exact t ties between distinct levels are measure-zero; keep the nearer level.
    deduped: list[Intersection] = []
    for h in hits:
        if deduped and h.t_hit <= deduped[-1].t_hit:
            continue
        deduped.append(h)
    return IntersectionSet(hits=deduped)
