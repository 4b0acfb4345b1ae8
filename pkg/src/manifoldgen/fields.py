"""Manifold predictor: a small MLP scalar field whose level sets are the render surfaces.

The field is geometrically initialized to approximate the signed distance to a
sphere, so the initial isosurfaces are nested sphere shells. Level values are
calibrated once, from percentiles of the field along a central probe ray, and
frozen for the rest of training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .diffcore import ContractError, NumericError


class CalibrationError(RuntimeError):
    """Level calibration failed (degenerate field along the probe)."""


@dataclass
class SceneVolume:
    """Axis-aligned bounding cube of the scene; rays are clipped to it."""

    half_extent: float = 1.0
    t_near: float = 0.0
    t_far: float = 4.0

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ContractError("t_near must be < t_far")

    def clip_segment(self, origin: np.ndarray, direction: np.ndarray,
                     t_near: float, t_far: float) -> tuple[float, float]:
        """Intersect [t_near, t_far] with the cube slab interval; empty -> (0, -1)."""
        lo, hi = t_near, t_far
        h = self.half_extent
        for ax in range(3):
            o, d = float(origin[ax]), float(direction[ax])
            if abs(d) < 1e-12:
                if abs(o) > h:
                    return 0.0, -1.0
                continue
            t0 = (-h - o) / d
            t1 = (h - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            lo = max(lo, t0)
            hi = min(hi, t1)
        if lo >= hi:
            return 0.0, -1.0
        return lo, hi

    def clip_batch(self, origins: np.ndarray, directions: np.ndarray,
                   t_near: float, t_far: float) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized clip_segment; empty intervals come back with hi <= lo."""
        h = self.half_extent
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(directions, dtype=np.float64)
        safe_d = np.where(np.abs(d) < 1e-12, 1.0, d)
        t0 = (-h - o) / safe_d
        t1 = (h - o) / safe_d
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        parallel = np.abs(d) < 1e-12
        inside = np.abs(o) <= h
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
        lo = np.maximum(tmin.max(axis=-1), t_near)
        hi = np.minimum(tmax.min(axis=-1), t_far)
        return lo, hi


class ScalarField(nn.Module):
    """MLP x in R^3 -> scalar, three hidden layers, softplus activations.

    Softplus with a moderately large beta is close enough to ReLU for the
    SAL-style sphere initialization while staying smooth for the linear
    interpolation of ray-surface intersections.
    """

    def __init__(self, hidden: Sequence[int] = (64, 64, 64),
                 softplus_beta: float = 10.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if len(hidden) != 3:
            raise ContractError("scalar field uses exactly three hidden layers")
        dims = [3, *hidden, 1]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(4)
        )
        self.act = nn.Softplus(beta=softplus_beta)
        self.center = nn.Parameter(torch.zeros(3, dtype=dtype), requires_grad=False)
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x - self.center
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
        return self.layers[-1](h).squeeze(-1)


def eval_field(field: ScalarField, points) -> torch.Tensor:
    """Evaluate the field on a (P, 3) batch of points."""
    pts = torch.as_tensor(points, dtype=next(field.parameters()).dtype)
    if pts.numel() == 0:
        return pts.new_zeros((0,))
    if pts.shape[-1] != 3:
        raise ContractError(f"expected 3-vectors, got shape {tuple(pts.shape)}")
    if not torch.isfinite(pts).all():
        raise NumericError("non-finite input point")
    return field(pts)


def _sal_init(field: ScalarField, radius: float, gen: torch.Generator) -> None:
    # SAL-style: hidden weights ~ N(0, sqrt(2/fan_out)), last layer mean
    # sqrt(pi/fan_in) with tiny variance and bias -radius, which makes a
    # ReLU-ish MLP approximate ||x - center|| - radius.
    for layer in field.layers[:-1]:
        out_dim = layer.weight.shape[0]
        nn.init.normal_(layer.weight, 0.0, math.sqrt(2.0 / out_dim), generator=gen)
        nn.init.zeros_(layer.bias)
    last = field.layers[-1]
    in_dim = last.weight.shape[1]
    nn.init.normal_(last.weight, math.sqrt(math.pi / in_dim), 1e-5, generator=gen)
    nn.init.constant_(last.bias, -radius)


def init_geometric(
    seed: int,
    center,
    radius: float,
    hidden_width: int = 64,
    refine_steps: int = 400,
    dtype: torch.dtype = torch.float32,
) -> ScalarField:
    """Initialize the field to approximate the sphere SDF ||x-center|| - radius.

    The analytic SAL initialization lands in the right basin; a short Adam fit
    against the exact SDF on random in-volume points then tightens it so the
    sphere property holds at small widths too. Deterministic given the seed.
    """
    field = ScalarField(hidden=(hidden_width,) * 3, dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    _sal_init(field, radius, gen)
    with torch.no_grad():
        field.center.copy_(torch.as_tensor(center, dtype=dtype))

    if refine_steps > 0:
        ctr = torch.as_tensor(center, dtype=dtype)
        # Fit region: the scene cube extended to cover the init sphere, so the
        # fit also holds near a center placed outside the cube.
        lo = torch.minimum(torch.full((3,), -1.0, dtype=dtype), ctr - 1.5 * radius)
        hi = torch.maximum(torch.full((3,), 1.0, dtype=dtype), ctr + 1.5 * radius)
        opt = torch.optim.Adam(field.parameters(), lr=3e-3)
        for _ in range(refine_steps):
            x = lo + (hi - lo) * torch.rand(512, 3, generator=gen, dtype=dtype)
            # Oversample near the center: the SDF's cone tip there is what a
            # smooth small net misses under uniform sampling alone.
            x_ctr = ctr + 0.4 * radius * torch.randn(128, 3, generator=gen,
                                                     dtype=dtype)
            x = torch.cat([x, x_ctr])
            target = torch.linalg.norm(x - ctr, dim=-1) - radius
            loss = ((field(x) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        field.zero_grad(set_to_none=True)
    return field


@dataclass
class LevelSchedule:
    """The ordered level values whose isosurfaces carry the radiance."""

    levels: list[float]
    background_plane_depth: Optional[float] = None  # world z of the fixed far plane

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ContractError("need at least one level")
        diffs = np.diff(self.levels)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ContractError("levels must be strictly monotone")

    @property
    def surface_count(self) -> int:
        n = len(self.levels)
        return n + 1 if self.background_plane_depth is not None else n


def calibrate_levels(
    field: ScalarField,
    n_levels: int,
    volume: SceneVolume,
    probe_origin,
    probe_direction,
    probe_samples: int = 256,
    background_plane_depth: Optional[float] = None,
) -> LevelSchedule:
    """Pick N level values evenly spanning the field range along a probe ray.

    Values are evenly spaced (midpoint rule) between the 5th and 95th
    percentile of the field observed along the probe, so the initial
    isosurfaces evenly cover the visible depth range.
    """
    if n_levels < 1:
        raise ContractError("n_levels must be >= 1")
    o = np.asarray(probe_origin, dtype=np.float64)
    d = np.asarray(probe_direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lo, hi = volume.clip_segment(o, d, volume.t_near, volume.t_far)
    if hi <= lo:
        raise CalibrationError("probe ray misses the scene volume")
    ts = np.linspace(lo, hi, probe_samples)
    pts = o[None, :] + ts[:, None] * d[None, :]
    with torch.no_grad():
        vals = eval_field(field, pts).double().numpy()
    p5, p95 = np.percentile(vals, [5.0, 95.0])
    if p95 - p5 < 1e-8:
        raise CalibrationError("field is (near-)constant along the probe ray")
    fracs = (np.arange(n_levels) + 0.5) / n_levels
    levels = (p5 + (p95 - p5) * fracs).tolist()
    return LevelSchedule(levels=levels, background_plane_depth=background_plane_depth)
