"""Mesh extraction, radiance baking and the layered real-time raster path.

The level-set meshes are extracted once per (checkpoint, latent) with
marching cubes, radiance is frozen onto their vertices at a canonical frontal
view, and novel views are then rendered by depth-sorting rasterized fragments
and compositing them with the exact same kernel as the ray path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
import torch
from skimage import measure

from .diffcore import ContractError
from .fields import LevelSchedule, ScalarField, SceneVolume
from .render import (CameraIntrinsics, CameraPose, DEFAULT_BACKGROUND,
                     camera_frame, composite_batch)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float32
    triangles: np.ndarray  # (T, 3) int32
    colors: Optional[np.ndarray] = None  # (V, 3) float32
    alphas: Optional[np.ndarray] = None  # (V,) float32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ContractError("triangle index out of range")
        if not np.isfinite(self.vertices).all():
            raise ContractError("non-finite vertex coordinate")
        self._attributes = None

    def vertex_attributes(self) -> np.ndarray:
        """Baked (V, 4) rgba matrix, assembled lazily once."""
        if self._attributes is None:
            self._attributes = np.concatenate(
                [self.colors, self.alphas[:, None]], axis=1).astype(np.float32)
        return self._attributes

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class BakedMeshSet:
    """Per-level meshes with frozen per-vertex radiance, in level order."""

    meshes: list[TriangleMesh]
    checkpoint_id: str = ""
    latent_seed: Optional[int] = None
    bake_resolution: int = 0
    _merged: Optional[TriangleMesh] = None

    def merged_mesh(self) -> Optional[TriangleMesh]:
        """All layers as one triangle soup (depth sorting restores order)."""
        if self._merged is None:
            live = [m for m in self.meshes if not m.empty]
            if not live:
                return None
            offsets = np.cumsum([0] + [len(m.vertices) for m in live[:-1]])
            self._merged = TriangleMesh(
                np.concatenate([m.vertices for m in live]),
                np.concatenate([m.triangles + o for m, o in zip(live, offsets)]),
                np.concatenate([m.colors for m in live]),
                np.concatenate([m.alphas for m in live]))
        return self._merged


def marching_cubes(grid: np.ndarray, level: float, origin=(-1.0, -1.0, -1.0),
                   spacing: Optional[float] = None) -> TriangleMesh:
    """Edge-interpolated isosurface triangulation of a dense scalar lattice.

    A lattice value exactly equal to the level counts as inside. Degenerate
    triangles with repeated vertex indices are dropped.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ContractError("grid must be 3D with at least 2 samples per axis")
    if spacing is None:
        spacing = 2.0 / (grid.shape[0] - 1)
    # Nudge exact lattice hits inward so value == level is "inside" (below).
    eps = 1e-12 + 1e-9 * max(1.0, float(np.abs(grid).max()))
    adj = np.where(grid == level, grid - eps, grid)
    if adj.min() >= level or adj.max() <= level:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))
    verts, faces, _, _ = measure.marching_cubes(adj, level=level)
    verts = verts * spacing + np.asarray(origin)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
        & (faces[:, 0] != faces[:, 2])
    return TriangleMesh(verts, faces[keep])


def _field_lattice(field: ScalarField, resolution: int,
                   half_extent: float = 1.0, chunk: int = 65536) -> np.ndarray:
    axis = np.linspace(-half_extent, half_extent, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    flat = pts.reshape(-1, 3)
    dtype = next(field.parameters()).dtype
    out = np.empty(len(flat))
    with torch.no_grad():
        for i in range(0, len(flat), chunk):
            out[i:i + chunk] = field(
                torch.as_tensor(flat[i:i + chunk], dtype=dtype)).numpy()
    return out.reshape(resolution, resolution, resolution)


def background_plane_mesh(depth: float, half_extent: float = 1.0) -> TriangleMesh:
    """The fixed far plane as an analytic two-triangle quad at world z = depth."""
    h = half_extent
    verts = np.array([[-h, -h, depth], [h, -h, depth], [h, h, depth], [-h, h, depth]])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(verts, tris)


def extract_manifolds(field: ScalarField, schedule: LevelSchedule,
                      resolution: int = 64,
                      volume: Optional[SceneVolume] = None) -> list[TriangleMesh]:
    """One mesh per surface level (possibly empty), lattice evaluated once."""
    if resolution < 16:
        raise ContractError("extraction resolution must be >= 16")
    half = volume.half_extent if volume is not None else 1.0
    grid = _field_lattice(field, resolution, half)
    spacing = 2.0 * half / (resolution - 1)
    meshes = [
        marching_cubes(grid, lvl, origin=(-half, -half, -half), spacing=spacing)
        for lvl in schedule.levels
    ]
    if schedule.background_plane_depth is not None:
        meshes.append(background_plane_mesh(schedule.background_plane_depth, half))
    return meshes


CANONICAL_VIEW = np.array([0.0, 0.0, 1.0])


def extract_proxy_shape(gen, z, resolution: int = 64, iso: float = 0.5,
                        chunk: int = 65536) -> TriangleMesh:
    """Marching cubes on the occupancy of the radiance generator itself."""
    cond = gen.cond(z)
    half = gen.volume.half_extent
    axis = np.linspace(-half, half, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    dtype = next(gen.synthesis.parameters()).dtype
    view = torch.as_tensor(CANONICAL_VIEW, dtype=dtype)
    occ = np.empty(len(pts))
    with torch.no_grad():
        for i in range(0, len(pts), chunk):
            _, a = gen.synthesis(torch.as_tensor(pts[i:i + chunk], dtype=dtype),
                                 view, cond)
            occ[i:i + chunk] = a.numpy()
    grid = occ.reshape(resolution, resolution, resolution)
    # Occupancy is "inside above iso"; negate so the shared inside-below
    # convention of marching_cubes applies.
    return marching_cubes(-grid, -iso, origin=(-half, -half, -half),
                          spacing=2.0 * half / (resolution - 1))


def bake_radiance(gen, z, meshes: list[TriangleMesh],
                  checkpoint_id: str = "", latent_seed: Optional[int] = None,
                  bake_resolution: int = 0, chunk: int = 65536) -> BakedMeshSet:
    """Freeze per-vertex color/occupancy at the canonical frontal view."""
    cond = gen.cond(z)
    dtype = next(gen.synthesis.parameters()).dtype
    view = torch.as_tensor(CANONICAL_VIEW, dtype=dtype)
    baked = []
    with torch.no_grad():
        for mesh in meshes:
            if len(mesh.vertices) == 0:
                baked.append(TriangleMesh(mesh.vertices, mesh.triangles,
                                          np.zeros((0, 3), dtype=np.float32),
                                          np.zeros(0, dtype=np.float32)))
                continue
            cols = np.empty((len(mesh.vertices), 3), dtype=np.float32)
            alps = np.empty(len(mesh.vertices), dtype=np.float32)
            for i in range(0, len(mesh.vertices), chunk):
                c, a = gen.synthesis(
                    torch.as_tensor(mesh.vertices[i:i + chunk], dtype=dtype),
                    view, cond)
                cols[i:i + chunk] = c.numpy()
                alps[i:i + chunk] = a.numpy()
            baked.append(TriangleMesh(mesh.vertices, mesh.triangles, cols, alps))
    return BakedMeshSet(meshes=baked, checkpoint_id=checkpoint_id,
                        latent_seed=latent_seed, bake_resolution=bake_resolution)


def _project_vertices(verts: np.ndarray, pose: CameraPose, intr: CameraIntrinsics):
    eye, forward, right, up = camera_frame(pose)
    rel = verts - eye.astype(np.float32)
    basis = np.stack([right, up, forward], axis=1).astype(np.float32)
    x, y, z = (rel @ basis).T
    tan_v = math.tan(intr.fov / 2.0)
    tan_h = tan_v * intr.width / intr.height
    safe_z = np.where(z < 1e-9, 1e-9, z)
    col = ((x / safe_z) / tan_h + 1.0) / 2.0 * intr.width - 0.5
    row = (1.0 - (y / safe_z) / tan_v) / 2.0 * intr.height - 0.5
    return col, row, z


@numba.njit(cache=True)
def _raster_fragments(col, row, z, tris, attrs, width, height, t_near, t_far,
                      cos_map, cap):
    """Scan-convert all triangles into per-pixel depth-sorted fragment rows.

    Rows hold up to `cap` fragments per pixel, nearest first; when a row is
    full the farthest fragment is dropped (it is maximally occluded).
    Everything stays float32 and the triangle order is fixed, so output is
    deterministic.
    """
    n_pix = width * height
    depth = np.zeros((n_pix, cap), np.float32)
    rgba = np.zeros((n_pix, cap, 4), np.float32)
    cnt = np.zeros(n_pix, np.int32)
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= 1e-6 or zb <= 1e-6 or zc <= 1e-6:
            continue
        ax, ay = col[ia], row[ia]
        bx, by = col[ib], row[ib]
        cx, cy = col[ic], row[ic]
        x_lo = max(int(np.ceil(min(ax, bx, cx))), 0)
        x_hi = min(int(np.floor(max(ax, bx, cx))), width - 1)
        if x_hi < x_lo:
            continue
        y_lo = max(int(np.ceil(min(ay, by, cy))), 0)
        y_hi = min(int(np.floor(max(ay, by, cy))), height - 1)
        if y_hi < y_lo:
            continue
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        inv = np.float32(1.0) / area
        # Half-open edge ownership (top-left style rule): a pixel exactly on
        # a shared edge belongs to exactly one of the two adjacent triangles,
        # decided by the oriented edge direction.
        sgn = np.float32(1.0) if area > 0.0 else np.float32(-1.0)
        e0x, e0y = (cx - bx) * sgn, (cy - by) * sgn
        e1x, e1y = (ax - cx) * sgn, (ay - cy) * sgn
        e2x, e2y = (bx - ax) * sgn, (by - ay) * sgn
        for yy in range(y_lo, y_hi + 1):
            fy = np.float32(yy)
            for xx in range(x_lo, x_hi + 1):
                fx = np.float32(xx)
                w0 = ((bx - fx) * (cy - fy) - (by - fy) * (cx - fx)) * inv
                if w0 < 0.0 or (w0 == 0.0 and not
                                (e0y > 0.0 or (e0y == 0.0 and e0x < 0.0))):
                    continue
                w1 = ((cx - fx) * (ay - fy) - (cy - fy) * (ax - fx)) * inv
                if w1 < 0.0 or (w1 == 0.0 and not
                                (e1y > 0.0 or (e1y == 0.0 and e1x < 0.0))):
                    continue
                w2 = ((ax - fx) * (by - fy) - (ay - fy) * (bx - fx)) * inv
                if w2 < 0.0 or (w2 == 0.0 and not
                                (e2y > 0.0 or (e2y == 0.0 and e2x < 0.0))):
                    continue
                zf = w0 * za + w1 * zb + w2 * zc
                pid = yy * width + xx
                t_frag = zf / cos_map[pid]
                if t_frag < t_near or t_frag > t_far:
                    continue
                n = cnt[pid]
                pos = n
                while pos > 0 and depth[pid, pos - 1] > zf:
                    pos -= 1
                if pos >= cap:
                    continue
                last = n if n < cap else cap - 1
                j = last
                while j > pos:
                    depth[pid, j] = depth[pid, j - 1]
                    for c4 in range(4):
                        rgba[pid, j, c4] = rgba[pid, j - 1, c4]
                    j -= 1
                depth[pid, pos] = zf
                for c4 in range(4):
                    rgba[pid, pos, c4] = (w0 * attrs[ia, c4]
                                          + w1 * attrs[ib, c4]
                                          + w2 * attrs[ic, c4])
                if n < cap:
                    cnt[pid] = n + 1
    return depth, rgba, cnt


def rasterize_layers(baked: BakedMeshSet, pose: CameraPose,
                     intr: CameraIntrinsics,
                     background: np.ndarray = DEFAULT_BACKGROUND) -> np.ndarray:
    """Depth-sorted fragment compositing of all baked layers -> H x W x 3 image."""
    if not baked.meshes:
        raise ContractError("baked mesh set is empty")
    for mesh in baked.meshes:
        if mesh.colors is None or mesh.alphas is None:
            raise ContractError("rasterize_layers needs baked color/occupancy")
    n_pix = intr.height * intr.width
    bg = np.asarray(background, dtype=np.float32)
    merged = baked.merged_mesh()
    if merged is None:
        img = np.broadcast_to(bg, (n_pix, 3))
        return img.reshape(intr.height, intr.width, 3).astype(np.float32)

    col, row, z = _project_vertices(merged.vertices, pose, intr)
    # Depth clipping matches the ray path: fragment t = z / (dir . forward)
    # where dir . forward = 1 / |(1, px_ndc, py_ndc)| for a pinhole camera.
    tan_v = math.tan(intr.fov / 2.0)
    tan_h = tan_v * intr.width / intr.height
    xs = (2.0 * (np.arange(intr.width) + 0.5) / intr.width - 1.0) * tan_h
    ys = (1.0 - 2.0 * (np.arange(intr.height) + 0.5) / intr.height) * tan_v
    cos_map = (1.0 / np.sqrt(1.0 + xs[None, :] ** 2 + ys[:, None] ** 2))
    tn, tf = intr.t_range(pose.radius)

    cap = 4 * len(baked.meshes) + 8
    depth, rgba, cnt = _raster_fragments(
        col, row, z, merged.triangles, merged.vertex_attributes(),
        intr.width, intr.height, np.float32(tn), np.float32(tf),
        cos_map.reshape(-1).astype(np.float32), cap)
    kmax = int(cnt.max())
    if kmax == 0:
        img = np.broadcast_to(bg, (n_pix, 3))
        return img.reshape(intr.height, intr.width, 3).astype(np.float32)
    rows = rgba[:, :kmax]
    color, _, _ = composite_batch(rows[:, :, 3], rows[:, :, :3], None, bg)
    return color.reshape(intr.height, intr.width, 3).astype(np.float32)


def export_obj(mesh: TriangleMesh, obj_path, attr_path=None) -> None:
    """ASCII OBJ plus a vertex-indexed `idx r g b a` attribute sidecar."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    with open(obj_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    if attr_path is not None and mesh.colors is not None:
        alines = []
        for i, (c, a) in enumerate(zip(mesh.colors, mesh.alphas)):
            alines.append(f"{i} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g} {a:.9g}")
        with open(attr_path, "w", encoding="utf-8") as f:
            f.write("\n".join(alines) + ("\n" if alines else ""))


def import_obj(obj_path, attr_path=None) -> TriangleMesh:
    verts, tris = [], []
    with open(obj_path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    colors = alphas = None
    if attr_path is not None:
        import os
        if os.path.exists(attr_path):
            colors = np.zeros((len(verts), 3), dtype=np.float32)
            alphas = np.zeros(len(verts), dtype=np.float32)
            with open(attr_path, "r", encoding="utf-8") as f:
                for line in f:
                    parts = line.split()
                    if len(parts) != 5:
                        continue
                    i = int(parts[0])
                    colors[i] = [float(parts[1]), float(parts[2]), float(parts[3])]
                    alphas[i] = float(parts[4])
    v = np.asarray(verts, dtype=np.float32).reshape(-1, 3)
    t = np.asarray(tris, dtype=np.int32).reshape(-1, 3)
    return TriangleMesh(v, t, colors, alphas)
