"""Dataset ingestion and the synthetic Lambertian-primitive generator.

Real training data is a directory with a `manifest.txt` (one record per line:
`relative_path yaw pitch radius`, labels `-` when absent) and 8-bit RGB PNGs.
The synthetic generator ray-traces spheres and boxes with exact pose labels,
standing in for the full-scale photo datasets at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffcore import ContractError, SeededSampler
from .render import CameraIntrinsics, CameraPose, generate_rays, png_bytes_to_image, save_png


class DatasetError(RuntimeError):
    """Missing, corrupt or inconsistent dataset contents."""


@dataclass
class ManifestEntry:
    relative_path: str
    pose: Optional[np.ndarray]  # (yaw, pitch, radius) or None


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    resolution: int

    def __len__(self) -> int:
        return len(self.entries)


class ImageAccessor:
    """Decodes dataset images to [-1, 1] floats; safe for concurrent readers."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, np.ndarray] = {}

    def image(self, index: int) -> np.ndarray:
        if index in self._cache:
            return self._cache[index]
        entry = self.manifest.entries[index]
        path = os.path.join(self.manifest.root, entry.relative_path)
        try:
            with open(path, "rb") as f:
                img = png_bytes_to_image(f.read())
        except (OSError, ValueError) as e:
            raise DatasetError(f"cannot load image '{path}': {e}")
        if img.shape[0] != self.manifest.resolution or img.shape[1] != self.manifest.resolution:
            raise ContractError(
                f"image '{path}' is {img.shape[1]}x{img.shape[0]}, "
                f"manifest declares {self.manifest.resolution}")
        self._cache[index] = img
        return img


def write_manifest(manifest: DatasetManifest) -> None:
    lines = ["# relative_path yaw pitch radius"]
    for e in manifest.entries:
        if e.pose is None:
            lines.append(f"{e.relative_path} - - -")
        else:
            y, p, r = e.pose
            lines.append(f"{e.relative_path} {y:.9g} {p:.9g} {r:.9g}")
    lines.append(f"# resolution {manifest.resolution}")
    with open(os.path.join(manifest.root, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(directory) -> tuple[DatasetManifest, ImageAccessor]:
    path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(path):
        raise DatasetError(f"no manifest.txt in '{directory}'")
    entries: list[ManifestEntry] = []
    resolution = None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            stripped = line.strip()
            if stripped.startswith("# resolution"):
                resolution = int(stripped.split()[-1])
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 4:
                raise DatasetError(f"malformed manifest line: {stripped!r}")
            rel, y, p, r = parts
            pose = None
            if y != "-":
                pose = np.array([float(y), float(p), float(r)])
                if not np.isfinite(pose).all():
                    raise DatasetError(f"non-finite pose label for '{rel}'")
            entries.append(ManifestEntry(relative_path=rel, pose=pose))
    if not entries:
        raise DatasetError(f"manifest in '{directory}' lists no images")
    if resolution is None:
        # Infer from the first image.
        first = os.path.join(directory, entries[0].relative_path)
        try:
            with open(first, "rb") as f:
                resolution = png_bytes_to_image(f.read()).shape[0]
        except OSError as e:
            raise DatasetError(f"cannot load image '{first}': {e}")
    manifest = DatasetManifest(root=str(directory), entries=entries,
                               resolution=resolution)
    return manifest, ImageAccessor(manifest)


class BatchSampler:
    """Without-replacement epoch sampling with a seeded shuffle per epoch."""

    def __init__(self, manifest: DatasetManifest, accessor: ImageAccessor,
                 batch_size: int, rng: np.random.Generator):
        if batch_size > len(manifest):
            raise ContractError("batch_size exceeds dataset size")
        self.manifest = manifest
        self.accessor = accessor
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.array([], dtype=int)
        self._pos = 0

    def next_batch(self) -> tuple[np.ndarray, list[Optional[np.ndarray]]]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.manifest))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        images = np.stack([self.accessor.image(int(i)) for i in idx])
        poses = [self.manifest.entries[int(i)].pose for i in idx]
        return images, poses


def _shade_sphere(origins, dirs, center, radius, albedo, light_dir, background):
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = b * b - c
    hit = disc > 0
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit &= t > 0
    pos = origins + t[..., None] * dirs
    normal = (pos - center) / radius
    lambert = np.maximum(0.0, np.sum(normal * -light_dir, axis=-1))
    shaded = albedo[None, None, :] * lambert[..., None]
    img = np.where(hit[..., None], shaded * 2.0 - 1.0, background[None, None, :])
    return img


def _shade_box(origins, dirs, half, albedo, light_dir, background):
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (-half - origins) / safe
    t1 = (half - origins) / safe
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    hit = (t_enter < t_exit) & (t_enter > 0)
    axis = np.argmax(tmin, axis=-1)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    normal = np.zeros(origins.shape)
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
    lambert = np.maximum(0.0, np.sum(normal * -light_dir, axis=-1))
    shaded = albedo[None, None, :] * lambert[..., None]
    return np.where(hit[..., None], shaded * 2.0 - 1.0, background[None, None, :])


def synth_generate(
    out_directory,
    count: int = 512,
    resolution: int = 32,
    primitive: str = "mixed",
    seed: int = 0,
    pose_kind: str = "gaussian_frontal",
    yaw_std: float = 0.3,
    pitch_std: float = 0.15,
    camera_radius: float = 2.0,
    fov: float = np.radians(12.0),
    primitive_scale: float = 0.12,
    background: np.ndarray = np.array([-1.0, -1.0, -1.0]),
    headlight: bool = True,
) -> DatasetManifest:
    """Ray-traced Lambertian spheres/boxes with exact pose labels.

    The light is a headlight (directional along the camera axis) so shading is
    pose-consistent with what the generator must learn. Deterministic per seed.
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    os.makedirs(out_directory, exist_ok=True)
    sampler = SeededSampler(seed)
    pose_rng = sampler.stream("dataset_pose")
    albedo_rng = sampler.stream("dataset_albedo")
    shape_rng = sampler.stream("dataset_shape")
    intr = CameraIntrinsics(fov=fov, height=resolution, width=resolution)

    entries: list[ManifestEntry] = []
    for i in range(count):
        if pose_kind == "gaussian_frontal":
            yaw = pose_rng.normal(0.0, yaw_std)
            pitch = pose_rng.normal(0.0, pitch_std)
            pitch = float(np.clip(pitch, -1.4, 1.4))
        elif pose_kind == "uniform_hemisphere":
            yaw = pose_rng.uniform(0.0, 2.0 * np.pi)
            pitch = pose_rng.uniform(0.0, np.pi / 2)
        else:
            raise ContractError(f"unknown pose kind: {pose_kind}")
        pose = CameraPose(yaw=float(yaw), pitch=float(pitch), radius=camera_radius)
        origins, dirs = generate_rays(pose, intr)

        albedo = 0.3 + 0.7 * albedo_rng.random(3)
        kind = primitive
        if primitive == "mixed":
            kind = "sphere" if shape_rng.random() < 0.5 else "box"
        # Headlight: directional light along the camera axis of this view.
        light_dir = dirs[resolution // 2, resolution // 2] if headlight \
            else np.array([0.0, -0.5, 0.866])

        if kind == "sphere":
            img = _shade_sphere(origins, dirs, np.zeros(3), primitive_scale,
                                albedo, light_dir, background)
        else:
            half = np.full(3, primitive_scale * 0.9)
            img = _shade_box(origins, dirs, half, albedo, light_dir, background)

        rel = f"img_{i:05d}.png"
        save_png(np.clip(img, -1.0, 1.0), os.path.join(out_directory, rel))
        entries.append(ManifestEntry(relative_path=rel, pose=pose.as_vector()))

    manifest = DatasetManifest(root=str(out_directory), entries=entries,
                               resolution=resolution)
    write_manifest(manifest)
    return manifest
