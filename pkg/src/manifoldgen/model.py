"""Generator/discriminator bundles built from an EngineConfig."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .config import EngineConfig
from .diffcore import ParamStore, SeededSampler, latent_from_seed
from .fields import LevelSchedule, ScalarField, SceneVolume, calibrate_levels, init_geometric
from .radiance import FiLMConditioning, MappingNetwork, SynthesisNetwork
from .render import CameraIntrinsics, CameraPose


@dataclass
class GeneratorModel:
    """Everything needed to render: field, level schedule and radiance nets."""

    field: ScalarField
    schedule: LevelSchedule
    volume: SceneVolume
    mapping: MappingNetwork
    synthesis: SynthesisNetwork
    sample_count: int
    latent_dim: int
    camera_radius: float

    def param_store(self) -> ParamStore:
        store = ParamStore()
        store.register_module("field", self.field)
        store.register_module("mapping", self.mapping)
        store.register_module("synthesis", self.synthesis)
        return store

    def latent(self, seed: int) -> np.ndarray:
        return latent_from_seed(seed, self.latent_dim)

    def cond(self, z) -> FiLMConditioning:
        dtype = next(self.mapping.parameters()).dtype
        return self.mapping(torch.as_tensor(z, dtype=dtype))

    def default_pose(self, yaw: float = 0.0, pitch: float = 0.0,
                     radius: Optional[float] = None) -> CameraPose:
        return CameraPose(yaw=yaw, pitch=pitch,
                          radius=radius if radius is not None else self.camera_radius)

    def intrinsics(self, fov: float, resolution: int) -> CameraIntrinsics:
        return CameraIntrinsics(fov=fov, height=resolution, width=resolution)


def synthesis_block_widths(config: EngineConfig) -> list[int]:
    w = config["model.synthesis_width"]
    b = config["model.synthesis_blocks"]
    return [w] * b + [w + 3]


def build_generator(config: EngineConfig, seed: Optional[int] = None,
                    dtype: torch.dtype = torch.float32,
                    calibrate: bool = True,
                    init_refine: Optional[bool] = None) -> GeneratorModel:
    """Deterministically construct and initialize a generator from config."""
    seed = config["seed"] if seed is None else seed
    sampler = SeededSampler(seed)
    radius = config["camera.radius"]
    volume = SceneVolume(half_extent=1.0, t_near=0.0, t_far=4.0 * radius)

    # Checkpoint loading overwrites every tensor; skip the costly init fit then.
    refine = calibrate if init_refine is None else init_refine
    field = init_geometric(
        seed=int(sampler.stream("field_init").integers(2**31)),
        center=config["model.init_center"],
        radius=config["model.init_radius"],
        hidden_width=config["model.field_width"],
        refine_steps=400 if refine else 0,
        dtype=dtype,
    )

    n_surfaces = config["model.surface_count"]
    background_plane = config["model.background_plane"]
    n_levels = n_surfaces - 1 if background_plane else n_surfaces
    if calibrate:
        intr = CameraIntrinsics(fov=config.fov,
                                height=config["camera.resolution"],
                                width=config["camera.resolution"])
        tn, tf = intr.t_range(radius)
        probe_volume = SceneVolume(half_extent=1.0, t_near=tn, t_far=tf)
        plane_depth = 0.9 * (tf - radius) if background_plane else None
        schedule = calibrate_levels(
            field, n_levels, probe_volume,
            probe_origin=np.array([0.0, 0.0, -radius]),
            probe_direction=np.array([0.0, 0.0, 1.0]),
            background_plane_depth=plane_depth,
        )
    else:
        schedule = LevelSchedule(levels=list(np.linspace(-0.5, 0.5, n_levels)))

    torch.manual_seed(int(sampler.stream("radiance_init").integers(2**31)))
    widths = synthesis_block_widths(config)
    mapping = MappingNetwork(
        latent_dim=config["model.latent_dim"],
        block_widths=widths,
        hidden=config["model.mapping_width"],
        freq_scale=config["model.freq_scale"],
        freq_base=config["model.freq_base"],
        dtype=dtype,
    )
    synthesis = SynthesisNetwork(block_widths=widths, dtype=dtype)

    return GeneratorModel(
        field=field,
        schedule=schedule,
        volume=volume,
        mapping=mapping,
        synthesis=synthesis,
        sample_count=config["model.sample_count"],
        latent_dim=config["model.latent_dim"],
        camera_radius=radius,
    )
