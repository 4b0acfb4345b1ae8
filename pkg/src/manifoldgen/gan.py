"""Adversarial training: discriminator with pose branch, losses, train loop.

The loss is the non-saturating GAN objective with softplus f:
    loss_D = E[f(D(fake))] + E[f(-D(real))] + r1_weight * E[||grad_I D(real)||^2]
    loss_G = E[f(-D(fake))]
plus an optional pose term that makes a discriminator branch regress the
camera pose of both generated and labeled real images.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EngineConfig
from .data import BatchSampler, DatasetManifest, ImageAccessor
from .diffcore import ContractError, NumericError, ParamStore, SeededSampler, adam_step
from .model import GeneratorModel, build_generator
from .render import CameraPose, DEFAULT_BACKGROUND, ray_bundle, render_rays


class TrainingAborted(RuntimeError):
    """Numeric failure during training; the last checkpoint stays on disk."""


class ResBlockDown(nn.Module):
    """Strided residual block: two 3x3 convs + 1x1 skip, leaky slope 0.2."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=2, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return (h + self.skip(x)) / math.sqrt(2.0)


class Discriminator(nn.Module):
    """Residual CNN trunk with a realness scalar and a 3-vector pose head."""

    def __init__(self, resolution: int = 32, base_width: int = 32,
                 max_width: int = 256, dtype: torch.dtype = torch.float32):
        super().__init__()
        if resolution < 16 or resolution & (resolution - 1):
            raise ContractError("resolution must be a power of two >= 16")
        stages = int(math.log2(resolution)) - 1  # downsample to 2x2
        self.stem = nn.Conv2d(3, base_width, 3, padding=1)
        blocks = []
        c = base_width
        for _ in range(stages):
            c_next = min(2 * c, max_width)
            blocks.append(ResBlockDown(c, c_next))
            c = c_next
        self.blocks = nn.ModuleList(blocks)
        feat_dim = c * 4
        self.head_real = nn.Linear(feat_dim, 1)
        self.head_pose = nn.Linear(feat_dim, 3)
        self.to(dtype)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.stem(images), 0.2)
        for block in self.blocks:
            h = block(h)
        return h.flatten(1)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """images (B, 3, H, W) -> (realness (B,), pose (B, 3))."""
        feat = self.features(images)
        return self.head_real(feat).squeeze(-1), self.head_pose(feat)


def r1_penalty(disc: Discriminator, real: torch.Tensor) -> torch.Tensor:
    """E over the batch of the squared input-gradient norm of the realness score."""
    real = real.detach().requires_grad_(True)
    score, _ = disc(real)
    (grad,) = torch.autograd.grad(score.sum(), real, create_graph=True)
    return grad.pow(2).flatten(1).sum(dim=1).mean()


def adversarial_losses(disc: Discriminator, fake: torch.Tensor,
                       real: torch.Tensor, r1_weight: float) -> tuple[torch.Tensor, torch.Tensor]:
    """The two sides of the non-saturating objective, R1 included in loss_D."""
    if fake.shape[0] == 0 or real.shape[0] == 0:
        raise ContractError("batches must be non-empty")
    if fake.shape[-2:] != real.shape[-2:]:
        raise ContractError("fake/real resolution mismatch")
    score_fake, _ = disc(fake.detach())
    score_real, _ = disc(real)
    loss_d = F.softplus(score_fake).mean() + F.softplus(-score_real).mean()
    if r1_weight != 0.0:
        loss_d = loss_d + r1_weight * r1_penalty(disc, real)
    score_fake_g, _ = disc(fake)
    loss_g = F.softplus(-score_fake_g).mean()
    if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
        raise NumericError("non-finite adversarial loss")
    return loss_d, loss_g


def pose_regularization(pred_fake: torch.Tensor, theta_fake: torch.Tensor,
                        pred_real: Optional[torch.Tensor] = None,
                        theta_real: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared pose error over the fake branch and, when labeled, the real branch."""
    loss = (pred_fake - theta_fake).pow(2).sum(dim=1).mean()
    if pred_real is not None and theta_real is not None:
        loss = loss + (pred_real - theta_real).pow(2).sum(dim=1).mean()
    return loss


@dataclass
class PoseDistribution:
    kind: str = "gaussian_frontal"
    yaw_std: float = 0.3
    pitch_std: float = 0.15
    radius: float = 2.0

    def __post_init__(self):
        if self.kind == "gaussian_frontal" and (self.yaw_std <= 0 or self.pitch_std <= 0):
            raise ContractError("gaussian pose distribution needs positive sigmas")


def sample_pose(dist: PoseDistribution, rng: np.random.Generator) -> CameraPose:
    if dist.kind == "gaussian_frontal":
        yaw = rng.normal(0.0, dist.yaw_std)
        pitch = float(np.clip(rng.normal(0.0, dist.pitch_std), -1.45, 1.45))
    elif dist.kind == "uniform_hemisphere":
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        pitch = rng.uniform(0.0, np.pi / 2 * 0.999)
    else:
        raise ContractError(f"unknown pose distribution kind: {dist.kind}")
    return CameraPose(yaw=float(yaw), pitch=float(pitch), radius=dist.radius)


def render_fake_image(gen: GeneratorModel, z: np.ndarray, pose: CameraPose,
                      resolution: int, fov: float) -> torch.Tensor:
    """Differentiable (3, H, W) image for one latent/pose pair."""
    intr = gen.intrinsics(fov, resolution)
    cond = gen.cond(z)
    o, d, lo, hi = ray_bundle(gen, pose, intr)
    colors = render_rays(gen, cond, o, d, lo, hi, DEFAULT_BACKGROUND)
    return colors.reshape(resolution, resolution, 3).permute(2, 0, 1)


def render_fake_batch(gen: GeneratorModel, zs: list, poses: list,
                      resolution: int, fov: float) -> torch.Tensor:
    """Differentiable (B, 3, H, W) batch rendered in one ray pass.

    All images share one intersection/radiance evaluation; per-image styles
    are expanded to one conditioning row per ray.
    """
    from .radiance import FiLMConditioning

    intr = gen.intrinsics(fov, resolution)
    n_pix = resolution * resolution
    dtype = next(gen.mapping.parameters()).dtype
    z_batch = torch.as_tensor(np.stack(zs), dtype=dtype)
    cond = gen.mapping(z_batch)
    cond_rays = FiLMConditioning(
        gammas=[g.repeat_interleave(n_pix, dim=0) for g in cond.gammas],
        betas=[b.repeat_interleave(n_pix, dim=0) for b in cond.betas])

    bundles = [ray_bundle(gen, pose, intr) for pose in poses]
    o = torch.cat([b[0] for b in bundles])
    d = torch.cat([b[1] for b in bundles])
    lo = torch.cat([b[2] for b in bundles])
    hi = torch.cat([b[3] for b in bundles])
    colors = render_rays(gen, cond_rays, o, d, lo, hi, DEFAULT_BACKGROUND)
    return colors.reshape(len(zs), resolution, resolution, 3).permute(0, 3, 1, 2)


@dataclass
class TrainState:
    gen: GeneratorModel
    disc: Discriminator
    g_store: ParamStore
    d_store: ParamStore
    iteration: int = 0
    metrics: list = field(default_factory=list)


def latent_variance_probe(gen: GeneratorModel, resolution: int, fov: float,
                          count: int = 16, seed: int = 7777) -> float:
    """Mean per-pixel variance of frontal renders across `count` latents."""
    from .render import render_image

    rng = SeededSampler(seed).stream("variance_probe")
    imgs = []
    pose = gen.default_pose()
    intr = gen.intrinsics(fov, resolution)
    for _ in range(count):
        z = rng.standard_normal(gen.latent_dim)
        imgs.append(render_image(gen, z, pose, intr))
    return float(np.var(np.stack(imgs), axis=0).mean())


def pose_error_probe(gen: GeneratorModel, disc: Discriminator, resolution: int,
                     fov: float, dist: PoseDistribution, count: int = 16,
                     seed: int = 8888) -> float:
    """Mean pose-prediction error of D_p on held-out generated images."""
    from .render import render_image

    rng = SeededSampler(seed).stream("pose_probe")
    errs = []
    intr = gen.intrinsics(fov, resolution)
    with torch.no_grad():
        for _ in range(count):
            z = rng.standard_normal(gen.latent_dim)
            pose = sample_pose(dist, rng)
            img = render_image(gen, z, pose, intr)
            t = torch.as_tensor(img).permute(2, 0, 1)[None]
            _, pred = disc(t)
            errs.append(float(np.linalg.norm(
                pred[0].numpy() - pose.as_vector())))
    return float(np.mean(errs))


def train(
    manifest: DatasetManifest,
    accessor: ImageAccessor,
    config: EngineConfig,
    out_dir: str,
    callbacks: Optional[list[Callable]] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Alternating single-D-step / single-G-step adversarial training.

    Deterministic given the config seed (with a fixed thread count): every
    per-iteration random draw comes from a purpose-and-iteration tagged
    stream. Writes `metrics.csv` (one line per iteration), `probe.csv` and
    periodic checkpoints `ckpt_XXXXXX.grmc` into out_dir.
    """
    from . import checkpoint as ckpt_mod

    os.makedirs(out_dir, exist_ok=True)
    callbacks = callbacks or []
    seed = config["seed"]
    resolution = config["dataset.resolution"]
    fov = config.fov
    r1_weight = config["train.r1_weight"]
    pose_weight = config["train.pose_weight"] if config["train.pose_regularization"] else 0.0
    batch_size = config["train.batch_size"]
    aggregation = config["train.aggregation"]
    micro = max(1, batch_size // aggregation)
    interval = config["train.checkpoint_interval"]
    dist = PoseDistribution(kind=config["pose.kind"],
                            yaw_std=config["pose.yaw_std"],
                            pitch_std=config["pose.pitch_std"],
                            radius=config["camera.radius"])

    resumed = state is not None
    if state is None:
        gen = build_generator(config)
        torch.manual_seed(int(SeededSampler(seed).stream("disc_init").integers(2**31)))
        disc = Discriminator(resolution=resolution,
                             base_width=config["disc.base_width"],
                             max_width=config["disc.max_width"])
        g_store = gen.param_store()
        d_store = ParamStore()
        d_store.register_module("disc", disc)
        state = TrainState(gen=gen, disc=disc, g_store=g_store, d_store=d_store)

    gen, disc = state.gen, state.disc
    sampler = SeededSampler(seed)
    batcher = BatchSampler(manifest, accessor, batch_size,
                           sampler.stream("data_order"))

    metrics_path = os.path.join(out_dir, "metrics.csv")
    probe_path = os.path.join(out_dir, "probe.csv")
    mode = "a" if resumed else "w"
    metrics_f = open(metrics_path, mode, encoding="utf-8")
    probe_f = open(probe_path, mode, encoding="utf-8")

    def write_checkpoint(it: int) -> str:
        path = os.path.join(out_dir, f"ckpt_{it:06d}.grmc")
        ckpt_mod.save_checkpoint(path, config, state, iteration=it)
        return path

    def run_probes(it: int) -> None:
        var = latent_variance_probe(gen, resolution, fov)
        perr = pose_error_probe(gen, disc, resolution, fov, dist)
        probe_f.write(f"{it},{var:.8g},{perr:.8g}\n")
        probe_f.flush()

    last_ckpt = write_checkpoint(state.iteration)
    if state.iteration == 0:
        run_probes(0)

    adam_kw = dict(beta1=config["train.adam_beta1"],
                   beta2=config["train.adam_beta2"],
                   eps=config["train.adam_eps"])
    total = config["train.iterations"]
    try:
        while state.iteration < total:
            it = state.iteration + 1
            t_start = time.perf_counter()
            lat_rng = sampler.stream(f"iter{it}:latent")
            pose_rng = sampler.stream(f"iter{it}:pose")

            zs = [lat_rng.standard_normal(gen.latent_dim) for _ in range(batch_size)]
            poses = [sample_pose(dist, pose_rng) for _ in range(batch_size)]
            theta_fake = torch.as_tensor(
                np.stack([p.as_vector() for p in poses]), dtype=torch.float32)

            real_np, real_labels = batcher.next_batch()
            real = torch.as_tensor(real_np, dtype=torch.float32).permute(0, 3, 1, 2)
            labeled = [i for i, lbl in enumerate(real_labels) if lbl is not None]
            theta_real = None
            if labeled:
                theta_real = torch.as_tensor(
                    np.stack([real_labels[i] for i in labeled]), dtype=torch.float32)

            # --- discriminator step ---
            with torch.no_grad():
                fake = render_fake_batch(gen, zs, poses, resolution, fov)
            state.d_store.zero_grad()
            score_fake, pose_fake_pred = disc(fake)
            score_real, pose_real_pred = disc(real)
            r1 = r1_penalty(disc, real) if r1_weight != 0.0 else torch.tensor(0.0)
            loss_d = F.softplus(score_fake).mean() + F.softplus(-score_real).mean() \
                + r1_weight * r1
            loss_pose_d = torch.tensor(0.0)
            if pose_weight != 0.0:
                loss_pose_d = pose_regularization(
                    pose_fake_pred, theta_fake,
                    pose_real_pred[labeled] if labeled else None, theta_real)
                loss_d = loss_d + pose_weight * loss_pose_d
            if not torch.isfinite(loss_d):
                raise NumericError(f"non-finite discriminator loss at iteration {it}")
            loss_d.backward()
            adam_step(state.d_store, config["train.lr_discriminator"], **adam_kw)

            # --- generator step (micro-batched gradient accumulation) ---
            state.g_store.zero_grad()
            loss_g_total = 0.0
            loss_pose_g_total = 0.0
            for start in range(0, batch_size, micro):
                idx = range(start, min(start + micro, batch_size))
                fake_chunk = render_fake_batch(
                    gen, [zs[b] for b in idx], [poses[b] for b in idx],
                    resolution, fov)
                score, pose_pred = disc(fake_chunk)
                frac = len(list(idx)) / batch_size
                loss_g = F.softplus(-score).mean() * frac
                if pose_weight != 0.0:
                    lp = pose_regularization(pose_pred, theta_fake[list(idx)]) * frac
                    loss_g = loss_g + pose_weight * lp
                    loss_pose_g_total += float(lp.detach())
                if not torch.isfinite(loss_g):
                    raise NumericError(f"non-finite generator loss at iteration {it}")
                loss_g.backward()
                loss_g_total += float(loss_g.detach())
            adam_step(state.g_store, config["train.lr_generator"], **adam_kw)

            state.iteration = it
            wallclock_ms = (time.perf_counter() - t_start) * 1000.0
            line = (f"{it}, {float(loss_d.detach()):.6g}, {loss_g_total:.6g}, "
                    f"{float(loss_pose_d.detach()) + loss_pose_g_total:.6g}, "
                    f"{float(r1.detach()):.6g}, {wallclock_ms:.1f}")
            metrics_f.write(line + "\n")
            metrics_f.flush()
            state.metrics.append(line)

            if it % interval == 0 or it == total:
                last_ckpt = write_checkpoint(it)
                run_probes(it)
            for cb in callbacks:
                cb(state)
    except NumericError as e:
        metrics_f.close()
        probe_f.close()
        raise TrainingAborted(f"{e}; last good checkpoint: {last_ckpt}")
    metrics_f.close()
    probe_f.close()
    return state
