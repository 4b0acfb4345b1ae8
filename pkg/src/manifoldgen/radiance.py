"""Radiance generator: mapping network -> FiLM conditioning -> SIREN synthesis.

The synthesis network is a stack of FiLM-modulated sinusoidal blocks consuming
raw 3D coordinates (no positional encoding); the last block additionally
ingests the view direction. Every block owns an affine output head; head
outputs are summed before squashing, so different blocks contribute different
levels of detail to the final color/occupancy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .diffcore import ContractError, NumericError


@dataclass
class FiLMConditioning:
    """Per-block sinusoid frequencies (gamma) and phase shifts (beta)."""

    gammas: list[torch.Tensor]
    betas: list[torch.Tensor]

    @property
    def block_count(self) -> int:
        return len(self.gammas)

    def widths(self) -> list[int]:
        return [g.shape[-1] for g in self.gammas]


@dataclass
class RadianceSample:
    """Color in [-1, 1]^3 and occupancy in [0, 1] for one manifold point."""

    color: tuple
    occupancy: float


class MappingNetwork(nn.Module):
    """z -> concatenated per-block (frequency, phase) vectors.

    Three leaky-ReLU hidden layers; raw frequency outputs are affinely shifted
    (freq_scale * raw + freq_base) so initial frequencies are moderate.
    """

    def __init__(self, latent_dim: int, block_widths: Sequence[int],
                 hidden: int = 256, freq_scale: float = 15.0,
                 freq_base: float = 30.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.latent_dim = latent_dim
        self.block_widths = list(block_widths)
        self.freq_scale = freq_scale
        self.freq_base = freq_base
        out_dim = 2 * sum(block_widths)
        dims = [latent_dim, hidden, hidden, hidden, out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(4)
        )
        self.act = nn.LeakyReLU(0.2)
        with torch.no_grad():
            # Small final layer keeps initial conditioning near (freq_base, 0).
            self.layers[-1].weight.mul_(0.25)
            self.layers[-1].bias.zero_()
        self.to(dtype)

    def forward(self, z: torch.Tensor) -> FiLMConditioning:
        if z.shape[-1] != self.latent_dim:
            raise ContractError(
                f"latent dim mismatch: got {z.shape[-1]}, want {self.latent_dim}")
        h = z
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
        out = self.layers[-1](h)
        gammas, betas = [], []
        off = 0
        for w in self.block_widths:
            raw_freq = out[..., off:off + w]
            phase = out[..., off + w:off + 2 * w]
            gammas.append(self.freq_scale * raw_freq + self.freq_base)
            betas.append(phase)
            off += 2 * w
        return FiLMConditioning(gammas=gammas, betas=betas)


def map_latent(mapping: MappingNetwork, z) -> FiLMConditioning:
    z = torch.as_tensor(z, dtype=next(mapping.parameters()).dtype)
    return mapping(z)


class SynthesisNetwork(nn.Module):
    """FiLM SIREN block stack with summed skip output heads.

    block_widths gives the width of every block; the final block consumes the
    previous features concatenated with the 3-vector view direction.
    """

    def __init__(self, block_widths: Sequence[int], omega_hidden: float = 25.0,
                 first_layer_bound: float = 1.0 / 3.0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        widths = list(block_widths)
        if len(widths) < 2:
            raise ContractError("need at least two synthesis blocks")
        self.block_widths = widths
        self.linears = nn.ModuleList()
        self.heads = nn.ModuleList()
        in_dim = 3
        for b, w in enumerate(widths):
            if b == len(widths) - 1:
                in_dim = in_dim + 3  # view direction enters the last block
            lin = nn.Linear(in_dim, w)
            with torch.no_grad():
                if b == 0:
                    bound = first_layer_bound
                else:
                    bound = math.sqrt(6.0 / in_dim) / omega_hidden
                lin.weight.uniform_(-bound, bound)
                lin.bias.uniform_(-bound, bound)
            self.linears.append(lin)
            head = nn.Linear(w, 4)
            with torch.no_grad():
                hb = math.sqrt(6.0 / w) / omega_hidden
                head.weight.uniform_(-hb, hb)
                head.bias.zero_()
            self.heads.append(head)
            in_dim = w
        self.to(dtype)

    @property
    def block_count(self) -> int:
        return len(self.block_widths)

    def forward(self, points: torch.Tensor, view_dir: torch.Tensor,
                cond: FiLMConditioning) -> tuple[torch.Tensor, torch.Tensor]:
        """points (P, 3), view_dir (3,) or (P, 3) -> colors (P, 3), alphas (P,)."""
        if cond.block_count != self.block_count:
            raise ContractError("conditioning block count mismatch")
        for g, w in zip(cond.widths(), self.block_widths):
            if g != w:
                raise ContractError("conditioning width mismatch")
        if view_dir.dim() == 1:
            view = view_dir[None, :].expand(points.shape[0], 3)
        else:
            view = view_dir
        h = points
        head_sum = points.new_zeros((points.shape[0], 4))
        for b, (lin, head) in enumerate(zip(self.linears, self.heads)):
            if b == self.block_count - 1:
                h = torch.cat([h, view], dim=-1)
            gamma = cond.gammas[b]
            beta = cond.betas[b]
            if gamma.dim() == 1:
                gamma = gamma[None, :]
                beta = beta[None, :]
            h = torch.sin(gamma * lin(h) + beta)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activation in synthesis block {b}")
            head_sum = head_sum + head(h)
        colors = torch.tanh(head_sum[:, :3])
        alphas = torch.sigmoid(head_sum[:, 3])
        return colors, alphas


def eval_radiance(synth: SynthesisNetwork, cond: FiLMConditioning,
                  points, view_dir) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = next(synth.parameters()).dtype
    pts = torch.as_tensor(points, dtype=dtype)
    vd = torch.as_tensor(view_dir, dtype=dtype)
    norm = torch.linalg.norm(vd, dim=-1)
    if not torch.allclose(norm, torch.ones_like(norm), atol=1e-5):
        raise ContractError("view direction must be unit length")
    if pts.numel() == 0:
        return pts.new_zeros((0, 3)), pts.new_zeros((0,))
    return synth(pts, vd, cond)


def mix_conditioning(cond_a: FiLMConditioning, cond_b: FiLMConditioning,
                     split_block: int) -> FiLMConditioning:
    """Blocks below split_block take style a, the rest style b."""
    if cond_a.block_count != cond_b.block_count:
        raise ContractError("conditioning block counts differ")
    if cond_a.widths() != cond_b.widths():
        raise ContractError("conditioning widths differ")
    if not 0 <= split_block <= cond_a.block_count:
        raise ContractError("split_block out of range")
    gammas = [
        (cond_a if b < split_block else cond_b).gammas[b]
        for b in range(cond_a.block_count)
    ]
    betas = [
        (cond_a if b < split_block else cond_b).betas[b]
        for b in range(cond_a.block_count)
    ]
    return FiLMConditioning(gammas=gammas, betas=betas)


def default_block_widths(width: int = 256, blocks: int = 8) -> list[int]:
    """The standard stack: `blocks` equal-width blocks plus a view block of width+3."""
    return [width] * blocks + [width + 3]
