"""Differentiable substrate: named parameter stores, Adam, gradient checking, seeded RNG.

All networks in the engine register their weights in a ParamStore under unique
names. Reverse-mode gradients are provided by torch; this module owns the
optimizer state, the finite-difference verification harness and the
purpose-tagged random streams that make every run a pure function of its seed.
"""

from __future__ import annotations

import zlib
from typing import Callable, Dict, Iterator, Tuple

import numpy as np
import torch


class NumericError(RuntimeError):
    """Non-finite value encountered in a numeric computation."""


class ContractError(ValueError):
    """Caller violated an interface contract (shape/argument mismatch)."""


class ParamStore:
    """Ordered collection of uniquely named parameter tensors plus Adam moments.

    Single-writer: the training loop owns the store during a step; rendering
    workers only ever read parameter values.
    """

    def __init__(self) -> None:
        self._params: Dict[str, torch.Tensor] = {}
        self.step_count = 0
        self.adam_m: Dict[str, torch.Tensor] = {}
        self.adam_v: Dict[str, torch.Tensor] = {}

    def register(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor.requires_grad_(True)
        self._params[name] = tensor
        self.adam_m[name] = torch.zeros_like(tensor, requires_grad=False)
        self.adam_v[name] = torch.zeros_like(tensor, requires_grad=False)
        return tensor

    def register_module(self, prefix: str, module: torch.nn.Module) -> None:
        for pname, p in module.named_parameters():
            self.register(f"{prefix}.{pname}", p)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    def num_entries(self) -> int:
        return sum(p.numel() for p in self._params.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.0,
    beta2: float = 0.9,
    eps: float = 1e-8,
) -> ParamStore:
    """One Adam step with bias correction over every tensor in the store.

    Missing grads count as zero. Gradients are left untouched; callers zero
    them (this is what makes micro-batch gradient accumulation work).
    """
    for name, p in store.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in tensor '{name}'")

    t = store.step_count + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = store.adam_m[name]
            v = store.adam_v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.addcdiv_(m_hat, v_hat.sqrt() + eps, value=-lr)
    store.step_count = t
    return store


def grad_check(
    fn: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    epsilon: float = 1e-3,
    sample_count: int = 32,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Samples ``sample_count`` random parameter entries and returns the maximum
    relative error, with the denominator guarded by max(|a|, |n|, 1e-6).
    """
    store.zero_grad()
    out = fn(store)
    if not torch.isfinite(out).all():
        raise NumericError("fn returned a non-finite value")
    out.backward()

    rng = np.random.default_rng(seed)
    names = store.names()
    entry_counts = np.array([store[n].numel() for n in names])
    total = int(entry_counts.sum())
    picks = rng.choice(total, size=min(sample_count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(entry_counts)])

    max_rel = 0.0
    for flat_idx in picks:
        ti = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[ti])
        p = store[names[ti]]
        analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[local])
        with torch.no_grad():
            orig = float(p.view(-1)[local])
            p.view(-1)[local] = orig + epsilon
        f_plus = float(fn(store).detach())
        with torch.no_grad():
            p.view(-1)[local] = orig - epsilon
        f_minus = float(fn(store).detach())
        with torch.no_grad():
            p.view(-1)[local] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("fn returned a non-finite value during probing")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel


class SeededSampler:
    """Deterministic random streams derived from one seed by purpose tags.

    Streams for distinct purposes ("latent", "pose", "init", ...) are
    independent; the same (seed, purpose) always reproduces the same draws.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)

    def stream(self, purpose: str) -> np.random.Generator:
        tag = zlib.crc32(purpose.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.seed, tag]))

    def normal(self, purpose: str, size) -> np.ndarray:
        return self.stream(purpose).standard_normal(size)

    def uniform(self, purpose: str, size) -> np.ndarray:
        return self.stream(purpose).random(size)


def latent_from_seed(seed: int, dim: int) -> np.ndarray:
    """Portable seed -> latent mapping used by CLI and service alike."""
    return SeededSampler(seed).normal("latent", dim)
