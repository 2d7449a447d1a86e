"""Gaussian diffusion: noise schedules, forward noising, reverse denoising,
ancestral sampling, the epsilon-prediction objective and truncated restoration.

Conventions
-----------
* Timesteps are 1-indexed, ``1 <= t <= T``; ``alpha_bar(0) == 1`` means "clean".
* The math operates in *model space* (images mapped from ``[0, 1]`` to
  ``[-1, 1]``). :func:`restore` is the only entry point that takes and returns
  unit-interval images; it applies the affine map on the way in and out.
* Every sampling routine is a pure function of its inputs and seed(s).
  Batched calls take one seed per sample so a sample's noise stream does not
  depend on which batch it was scored in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import torch

from .errors import EmptyBatch, InvalidSchedule, InvalidTimestep, ShapeMismatch

Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule ``beta_1..beta_T`` and its running products.

    Only ``(T, beta_start, beta_end)`` are persisted; the arrays are always
    recomputed from them.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False, compare=False)
    alphas_bar: np.ndarray = field(repr=False, compare=False)
    family: str = "linear"

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alphas_bar[t - 1])

    def descriptor(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "family": self.family}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "NoiseSchedule":
        if desc.get("family", "linear") != "linear":
            raise InvalidSchedule(f"unknown schedule family {desc.get('family')!r}")
        return make_linear_schedule(int(desc["T"]), float(desc["beta_start"]),
                                    float(desc["beta_end"]))


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alphas_bar.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas_bar)


def default_schedule(T: int = 100) -> NoiseSchedule:
    """The reference ``[1e-4, 0.02]`` range over 1000 steps, rescaled to ``T`` steps."""
    scale = 1000.0 / T
    return make_linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def default_truncation(T: int) -> int:
    return max(1, math.ceil(T / 4))


def to_model_space(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def _check_t(t: int, schedule: NoiseSchedule, low: int = 1) -> None:
    if not (low <= int(t) <= schedule.T):
        raise InvalidTimestep(f"timestep {t} outside [{low}, {schedule.T}]")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "noise") -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} shape {tuple(b.shape)} != {tuple(a.shape)}")


def forward_step(x_prev: torch.Tensor, t: int, noise: torch.Tensor,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """One Markov noising step ``x_{t-1} -> x_t``."""
    _check_t(t, schedule)
    _check_same_shape(x_prev, noise)
    beta = schedule.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def forward_marginal(x0: torch.Tensor, t, noise: torch.Tensor,
                     schedule: NoiseSchedule) -> torch.Tensor:
    """Jump straight from ``x_0`` to ``x_t``.

    ``t`` is an int (``0`` returns ``x0``), or a 1-D integer tensor with one
    timestep per leading-axis element of a batch.
    """
    _check_same_shape(x0, noise)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != x0.shape[0]:
            raise ShapeMismatch("need one timestep per batch element")
        if int(t.min()) < 0 or int(t.max()) > schedule.T:
            raise InvalidTimestep(f"timesteps outside [0, {schedule.T}]")
        table = torch.from_numpy(np.concatenate([[1.0], schedule.alphas_bar]))
        ab = table[t.long()].to(x0.dtype).view(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise
    _check_t(t, schedule, low=0)
    ab = schedule.alpha_bar(int(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def _predict(net, x: torch.Tensor, t: int) -> torch.Tensor:
    batched = x.ndim == 4
    xb = x if batched else x.unsqueeze(0)
    tb = torch.full((xb.shape[0],), int(t), dtype=torch.long)
    eps = net(xb, tb)
    _check_same_shape(xb, eps, what="network output")
    return eps if batched else eps.squeeze(0)


def reverse_step(net, x_t: torch.Tensor, t: int, schedule: NoiseSchedule,
                 noise: torch.Tensor | None) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}`` with ``sigma_t^2 = beta_t``.

    ``net`` is called as ``net(x_batch, t_batch)`` and must return its noise
    estimate. ``noise`` is ignored at ``t == 1``.
    """
    _check_t(t, schedule)
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    with torch.no_grad():
        eps = _predict(net, x_t, t)
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if noise is None:
        raise ShapeMismatch("noise is required for t > 1")
    _check_same_shape(x_t, noise)
    return mean + math.sqrt(beta) * noise


class NoiseStream:
    """Per-sample seeded Gaussian draws, stacked into a batch when needed."""

    def __init__(self, seed: Seed, shape: Sequence[int], dtype=torch.float32):
        self.batched = not isinstance(seed, (int, np.integer))
        seeds = list(seed) if self.batched else [int(seed)]
        self.generators = [torch.Generator().manual_seed(int(s)) for s in seeds]
        self.shape = tuple(shape[1:] if self.batched else shape)
        self.dtype = dtype
        if self.batched and len(seeds) != shape[0]:
            raise ShapeMismatch(f"{len(seeds)} seeds for batch of {shape[0]}")

    def draw(self) -> torch.Tensor:
        parts = [torch.randn(self.shape, generator=g, dtype=self.dtype)
                 for g in self.generators]
        return torch.stack(parts) if self.batched else parts[0]


def denoise_from(net, x_t: torch.Tensor, t_start: int, schedule: NoiseSchedule,
                 draw: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Run reverse steps ``t_start..1``; ``draw`` supplies noise for every ``t > 1``."""
    x = x_t
    for t in range(t_start, 0, -1):
        x = reverse_step(net, x, t, schedule, draw() if t > 1 else None)
    return x


def ancestral_sample(net, shape: Sequence[int], schedule: NoiseSchedule,
                     rng_seed: Seed, dtype=torch.float32) -> torch.Tensor:
    """Draw ``x_T ~ N(0, I)`` and denoise all the way to ``x_0`` (model space)."""
    stream = NoiseStream(rng_seed, shape, dtype)
    x_T = stream.draw()
    return denoise_from(net, x_T, schedule.T, schedule, stream.draw)


def restore(net, y0: torch.Tensor, n_steps: int, schedule: NoiseSchedule,
            rng_seed: Seed) -> torch.Tensor:
    """Truncated-diffusion restoration of a unit-interval image.

    ``y0`` is noised to step ``n_steps`` through the closed-form marginal and
    then denoised back to step 0. Accepts a single ``(C, H, W)`` image with an
    int seed or a ``(B, C, H, W)`` batch with one seed per image.
    """
    if not (1 <= n_steps < schedule.T):
        raise InvalidTimestep(f"truncation step {n_steps} outside [1, {schedule.T})")
    stream = NoiseStream(rng_seed, y0.shape, y0.dtype)
    x0 = to_model_space(y0)
    x_n = forward_marginal(x0, n_steps, stream.draw(), schedule)
    out = denoise_from(net, x_n, n_steps, schedule, stream.draw)
    return from_model_space(out).clamp(0.0, 1.0)


def training_loss(net, x0_batch: torch.Tensor, schedule: NoiseSchedule,
                  rng_seed: int | torch.Generator) -> torch.Tensor:
    """Simple epsilon-prediction objective on a model-space batch.

    Draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per element; returns the mean
    squared error between ``eps`` and the network's estimate. Differentiable
    with respect to the network parameters.
    """
    if x0_batch.ndim != 4 or x0_batch.shape[0] == 0:
        raise EmptyBatch("training_loss needs a nonempty (B, C, H, W) batch")
    gen = rng_seed if isinstance(rng_seed, torch.Generator) \
        else torch.Generator().manual_seed(int(rng_seed))
    b = x0_batch.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(x0_batch.shape, generator=gen, dtype=x0_batch.dtype)
    x_t = forward_marginal(x0_batch, t, eps, schedule)
    return ((eps - net(x_t, t)) ** 2).mean()
