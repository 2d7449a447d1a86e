"""Time-conditioned U-Net noise predictor, its training loop and gradient checks."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import NoiseSchedule, to_model_space, training_loss
from .errors import EmptyDataset, InvalidConfig, NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    image_height: int = 32
    image_width: int = 64

    def validate(self) -> "NetConfig":
        for name, value in asdict(self).items():
            if value < 1:
                raise InvalidConfig(f"{name} must be positive, got {value}")
        step = 2 ** self.depth
        if self.image_height % step or self.image_width % step:
            raise InvalidConfig(
                f"image {self.image_height}x{self.image_width} not divisible by 2^{self.depth}")
        if self.time_embed_dim % 2:
            raise InvalidConfig("time_embed_dim must be even")
        return self

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_height, self.image_width)

    def level_channels(self) -> list[int]:
        return [self.base_channels * min(2 ** i, 4) for i in range(self.depth)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-4
    seed: int = 0
    checkpoint_every: int = 10

    def validate(self) -> "TrainConfig":
        if min(self.epochs, self.batch_size, self.checkpoint_every) < 1:
            raise InvalidConfig("epochs, batch_size and checkpoint_every must be positive")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be nonnegative")
        return self


def group_count(channels: int, max_groups: int = 8) -> int:
    return max(g for g in range(1, max_groups + 1) if channels % g == 0)


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, ``(B,) -> (B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(group_count(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Small DDPM-style U-Net predicting the noise in ``x_t``.

    One residual block per resolution, group normalization, and a sinusoidal
    time embedding added inside every residual block.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config.validate()
        d = config.time_embed_dim
        chans = config.level_channels()
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        c_prev = chans[0]
        for c in chans:
            self.down_blocks.append(ResBlock(c_prev, c, d))
            self.downsamples.append(Downsample(c))
            c_prev = c
        self.mid = ResBlock(c_prev, c_prev, d)
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for c in reversed(chans):
            self.upsamples.append(Upsample(c_prev))
            self.up_blocks.append(ResBlock(c_prev + c, c, d))
            c_prev = c
        self.norm_out = nn.GroupNorm(group_count(c_prev), c_prev)
        self.conv_out = nn.Conv2d(c_prev, config.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim, x.dtype))
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


DenoiserNetwork = UNet


def fan_in_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for conv/linear layers.

    Normalization layers keep unit scale and zero shift.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = m.weight
                fan_in = w.shape[1] * int(np.prod(w.shape[2:]))
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * int(np.prod(w.shape[2:]))
                bound = 1.0 / math.sqrt(fan_in)
                w.copy_(torch.rand(w.shape, generator=generator) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=generator) * 2 * bound - bound)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_network(config: NetConfig, seed: int) -> UNet:
    net = UNet(config)
    fan_in_init_(net, torch.Generator().manual_seed(int(seed)))
    return net


def predict_noise(net: nn.Module, x_t: torch.Tensor, t) -> torch.Tensor:
    """Noise estimate for one ``(C, H, W)`` image or a ``(B, C, H, W)`` batch."""
    shape = net.config.image_shape
    batched = x_t.ndim == 4
    if tuple(x_t.shape[-3:]) != shape or x_t.ndim not in (3, 4):
        raise ShapeMismatch(f"expected {shape}, got {tuple(x_t.shape)}")
    xb = x_t if batched else x_t.unsqueeze(0)
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        tb = t.long()
    else:
        tb = torch.full((xb.shape[0],), int(t), dtype=torch.long)
    with torch.no_grad():
        out = net(xb, tb)
    return out if batched else out.squeeze(0)


def iterate_minibatches(n: int, batch_size: int, generator: torch.Generator) -> Iterable[torch.Tensor]:
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit(net: nn.Module, data: torch.Tensor, loss_fn: Callable, cfg: TrainConfig,
        on_epoch: Callable | None = None, optimizer: torch.optim.Optimizer | None = None,
        start_epoch: int = 0) -> tuple[nn.Module, list[float]]:
    """Shared Adam minibatch loop.

    ``loss_fn(net, batch, generator)`` returns a scalar loss tensor. Shuffling
    and any loss-internal sampling draw from one generator seeded by
    ``cfg.seed``, so runs are reproducible on a single thread.
    """
    cfg.validate()
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    gen = torch.Generator().manual_seed(int(cfg.seed))
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    trace = []
    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        total, count = 0.0, 0
        for idx in iterate_minibatches(len(data), cfg.batch_size, gen):
            loss = loss_fn(net, data[idx], gen)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss.item()} in epoch {epoch + 1}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            count += len(idx)
        trace.append(total / count)
        if not all(torch.isfinite(p).all() for p in net.parameters()):
            raise NonFiniteLoss(f"non-finite parameter after epoch {epoch + 1}")
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, net, optimizer, trace)
    net.eval()
    return net, trace


def train(net: UNet, data: torch.Tensor, schedule: NoiseSchedule, cfg: TrainConfig,
          on_epoch: Callable | None = None) -> tuple[UNet, list[float]]:
    """Train the denoiser on unit-interval images ``(N, C, H, W)``."""
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    if tuple(data.shape[1:]) != net.config.image_shape:
        raise ShapeMismatch(f"images {tuple(data.shape[1:])} != {net.config.image_shape}")
    x0 = to_model_space(data.to(torch.float32))

    def loss_fn(model, batch, gen):
        return training_loss(model, batch, schedule, gen)

    return fit(net, x0, loss_fn, cfg, on_epoch=on_epoch)


def check_directional_gradients(loss_fn: Callable[[], torch.Tensor],
                                params: Sequence[torch.Tensor], n_directions: int,
                                seed: int, step: float = 1e-4) -> float:
    """Worst relative error between autograd and central differences.

    ``loss_fn`` must be deterministic and depend on ``params`` (float64
    leaf tensors). Each direction is a random Gaussian perturbation of all
    parameters jointly, normalized to unit length. NaN propagates into the
    result rather than raising.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(int(seed))
    worst = 0.0
    for _ in range(n_directions):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(step * d)
            plus = float(loss_fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * step * d)
            minus = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(step * d)
        numeric = (plus - minus) / (2 * step)
        scale = max(abs(analytic), abs(numeric))
        err = 0.0 if scale == 0.0 else abs(analytic - numeric) / scale
        if math.isnan(err) or math.isnan(analytic) or math.isnan(numeric):
            return float("nan")
        worst = max(worst, err)
    return worst


def gradient_check(net: nn.Module, x0: torch.Tensor, schedule: NoiseSchedule,
                   n_directions: int, seed: int, step: float = 1e-4) -> float:
    """Check autograd of the training loss on a float64 copy of ``net``.

    ``x0`` holds unit-interval images, one ``(C, H, W)`` or a batch.
    """
    model = copy.deepcopy(net).double()
    batch = x0 if x0.ndim == 4 else x0.unsqueeze(0)
    batch = to_model_space(batch.to(torch.float64))

    def loss_fn():
        return training_loss(model, batch, schedule, seed)

    return check_directional_gradients(loss_fn, list(model.parameters()),
                                       n_directions, seed + 1, step)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
