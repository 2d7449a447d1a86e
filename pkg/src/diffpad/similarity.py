"""Image distances used to score reconstructions: MSE, SSIM and an LPIPS-style
deep-feature distance over a small convolutional feature extractor.

All metrics compute in float64 and accept either single ``(C, H, W)`` images
(returning a Python float) or ``(B, C, H, W)`` batches via the ``*_batch``
variants (returning a float64 tensor of per-pair values).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .errors import BadCheckpoint, ConfigError, ImageTooSmall, ShapeMismatch


def _pair(a: torch.Tensor, b: torch.Tensor, batched: bool) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    want = 4 if batched else 3
    if a.ndim != want:
        raise ShapeMismatch(f"expected a {want}-D tensor, got {a.ndim}-D")
    if not batched:
        a, b = a[None], b[None]
    return a.to(torch.float64), b.to(torch.float64)


def mse_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = _pair(a, b, True)
    return ((a - b) ** 2).flatten(1).mean(dim=1)


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = _pair(a, b, False)
    return float(((a - b) ** 2).mean())


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 7
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def validate(self) -> "SsimParams":
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ConfigError("window_size must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0 or self.window_sigma <= 0 or self.dynamic_range <= 0:
            raise ConfigError("SSIM constants must be positive")
        return self


def gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_batch(a: torch.Tensor, b: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    p.validate()
    a, b = _pair(a, b, True)
    _, c, h, w = a.shape
    if h < p.window_size or w < p.window_size:
        raise ImageTooSmall(f"{h}x{w} image smaller than window {p.window_size}")
    win = gaussian_window(p.window_size, p.window_sigma).expand(c, 1, -1, -1)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    c1 = (p.k1 * p.dynamic_range) ** 2
    c2 = (p.k2 * p.dynamic_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(dim=1)


def ssim(a: torch.Tensor, b: torch.Tensor, p: SsimParams = SsimParams()) -> float:
    a, b = _pair(a, b, False)
    return float(ssim_batch(a, b, p)[0])


@dataclass(frozen=True)
class ConvStage:
    weight: torch.Tensor
    bias: torch.Tensor
    stride: int

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen stack of ``conv -> ReLU`` stages; activations of ``taps`` are compared.

    ``tap_scales`` multiplies tap activations before normalization and exists
    only to test scale invariance.
    """

    stages: tuple[ConvStage, ...]
    taps: tuple[int, ...] = (0, 1, 2)
    layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    tap_scales: tuple[float, ...] | None = None
    kind: str = "fixed_random"

    def __post_init__(self):
        if not self.taps:
            raise ConfigError("feature extractor needs at least one tap")
        if len(self.layer_weights) != len(self.taps):
            raise ConfigError("one layer weight per tap required")
        if any(w < 0 for w in self.layer_weights):
            raise ConfigError("layer weights must be nonnegative")
        if max(self.taps) >= len(self.stages) or min(self.taps) < 0:
            raise ConfigError("tap index out of range")
        for s in self.stages:
            s.weight.requires_grad_(False)
            s.bias.requires_grad_(False)

    @property
    def in_channels(self) -> int:
        return self.stages[0].weight.shape[1]

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Tap activations for a ``(B, C, H, W)`` batch of unit-interval images."""
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"extractor expects (B, {self.in_channels}, H, W), got {tuple(images.shape)}")
        h = images.to(torch.float64) * 2.0 - 1.0
        out = []
        for i, stage in enumerate(self.stages):
            pad = stage.weight.shape[-1] // 2
            h = F.relu(F.conv2d(h, stage.weight, stage.bias, stride=stage.stride, padding=pad))
            if i in self.taps:
                out.append(h)
        if self.tap_scales is not None:
            out = [f * s for f, s in zip(out, self.tap_scales)]
        return out

    def with_tap_scales(self, scales: Sequence[float]) -> "FeatureExtractor":
        return replace(self, tap_scales=tuple(float(s) for s in scales))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, s in enumerate(self.stages):
            out[f"stage{i}.weight"] = s.weight.numpy()
            out[f"stage{i}.bias"] = s.bias.numpy()
        return out

    def descriptor(self) -> dict:
        return {"strides": [s.stride for s in self.stages], "taps": list(self.taps),
                "layer_weights": list(self.layer_weights)}


def fixed_random_extractor(seed: int = 7, in_channels: int = 1,
                           filters: Sequence[int] = (16, 32, 64),
                           strides: Sequence[int] = (1, 2, 2), kernel: int = 3) -> FeatureExtractor:
    """Randomly initialized (He-normal, seeded) conv stack; never trained.

    Weights are drawn in float32 so checkpoints reproduce them exactly.
    """
    gen = torch.Generator().manual_seed(int(seed))
    stages, c_in = [], in_channels
    for c_out, stride in zip(filters, strides):
        fan_in = c_in * kernel * kernel
        w = torch.randn((c_out, c_in, kernel, kernel), generator=gen)
        w = (w * math.sqrt(2.0 / fan_in)).to(torch.float64)
        stages.append(ConvStage(w, torch.zeros(c_out, dtype=torch.float64), int(stride)))
        c_in = c_out
    n = len(stages)
    return FeatureExtractor(tuple(stages), tuple(range(n)), (1.0,) * n)


def extractor_from_arrays(arrays: dict[str, np.ndarray], desc: dict,
                          kind: str = "trained") -> FeatureExtractor:
    try:
        stages = tuple(
            ConvStage(torch.from_numpy(np.array(arrays[f"stage{i}.weight"], dtype=np.float64)),
                      torch.from_numpy(np.array(arrays[f"stage{i}.bias"], dtype=np.float64)),
                      int(stride))
            for i, stride in enumerate(desc["strides"]))
        return FeatureExtractor(stages, tuple(desc["taps"]),
                                tuple(float(w) for w in desc["layer_weights"]), kind=kind)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadCheckpoint(f"malformed feature extractor: {exc}") from exc


def extractor_from_unet(net, taps: Sequence[int] = (0, 1, 2)) -> FeatureExtractor:
    """Reuse a trained U-Net's input conv and downsampling convs as a feature stack.

    Stage 0 is the input conv; stage ``i > 0`` is the strided conv that closes
    encoder level ``i - 1``. Only levels whose channel count is unchanged by
    their residual block can be chained, so stages stop at the first mismatch.
    """
    def to64(t):
        return t.detach().to(torch.float64).clone()

    stages = [ConvStage(to64(net.conv_in.weight), to64(net.conv_in.bias), 1)]
    for down in net.downsamples:
        conv = down.conv
        if conv.weight.shape[1] != stages[-1].out_channels:
            break
        stages.append(ConvStage(to64(conv.weight), to64(conv.bias), 2))
    taps = tuple(t for t in taps if t < len(stages))
    return FeatureExtractor(tuple(stages), taps, (1.0,) * len(taps), kind="trained")


def build_feature_extractor(source: str = "fixed_random", seed: int = 7,
                            checkpoint=None, in_channels: int = 1) -> FeatureExtractor:
    """``source`` is ``"fixed_random"`` (uses ``seed``) or ``"trained"`` (uses ``checkpoint``)."""
    if source == "fixed_random":
        return fixed_random_extractor(seed, in_channels=in_channels)
    if source == "trained":
        from .checkpoint import load_feature_extractor
        if checkpoint is None:
            raise BadCheckpoint("trained feature extractor needs a checkpoint path")
        return load_feature_extractor(checkpoint)
    raise ConfigError(f"unknown feature extractor source {source!r}")


def _unit_channels(x: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((x * x).sum(dim=1, keepdim=True))
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


def lpips_batch(a: torch.Tensor, b: torch.Tensor, f: FeatureExtractor) -> torch.Tensor:
    a, b = _pair(a, b, True)
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for fa, fb, w in zip(f.features(a), f.features(b), f.layer_weights):
        diff = (_unit_channels(fa) - _unit_channels(fb)) ** 2
        total = total + w * diff.mean(dim=(2, 3)).sum(dim=1)
    return total


def lpips(a: torch.Tensor, b: torch.Tensor, f: FeatureExtractor) -> float:
    a, b = _pair(a, b, False)
    return float(lpips_batch(a, b, f)[0])

