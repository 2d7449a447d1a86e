"""Convolutional and variational autoencoder baselines.

Both reconstruct unit-interval images directly (sigmoid output) and plug into
the PAD pipeline through :class:`diffpad.pipeline.AutoencoderReconstructor`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import (Checkpoint, load_checkpoint, load_module_arrays, module_arrays,
                         optimizer_arrays, save_checkpoint)
from .errors import BadCheckpoint, EmptyDataset, InvalidConfig, ShapeMismatch, WrongVariant
from .unet import TrainConfig, fan_in_init_, fit

VARIANTS = ("cae", "vae")


@dataclass(frozen=True)
class AutoencoderConfig:
    variant: str = "cae"
    in_channels: int = 1
    image_height: int = 32
    image_width: int = 64
    latent_dim: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    kl_weight: float = 0.1

    def validate(self) -> "AutoencoderConfig":
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.kl_weight < 0:
            raise InvalidConfig("kl_weight must be nonnegative")
        if self.image_height % 8 or self.image_width % 8:
            raise InvalidConfig("autoencoder images must be divisible by 8")
        if self.latent_dim < 1:
            raise InvalidConfig("latent_dim must be positive")
        return self

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        return self.image_height // 8, self.image_width // 8

    @property
    def spatial_latent_channels(self) -> int:
        h, w = self.bottleneck_hw
        return max(1, self.latent_dim // (h * w))


class AutoencoderNetwork(nn.Module):
    """Three stride-2 conv stages mirrored by three transposed-conv stages.

    Both variants squeeze the ``H/8 x W/8`` map to ``latent_dim / (H/8 * W/8)``
    channels with 1x1 convs. The VAE has separate mean and log-variance heads
    of that shape.
    """

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config.validate()
        c1, c2, c3 = config.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(config.in_channels, c1, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(c2, c3, 4, 2, 1), nn.ReLU())
        lc = config.spatial_latent_channels
        if config.variant == "cae":
            self.to_latent = nn.Conv2d(c3, lc, 1)
        else:
            self.to_mean = nn.Conv2d(c3, lc, 1)
            self.to_logvar = nn.Conv2d(c3, lc, 1)
        self.from_latent = nn.Conv2d(lc, c3, 1)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(c1, config.in_channels, 4, 2, 1))

    @property
    def variant(self) -> str:
        return self.config.variant

    def encode(self, x: torch.Tensor):
        """CAE: latent map. VAE: ``(mean, logvar)``."""
        h = self.encoder(x)
        if self.variant == "cae":
            return self.to_latent(h)
        return self.to_mean(h), self.to_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(F.relu(self.from_latent(z))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.encode(x)
        if self.variant == "vae":
            z = z[0]
        return self.decode(z)


def init_autoencoder(config: AutoencoderConfig, seed: int) -> AutoencoderNetwork:
    net = AutoencoderNetwork(config)
    fan_in_init_(net, torch.Generator().manual_seed(int(seed)))
    return net


def _check_images(net: AutoencoderNetwork, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    c = net.config
    shape = (c.in_channels, c.image_height, c.image_width)
    if tuple(x.shape[-3:]) != shape or x.ndim not in (3, 4):
        raise ShapeMismatch(f"expected {shape}, got {tuple(x.shape)}")
    return (x, True) if x.ndim == 4 else (x[None], False)


def ae_reconstruct(net: AutoencoderNetwork, image: torch.Tensor) -> torch.Tensor:
    """Decoder(encoder(image)); the VAE uses its posterior mean."""
    x, batched = _check_images(net, image)
    with torch.no_grad():
        out = net(x.to(next(net.parameters()).dtype))
    return out if batched else out[0]


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    return 0.5 * (mean ** 2 + logvar.exp() - logvar - 1.0).flatten(1).sum(dim=1).mean()


def vae_loss(net: AutoencoderNetwork, images: torch.Tensor, seed: int | torch.Generator,
             kl_weight: float | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(total, reconstruction, kl)``; reconstruction is the per-image summed squared error.

    ``kl_weight`` defaults to the network's config. Weight ``w`` is the negative
    ELBO of a Gaussian decoder with fixed variance ``w / 2``, up to scale.
    """
    if net.variant != "vae":
        raise WrongVariant("vae_loss needs a 'vae' network")
    x, _ = _check_images(net, images)
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    mean, logvar = net.encode(x)
    eps = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
    recon = net.decode(mean + torch.exp(0.5 * logvar) * eps)
    rec = ((recon - x) ** 2).flatten(1).sum(dim=1).mean()
    kl = kl_divergence(mean, logvar)
    weight = net.config.kl_weight if kl_weight is None else kl_weight
    return rec + weight * kl, rec, kl


def autoencoder_objective(net: AutoencoderNetwork) -> Callable:
    if net.variant == "cae":
        return lambda model, batch, gen: ((model(batch) - batch) ** 2).mean()
    return lambda model, batch, gen: vae_loss(model, batch, gen)[0]


def train_autoencoder(net: AutoencoderNetwork, data: torch.Tensor, cfg: TrainConfig,
                      on_epoch: Callable | None = None):
    """CAE minimizes pixel MSE, VAE the negative ELBO; returns ``(net, per-epoch loss)``."""
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    _check_images(net, data[:1])
    return fit(net, data.to(torch.float32), autoencoder_objective(net), cfg, on_epoch=on_epoch)


def save_autoencoder(path, net: AutoencoderNetwork, optimizer=None, epoch: int = 0,
                     extra: dict | None = None):
    meta = {"ae_config": {**asdict(net.config), "channels": list(net.config.channels)},
            "epoch": int(epoch), **(extra or {})}
    optim = optimizer_arrays(net, optimizer) if optimizer is not None else {}
    return save_checkpoint(Checkpoint(net.variant, meta, module_arrays(net), optim), path)


def load_autoencoder(path) -> tuple[AutoencoderNetwork, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind not in VARIANTS:
        raise BadCheckpoint(f"expected a cae/vae checkpoint, found {ckpt.kind!r}")
    try:
        raw = dict(ckpt.meta["ae_config"])
        raw["channels"] = tuple(raw["channels"])
        config = AutoencoderConfig(**raw)
    except (KeyError, TypeError) as exc:
        raise BadCheckpoint(f"incomplete autoencoder checkpoint: {exc}") from exc
    net = AutoencoderNetwork(config)
    load_module_arrays(net, ckpt.params)
    net.eval()
    return net, ckpt
