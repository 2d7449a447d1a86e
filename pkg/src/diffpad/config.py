"""Run configuration: an INI document with ``[model]``, ``[train]``,
``[pipeline]``, ``[eval]`` and ``[data]`` sections.

Unknown sections or keys are rejected. Every artifact the CLI writes embeds
:meth:`RunConfig.digest`, a hash of the fully resolved configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .baselines import AutoencoderConfig
from .data import PAI_TYPES, SynthConfig
from .diffusion import NoiseSchedule, default_schedule, default_truncation, make_linear_schedule
from .errors import ConfigError
from .unet import NetConfig, TrainConfig


@dataclass(frozen=True)
class ModelSection:
    kind: str = "diffusion"
    in_channels: int = 1
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    image_height: int = 32
    image_width: int = 64
    T: int = 100
    beta_start: float = 0.0
    beta_end: float = 0.0
    truncation: int = 0
    latent_dim: int = 64
    kl_weight: float = 0.1

    def net_config(self) -> NetConfig:
        return NetConfig(self.in_channels, self.base_channels, self.depth, self.time_embed_dim,
                         self.image_height, self.image_width).validate()

    def ae_config(self) -> AutoencoderConfig:
        return AutoencoderConfig(self.kind, self.in_channels, self.image_height, self.image_width,
                                 self.latent_dim, kl_weight=self.kl_weight).validate()

    def schedule(self) -> NoiseSchedule:
        if self.beta_start == 0.0 and self.beta_end == 0.0:
            return default_schedule(self.T)
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def truncation_step(self) -> int:
        return self.truncation or default_truncation(self.T)


@dataclass(frozen=True)
class PipelineSection:
    metric: str = "lpips"
    roi_height: int = 32
    roi_width: int = 64
    restarts: int = 1
    seed: int = 0
    extractor: str = "fixed_random"
    extractor_seed: int = 7
    extractor_checkpoint: str = ""
    chunk_size: int = 50


@dataclass(frozen=True)
class EvalSection:
    target_apcer: float = 10.0
    pooled: bool = False


@dataclass(frozen=True)
class DataSection:
    n_bonafide: int = 1200
    n_attack_per_pai: int = 50
    pai_types: tuple[str, ...] = PAI_TYPES
    freq_min: float = 6.0
    freq_max: float = 10.0
    noise_sigma: float = 0.03
    images_per_subject: int = 25
    seed: int = 0
    train_fraction: float = 0.8333
    split_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "RunConfig":
        if self.model.kind not in ("diffusion", "cae", "vae"):
            raise ConfigError(f"model.kind must be diffusion, cae or vae, got {self.model.kind!r}")
        if self.model.kind == "diffusion":
            self.model.net_config()
            schedule = self.model.schedule()
            if not 1 <= self.model.truncation_step() < schedule.T:
                raise ConfigError("model.truncation must lie in [1, T)")
        else:
            self.model.ae_config()
        self.train.validate()
        if self.pipeline.metric not in ("mse", "ssim", "lpips"):
            raise ConfigError(f"unknown pipeline.metric {self.pipeline.metric!r}")
        if self.pipeline.extractor not in ("fixed_random", "trained"):
            raise ConfigError(f"unknown pipeline.extractor {self.pipeline.extractor!r}")
        if self.pipeline.extractor == "trained" and not self.pipeline.extractor_checkpoint:
            raise ConfigError("pipeline.extractor = trained needs pipeline.extractor_checkpoint")
        if self.pipeline.extractor_checkpoint and not os.path.exists(self.pipeline.extractor_checkpoint):
            raise ConfigError(f"extractor checkpoint {self.pipeline.extractor_checkpoint} not found")
        if self.pipeline.restarts < 1 or self.pipeline.chunk_size < 1:
            raise ConfigError("pipeline.restarts and pipeline.chunk_size must be positive")
        if not 0 < self.eval.target_apcer < 100:
            raise ConfigError("eval.target_apcer must be in (0, 100)")
        self.synth_config().validate()
        if not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.train_fraction must be in (0, 1)")
        return self

    def synth_config(self) -> SynthConfig:
        d = self.data
        return SynthConfig(d.n_bonafide, d.n_attack_per_pai, tuple(d.pai_types),
                           self.model.image_height, self.model.image_width, d.freq_min,
                           d.freq_max, d.noise_sigma, d.images_per_subject, d.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed (data, split, training, scoring) with ``seed``."""
        return replace(self, train=replace(self.train, seed=seed),
                       pipeline=replace(self.pipeline, seed=seed),
                       data=replace(self.data, seed=seed, split_seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def seeds(self) -> dict:
        return {"data": self.data.seed, "split": self.data.split_seed,
                "train": self.train.seed, "pipeline": self.pipeline.seed,
                "extractor": self.pipeline.extractor_seed}


_SECTIONS = {"model": ModelSection, "train": TrainConfig, "pipeline": PipelineSection,
             "eval": EvalSection, "data": DataSection}


def _coerce(raw: str, target, where: str):
    try:
        if target is bool or target == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target in (int, "int"):
            return int(raw)
        if target in (float, "float"):
            return float(raw)
        if target in (str, "str"):
            return raw.strip()
        # tuple[str, ...]
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = _SECTIONS[name]
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"{source}: unknown key {name}.{key}")
            values[key] = _coerce(raw, types[key], f"{source}: {name}.{key}")
        sections[name] = cls(**values)
    return RunConfig(**sections).validate()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def describe_defaults() -> str:
    """Reference listing of every section, key and default value."""
    lines = []
    for name, cls in _SECTIONS.items():
        lines.append(f"[{name}]")
        default = cls()
        for f in fields(cls):
            value = getattr(default, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
