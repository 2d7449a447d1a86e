"""Dataset manifests, PNG I/O, subject-disjoint partitioning and the synthetic
ridge-texture generator used in place of real fingerphoto captures."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (ConfigError, DataIOError, DecodeError, DuplicateId, MissingField,
                     MissingSubject, ParseError)

MANIFEST_HEADER = ["sample_id", "file_path", "label", "pai_type", "subject_id", "device"]
LABELS = ("bonafide", "attack")
PAI_TYPES = ("blur", "halftone", "flatten", "moire")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    file_path: str
    label: str
    pai_type: str = ""
    subject_id: str = ""
    device: str = ""

    @property
    def is_attack(self) -> bool:
        return self.label == "attack"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = ()
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.file_path)
        return path if path.is_absolute() else self.root / path

    def subset(self, entries: Iterable[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(tuple(entries), self.root)

    @property
    def bonafide(self) -> "DatasetManifest":
        return self.subset(e for e in self.entries if not e.is_attack)

    @property
    def attacks(self) -> "DatasetManifest":
        return self.subset(e for e in self.entries if e.is_attack)

    def pai_types(self) -> list[str]:
        return sorted({e.pai_type for e in self.entries if e.is_attack})


def validate_entries(entries: Sequence[ManifestEntry], lines: Sequence[int] | None = None) -> None:
    seen = set()
    for i, e in enumerate(entries):
        line = lines[i] if lines is not None else None
        if not e.sample_id:
            raise MissingField("empty sample_id", line)
        if not e.file_path:
            raise MissingField(f"{e.sample_id}: empty file_path", line)
        if e.label not in LABELS:
            raise ParseError(f"{e.sample_id}: label must be one of {LABELS}, got {e.label!r}", line)
        if e.is_attack and not e.pai_type:
            raise MissingField(f"{e.sample_id}: attack entry without pai_type", line)
        if e.sample_id in seen:
            raise DuplicateId(f"duplicate sample_id {e.sample_id!r}", line)
        seen.add(e.sample_id)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("missing header", 1) from None
    if header != MANIFEST_HEADER:
        raise ParseError(f"header must be {','.join(MANIFEST_HEADER)}", 1)
    entries, lines = [], []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ParseError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line)
        entries.append(ManifestEntry(*row))
        lines.append(line)
    validate_entries(entries, lines)
    return DatasetManifest(tuple(entries), path.parent)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write ``manifest`` as CSV; relative file paths are rebased onto ``path``'s directory."""
    path = Path(path)
    validate_entries(manifest.entries)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for e in manifest.entries:
        file_path = e.file_path
        if not Path(file_path).is_absolute():
            file_path = os.path.relpath(manifest.root / file_path, path.parent)
        writer.writerow([e.sample_id, Path(file_path).as_posix(), e.label, e.pai_type,
                         e.subject_id, e.device])
    atomic_write_text(path, buf.getvalue())
    return path


def partition_by_subject(manifest: DatasetManifest, train_fraction: float,
                         seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Subject-disjoint split of the bona fide entries; every attack goes to test.

    Subjects are shuffled by ``seed`` and the train side takes the shortest
    prefix covering at least ``train_fraction`` of the bona fide samples.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    counts: dict[str, int] = {}
    for e in manifest.entries:
        if e.is_attack:
            continue
        if not e.subject_id:
            raise MissingSubject(f"bona fide entry {e.sample_id} has no subject_id")
        counts[e.subject_id] = counts.get(e.subject_id, 0) + 1
    subjects = sorted(counts)
    order = np.random.default_rng(seed).permutation(len(subjects))
    need = train_fraction * sum(counts.values())
    train_subjects, covered = set(), 0
    for i in order:
        if covered >= need:
            break
        train_subjects.add(subjects[i])
        covered += counts[subjects[i]]
    train = [e for e in manifest.entries if not e.is_attack and e.subject_id in train_subjects]
    test = [e for e in manifest.entries if e.is_attack or e.subject_id not in train_subjects]
    return manifest.subset(train), manifest.subset(test)


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read an 8-bit grayscale or RGB PNG as a ``(C, H, W)`` float32 tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise DecodeError(f"{path}: unsupported image mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataIOError(f"no such image {path}") from exc
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def image_to_bytes(image: torch.Tensor) -> bytes:
    arr = np.asarray(image.detach().cpu().double().numpy())
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DecodeError(f"expected (1|3, H, W) image, got {arr.shape}")
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_image(image: torch.Tensor, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, image_to_bytes(image))


def load_images(manifest: DatasetManifest) -> torch.Tensor:
    return torch.stack([load_image(manifest.resolve(e)) for e in manifest.entries])


# --- synthetic data -------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_bonafide: int = 1200
    n_attack_per_pai: int = 50
    pai_types: tuple[str, ...] = PAI_TYPES
    image_height: int = 32
    image_width: int = 64
    freq_min: float = 6.0
    freq_max: float = 10.0
    noise_sigma: float = 0.03
    images_per_subject: int = 25
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_bonafide < 0 or self.n_attack_per_pai < 0:
            raise ConfigError("sample counts must be nonnegative")
        if not 0 < self.freq_min <= self.freq_max:
            raise ConfigError("ridge frequencies must be positive and ordered")
        unknown = set(self.pai_types) - set(PAI_TYPES)
        if unknown:
            raise ConfigError(f"unknown PAI types {sorted(unknown)}")
        if self.images_per_subject < 1:
            raise ConfigError("images_per_subject must be positive")
        return self


_BONAFIDE, _ATTACK_TEXTURE, _ATTACK_DEGRADE, _SUBJECT = 0, 1, 2, 3


def ridge_texture(rng: np.random.Generator, height: int, width: int,
                  freq: float, theta0: float) -> np.ndarray:
    """Noise-free oriented sinusoidal ridges with smooth orientation/frequency drift.

    ``freq`` is in cycles per image width. Returns values in [0, 1].
    """
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    yc, xc = y - height / 2.0, x - width / 2.0
    a1, a2 = rng.uniform(0.15, 0.45, size=2)
    k1, k2 = rng.uniform(0.4, 1.0, size=2)
    p1, p2, p3, phase = rng.uniform(0, 2 * np.pi, size=4)
    theta = theta0 + a1 * np.sin(2 * np.pi * k1 * x / width + p1) \
        + a2 * np.cos(2 * np.pi * k2 * y / height + p2)
    local_freq = freq * (1.0 + 0.08 * np.sin(2 * np.pi * (x + y) / (width + height) + p3))
    u = xc * np.cos(theta) + yc * np.sin(theta)
    ridges = np.cos(2 * np.pi * local_freq * u / width + phase)
    contrast = rng.uniform(0.32, 0.42)
    level = rng.uniform(0.45, 0.55)
    return np.clip(level + contrast * ridges, 0.0, 1.0)


def apply_pai(texture: np.ndarray, pai: str, rng: np.random.Generator) -> np.ndarray:
    """Degrade a clean texture into one of the four attack archetypes."""
    h, w = texture.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    if pai == "blur":
        return ndimage.gaussian_filter(texture, sigma=2.0, mode="reflect")
    if pai == "halftone":
        period = 4.0
        ox, oy = rng.uniform(0, period, size=2)
        screen = 0.5 + 0.35 * np.cos(2 * np.pi * (x + ox) / period) \
            * np.cos(2 * np.pi * (y + oy) / period)
        return np.where(texture > screen, 0.85, 0.15)
    if pai == "flatten":
        local = ndimage.gaussian_filter(texture, sigma=4.0, mode="reflect")
        return local + rng.uniform(0.2, 0.3) * (texture - local)
    if pai == "moire":
        period = rng.uniform(2.5, 3.5)
        angle = rng.uniform(0, np.pi / 2)
        u = x * np.cos(angle) + y * np.sin(angle)
        v = -x * np.sin(angle) + y * np.cos(angle)
        grid = 0.5 + 0.5 * np.cos(2 * np.pi * u / period) * np.cos(2 * np.pi * v / period)
        return texture * (1.0 - 0.4 * grid)
    raise ConfigError(f"unknown PAI type {pai!r}")


def _subject_params(cfg: SynthConfig, subject: int) -> tuple[float, float]:
    rng = np.random.default_rng([cfg.seed, _SUBJECT, subject])
    return float(rng.uniform(cfg.freq_min, cfg.freq_max)), float(rng.uniform(0, np.pi))


def synth_bonafide(cfg: SynthConfig, index: int) -> np.ndarray:
    freq, theta0 = _subject_params(cfg, index // cfg.images_per_subject)
    rng = np.random.default_rng([cfg.seed, _BONAFIDE, index])
    tex = ridge_texture(rng, cfg.image_height, cfg.image_width, freq, theta0)
    return np.clip(tex + rng.normal(0, cfg.noise_sigma, tex.shape), 0.0, 1.0)


def synth_attack(cfg: SynthConfig, pai: str, index: int) -> np.ndarray:
    code = PAI_TYPES.index(pai)
    rng = np.random.default_rng([cfg.seed, _ATTACK_TEXTURE, code, index])
    freq = rng.uniform(cfg.freq_min, cfg.freq_max)
    tex = ridge_texture(rng, cfg.image_height, cfg.image_width, freq, rng.uniform(0, np.pi))
    degraded = apply_pai(tex, pai, np.random.default_rng([cfg.seed, _ATTACK_DEGRADE, code, index]))
    return np.clip(degraded + rng.normal(0, cfg.noise_sigma, tex.shape), 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Write synthetic bona fide and attack PNGs plus ``manifest.csv`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out_dir}: {exc}") from exc
    entries = []

    def emit(sample_id, arr, **fields):
        rel = f"images/{sample_id}.png"
        save_image(torch.from_numpy(arr[None]), out_dir / rel)
        entries.append(ManifestEntry(sample_id, rel, device="synthetic", **fields))

    for i in range(cfg.n_bonafide):
        emit(f"bf_{i:05d}", synth_bonafide(cfg, i), label="bonafide",
             subject_id=f"s{i // cfg.images_per_subject:04d}")
    for pai in cfg.pai_types:
        for i in range(cfg.n_attack_per_pai):
            emit(f"pa_{pai}_{i:05d}", synth_attack(cfg, pai, i), label="attack", pai_type=pai)
    manifest = DatasetManifest(tuple(entries), out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return replace(manifest, root=out_dir)


def radial_power_spectrum(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean power per integer radial frequency, in cycles per image width."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    power = np.abs(np.fft.fft2(img - img.mean())) ** 2
    fy = np.fft.fftfreq(h) * w
    fx = np.fft.fftfreq(w) * w
    radius = np.rint(np.hypot(fy[:, None], fx[None, :])).astype(int)
    nbins = radius.max() + 1
    totals = np.bincount(radius.ravel(), weights=power.ravel(), minlength=nbins)
    counts = np.bincount(radius.ravel(), minlength=nbins)
    return np.arange(nbins), totals / np.maximum(counts, 1)
