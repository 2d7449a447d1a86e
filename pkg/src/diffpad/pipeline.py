"""Reconstruction-based presentation attack detection.

A sample is reconstructed by a model trained only on bona fide data and scored
by the distance between input and reconstruction. Scores are distances
throughout: higher means more anomalous, and a sample is an attack exactly
when its score is strictly above the threshold.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, atomic_write_text, load_image
from .diffusion import NoiseSchedule, restore
from .errors import ConfigError, DataIOError, EmptyScores, ImageTooSmall, ParseError
from .similarity import FeatureExtractor, lpips_batch, mse_batch, ssim_batch

log = logging.getLogger(__name__)

METRICS = ("mse", "ssim", "lpips")
SCORES_HEADER = ["sample_id", "label", "pai_type", "score"]
NEG_INF = float("-inf")


@dataclass(frozen=True)
class PadScore:
    sample_id: str
    score: float
    label: str | None = None
    pai_type: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0:
            raise ValueError(f"{self.sample_id}: score must be finite and >= 0, got {self.score}")


@dataclass(frozen=True)
class PadDecision:
    sample_id: str
    predicted: str
    score: float
    threshold: float


def extract_roi(image: torch.Tensor, roi_height: int, roi_width: int) -> torch.Tensor:
    """Centered ``roi_height x roi_width`` crop; an odd leftover pixel goes bottom/right."""
    h, w = image.shape[-2:]
    if h < roi_height or w < roi_width:
        raise ImageTooSmall(f"{h}x{w} image smaller than ROI {roi_height}x{roi_width}")
    top = (h - roi_height) // 2
    left = (w - roi_width) // 2
    return image[..., top:top + roi_height, left:left + roi_width]


def derive_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


class DiffusionReconstructor:
    """Truncated-diffusion restoration as a ``(images, seeds) -> images`` callable."""

    def __init__(self, net, schedule: NoiseSchedule, n_steps: int):
        self.net = net
        self.schedule = schedule
        self.n_steps = n_steps

    def __call__(self, images: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        return restore(self.net, images, self.n_steps, self.schedule, list(seeds))


class AutoencoderReconstructor:
    """Deterministic autoencoder pass; seeds are accepted and ignored."""

    def __init__(self, net):
        self.net = net

    def __call__(self, images: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
        with torch.no_grad():
            return self.net(images.to(torch.float32))


Reconstructor = Callable[[torch.Tensor, Sequence[int]], torch.Tensor]


def distance_batch(metric: str, a: torch.Tensor, b: torch.Tensor,
                   extractor: FeatureExtractor | None = None) -> torch.Tensor:
    """Per-pair anomaly distance; SSIM enters as ``1 - SSIM``."""
    if metric == "mse":
        return mse_batch(a, b)
    if metric == "ssim":
        return (1.0 - ssim_batch(a, b)).clamp_min(0.0)
    if metric == "lpips":
        if extractor is None:
            raise ConfigError("metric 'lpips' needs a feature extractor")
        return lpips_batch(a, b, extractor)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def _restart_seeds(seed: int, restarts: int) -> list[int]:
    return [seed] if restarts == 1 else [derive_seed(seed, r) for r in range(restarts)]


def score_images(images: torch.Tensor, reconstructor: Reconstructor, metric: str,
                 extractor: FeatureExtractor | None, seeds: Sequence[int],
                 restarts: int = 1) -> np.ndarray:
    """Scores for a ``(B, C, H, W)`` batch, one seed per image."""
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    per_restart = [_restart_seeds(s, restarts) for s in seeds]
    total = torch.zeros(len(images), dtype=torch.float64)
    for r in range(restarts):
        recon = reconstructor(images, [p[r] for p in per_restart])
        total += distance_batch(metric, images, recon, extractor)
    return (total / restarts).numpy()


def score_sample(image: torch.Tensor, reconstructor: Reconstructor, metric: str = "lpips",
                 extractor: FeatureExtractor | None = None, seed: int = 0,
                 sample_id: str = "", label: str | None = None, pai_type: str = "",
                 restarts: int = 1) -> PadScore:
    """Reconstruct one ROI-cropped image and score it against its reconstruction."""
    value = score_images(image[None], reconstructor, metric, extractor, [seed], restarts)[0]
    return PadScore(sample_id, float(value), label, pai_type)


def score_batch(manifest: DatasetManifest, reconstructor: Reconstructor, metric: str = "lpips",
                extractor: FeatureExtractor | None = None, base_seed: int = 0,
                roi: tuple[int, int] | None = None, restarts: int = 1, jobs: int = 1,
                chunk_size: int = 50) -> tuple[list[PadScore], list[dict]]:
    """Score every manifest entry; returns ``(scores, failures)`` in manifest order.

    Sample ``i`` uses seed ``derive_seed(base_seed, i)``, and chunks have a
    fixed composition, so results do not depend on ``jobs``. Unreadable files
    are reported in ``failures`` and skipped.
    """
    entries = list(manifest.entries)
    chunks = [range(s, min(s + chunk_size, len(entries))) for s in range(0, len(entries), chunk_size)]

    def run(chunk):
        images, kept, failures = [], [], []
        for i in chunk:
            e = entries[i]
            try:
                img = load_image(manifest.resolve(e))
                if roi is not None:
                    img = extract_roi(img, *roi)
            except (DataIOError, ImageTooSmall) as exc:
                failures.append({"sample_id": e.sample_id, "error": str(exc)})
                continue
            images.append(img)
            kept.append(i)
        if not kept:
            return [], failures
        values = score_images(torch.stack(images), reconstructor, metric, extractor,
                              [derive_seed(base_seed, i) for i in kept], restarts)
        scores = [PadScore(entries[i].sample_id, float(v), entries[i].label, entries[i].pai_type)
                  for i, v in zip(kept, values)]
        log.info("scored %d/%d", chunk.stop, len(entries))
        return scores, failures

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    scores = [s for r in results for s in r[0]]
    failures = [f for r in results for f in r[1]]
    return scores, failures


def calibrate_threshold(attack_scores: Sequence[float], target_apcer: float) -> float:
    """Largest attack-score threshold keeping APCER at or below ``target_apcer`` percent.

    Candidates are ``-inf`` and the observed attack scores. With ``n`` scores
    at most ``k = floor(n * target / 100)`` may lie at or below the threshold;
    ties can push the answer below the k-th order statistic, down to ``-inf``.
    """
    scores = np.sort(np.asarray(attack_scores, dtype=np.float64))
    if scores.size == 0:
        raise EmptyScores("no attack scores to calibrate on")
    if not 0.0 < target_apcer < 100.0:
        raise ConfigError(f"target APCER must be in (0, 100), got {target_apcer}")
    k = int(math.floor(scores.size * target_apcer / 100.0))
    if k == 0:
        return NEG_INF
    tau = scores[k - 1]
    if np.searchsorted(scores, tau, side="right") <= k:
        return float(tau)
    below = scores[scores < tau]
    return float(below[-1]) if below.size else NEG_INF


def classify(scores: Iterable[PadScore], threshold: float) -> list[PadDecision]:
    return [PadDecision(s.sample_id, "attack" if s.score > threshold else "bonafide",
                        s.score, threshold) for s in scores]


def write_scores_csv(scores: Sequence[PadScore], path: str | os.PathLike) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    for s in scores:
        writer.writerow([s.sample_id, s.label or "", s.pai_type, f"{s.score:.9g}"])
    atomic_write_text(path, buf.getvalue())
    return Path(path)


def read_scores_csv(path: str | os.PathLike) -> list[PadScore]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read scores {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    if next(reader, None) != SCORES_HEADER:
        raise ParseError(f"scores header must be {','.join(SCORES_HEADER)}", 1)
    out = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(SCORES_HEADER):
            raise ParseError(f"expected 4 fields, got {len(row)}", reader.line_num)
        sample_id, label, pai, value = row
        try:
            out.append(PadScore(sample_id, float(value), label or None, pai))
        except ValueError as exc:
            raise ParseError(str(exc), reader.line_num) from exc
    return out
