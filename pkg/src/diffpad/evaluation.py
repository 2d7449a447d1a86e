"""ISO/IEC 30107-3 style error rates, operating-point reports, DET curves and FID."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import DimensionMismatch, EmptyScores, EmptySubset, TooFewSamples
from .pipeline import PadDecision, PadScore, calibrate_threshold
from .similarity import FeatureExtractor

THRESHOLD_NOTE = ("oracle operating point: thresholds are calibrated on the attack "
                  "scores of the evaluated set itself")


@dataclass(frozen=True)
class ErrorRates:
    apcer: float
    bpcer: float
    threshold: float
    n_attack: int
    n_bonafide: int


def _error_rate(decisions: Sequence[PadDecision], wrong: str) -> float:
    decisions = list(decisions)
    if not decisions:
        raise EmptySubset("cannot compute an error rate on an empty subset")
    return 100.0 * sum(d.predicted == wrong for d in decisions) / len(decisions)


def apcer(decisions: Sequence[PadDecision]) -> float:
    """Percentage of attack presentations accepted as bona fide."""
    return _error_rate(decisions, "bonafide")


def bpcer(decisions: Sequence[PadDecision]) -> float:
    """Percentage of bona fide presentations rejected as attacks."""
    return _error_rate(decisions, "attack")


def bpcer_at_apcer(bona_scores: Sequence[float], attack_scores: Sequence[float],
                   target_apcer: float = 10.0) -> tuple[float, float]:
    bona = np.asarray(bona_scores, dtype=np.float64)
    if bona.size == 0 or len(attack_scores) == 0:
        raise EmptyScores("need both bona fide and attack scores")
    tau = calibrate_threshold(attack_scores, target_apcer)
    return 100.0 * float(np.count_nonzero(bona > tau)) / bona.size, tau


def error_rates(bona_scores: Sequence[float], attack_scores: Sequence[float],
                threshold: float) -> ErrorRates:
    bona = np.asarray(bona_scores, dtype=np.float64)
    attack = np.asarray(attack_scores, dtype=np.float64)
    if bona.size == 0 or attack.size == 0:
        raise EmptyScores("need both bona fide and attack scores")
    return ErrorRates(100.0 * np.count_nonzero(attack <= threshold) / attack.size,
                      100.0 * np.count_nonzero(bona > threshold) / bona.size,
                      threshold, int(attack.size), int(bona.size))


def det_thresholds(bona_scores: Sequence[float], attack_scores: Sequence[float]) -> np.ndarray:
    values = np.unique(np.concatenate([np.asarray(bona_scores, float), np.asarray(attack_scores, float)]))
    return np.concatenate([[-np.inf], values, [np.inf]])


def det_curve(bona_scores: Sequence[float], attack_scores: Sequence[float]) -> list[tuple[float, float]]:
    """``(apcer, bpcer)`` at ``-inf``, every distinct score and ``+inf``, by increasing threshold.

    Along the list APCER is non-decreasing and BPCER non-increasing; the
    endpoints are ``(0, 100)`` and ``(100, 0)``.
    """
    bona = np.sort(np.asarray(bona_scores, dtype=np.float64))
    attack = np.sort(np.asarray(attack_scores, dtype=np.float64))
    if bona.size == 0 or attack.size == 0:
        raise EmptyScores("need both bona fide and attack scores")
    taus = det_thresholds(bona, attack)
    apcers = 100.0 * np.searchsorted(attack, taus, side="right") / attack.size
    bpcers = 100.0 * (bona.size - np.searchsorted(bona, taus, side="right")) / bona.size
    return [(float(a), float(b)) for a, b in zip(apcers, bpcers)]


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = _clamp_eigenvalues(vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _clamp_eigenvalues(vals: np.ndarray, rel: float = 1e-10) -> np.ndarray:
    top = vals.max() if vals.size else 0.0
    return np.where(vals > rel * max(top, 0.0), vals, 0.0)


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits (unbiased covariances) of two feature sets.

    ``Tr sqrt(Sa Sb)`` is evaluated as the trace of the square root of the
    symmetric matrix ``Sa^1/2 Sb Sa^1/2``.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples("FID needs at least two vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    vals = _clamp_eigenvalues(np.linalg.eigvalsh((middle + middle.T) / 2.0))
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b)
                  - 2.0 * np.sqrt(vals).sum())
    return max(value, 0.0)


def pooled_features(images: torch.Tensor, f: FeatureExtractor, chunk: int = 100) -> np.ndarray:
    """Spatially averaged activations of the extractor's last tap, one row per image."""
    rows = []
    for start in range(0, len(images), chunk):
        feats = f.features(images[start:start + chunk])[-1]
        rows.append(feats.mean(dim=(2, 3)).numpy())
    return np.concatenate(rows)


def fid_images(images_a: torch.Tensor, images_b: torch.Tensor, f: FeatureExtractor) -> float:
    if len(images_a) == 0 or len(images_b) == 0:
        raise TooFewSamples("FID needs nonempty image sets")
    return fid(pooled_features(images_a, f), pooled_features(images_b, f))


# --- reports ----------------------------------------------------------------

def _pct(x: float) -> float:
    return round(float(x), 2)


def _thr(x: float):
    return None if math.isinf(x) else float(f"{x:.9g}")


@dataclass
class EvalReport:
    target_apcer: float
    per_pai: list[dict]
    pooled: list[dict]
    det: list[dict]
    fid: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"operating_point": {"target_apcer": self.target_apcer,
                                    "metric": "BPCER @ APCER", "note": THRESHOLD_NOTE},
                "per_pai": self.per_pai, "pooled": self.pooled, "det": self.det,
                "fid": self.fid, "meta": self.meta, "failures": self.failures}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        target = f"{self.target_apcer:g}"
        head = ["Testing dataset", "PAI", "APCER(%)", f"BPCER @ APCER = {target}(%)",
                "threshold", "n_attack", "n_bonafide"]
        rows = []
        for r in self.per_pai + self.pooled:
            thr = "-inf" if r["threshold"] is None else f"{r['threshold']:.6g}"
            rows.append([r["dataset"], r["pai"], f"{r['apcer']:.2f}", f"{r['bpcer']:.2f}",
                         thr, str(r["n"]), str(r["n_bonafide"])])
        widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]

        def fmt(cells):
            return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

        lines = [fmt(head), "-+-".join("-" * w for w in widths)]
        lines += [fmt(r) for r in rows]
        if self.fid:
            lines += ["", "FID (inputs vs reconstructions)"]
            lines += [f"  {k}: {v:.4f}" for k, v in self.fid.items()]
        if self.failures:
            lines += ["", f"{len(self.failures)} sample(s) failed to score"]
        lines += ["", f"note: {THRESHOLD_NOTE}"]
        return "\n".join(lines) + "\n"


def _row(dataset: str, pai: str, rates: ErrorRates) -> dict:
    return {"dataset": dataset, "pai": pai, "apcer": _pct(rates.apcer), "bpcer": _pct(rates.bpcer),
            "threshold": _thr(rates.threshold), "n": rates.n_attack, "n_bonafide": rates.n_bonafide}


def _det_points(bona, attack) -> list[list[float]]:
    return [[_pct(a), _pct(b)] for a, b in det_curve(bona, attack)]


def build_report(score_sets: dict[str, Sequence[PadScore]], target_apcer: float = 10.0,
                 pooled_threshold: bool = False, meta: dict | None = None,
                 failures: Iterable[dict] = (), fid_table: dict | None = None) -> EvalReport:
    """Per-PAI and pooled error rates for one or more named score sets.

    Each PAI threshold is calibrated on that PAI's attack scores, unless
    ``pooled_threshold`` is set, in which case every PAI is evaluated at the
    threshold calibrated on all attacks of its set.
    """
    per_pai, pooled, det = [], [], []
    for dataset, scores in score_sets.items():
        bona = [s.score for s in scores if s.label == "bonafide"]
        attacks = [s for s in scores if s.label == "attack"]
        if not bona or not attacks:
            raise EmptyScores(f"{dataset}: need both bona fide and attack scores")
        all_attack = [s.score for s in attacks]
        pooled_tau = calibrate_threshold(all_attack, target_apcer)
        for pai in sorted({s.pai_type for s in attacks}):
            pai_scores = [s.score for s in attacks if s.pai_type == pai]
            tau = pooled_tau if pooled_threshold else calibrate_threshold(pai_scores, target_apcer)
            per_pai.append(_row(dataset, pai, error_rates(bona, pai_scores, tau)))
            det.append({"dataset": dataset, "pai": pai, "points": _det_points(bona, pai_scores)})
        pooled.append(_row(dataset, "pooled", error_rates(bona, all_attack, pooled_tau)))
        det.append({"dataset": dataset, "pai": "pooled", "points": _det_points(bona, all_attack)})
    return EvalReport(float(target_apcer), per_pai, pooled, det, dict(fid_table or {}),
                      dict(meta or {}), list(failures))
