import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffpad.data import DatasetManifest, ManifestEntry
from diffpad.diffusion import default_schedule, restore
from diffpad.errors import ConfigError, EmptyScores, ImageTooSmall, ParseError
from diffpad.pipeline import (DiffusionReconstructor, PadScore, calibrate_threshold, classify,
                              derive_seed, distance_batch, extract_roi, read_scores_csv,
                              score_batch, score_sample, write_scores_csv)
from diffpad.similarity import fixed_random_extractor, lpips, mse, ssim
from diffpad.unet import NetConfig, init_network

F = fixed_random_extractor(7)


def identity(images, seeds):
    return images.clone()


# --- ROI -----------------------------------------------------------------------

def test_roi_identity():
    img = torch.rand(1, 128, 256)
    assert torch.equal(extract_roi(img, 128, 256), img)


def test_roi_center_coordinates():
    img = torch.arange(256 * 512, dtype=torch.float64).view(1, 256, 512)
    out = extract_roi(img, 128, 256)
    top, left = (256 - 128) // 2, (512 - 256) // 2
    assert (top, left) == (64, 128)
    assert out[0, 0, 0].item() == 64 * 512 + 128
    assert out[0, -1, -1].item() == 191 * 512 + 383
    assert torch.equal(out, img[:, 64:192, 128:384])


def test_roi_odd_remainder_goes_bottom_right():
    img = torch.arange(5 * 7, dtype=torch.float64).view(1, 5, 7)
    out = extract_roi(img, 2, 2)
    # rows: 3 spare -> 1 above, 2 below; cols: 5 spare -> 2 left, 3 right
    assert torch.equal(out, img[:, 1:3, 2:4])


def test_roi_too_small():
    with pytest.raises(ImageTooSmall):
        extract_roi(torch.rand(1, 100, 200), 128, 256)


# --- scoring -------------------------------------------------------------------

def test_perfect_reconstruction_scores_zero():
    img = torch.rand(1, 16, 32)
    assert score_sample(img, identity, "mse").score == 0.0
    assert score_sample(img, identity, "ssim").score == pytest.approx(0.0, abs=1e-12)
    assert score_sample(img, identity, "lpips", F).score == 0.0


def test_score_is_restore_then_metric():
    net, s = init_network(NetConfig(1, 8, 2, 16, 16, 32), 0), default_schedule(20)
    img = torch.rand(1, 16, 32, generator=torch.Generator().manual_seed(0))
    rec = DiffusionReconstructor(net, s, 5)
    restored = restore(net, img, 5, s, 42)
    assert score_sample(img, rec, "mse", seed=42).score == pytest.approx(mse(img, restored), rel=1e-12)
    assert score_sample(img, rec, "ssim", seed=42).score == pytest.approx(1 - ssim(img, restored), rel=1e-12)
    assert score_sample(img, rec, "lpips", F, seed=42).score == pytest.approx(lpips(img, restored, F), rel=1e-12)


def test_restarts_average_scores():
    net, s = init_network(NetConfig(1, 8, 2, 16, 16, 32), 0), default_schedule(20)
    img = torch.rand(1, 16, 32)
    rec = DiffusionReconstructor(net, s, 5)
    single = [score_sample(img, rec, "mse", seed=derive_seed(3, r)).score for r in range(3)]
    assert score_sample(img, rec, "mse", seed=3, restarts=3).score == pytest.approx(np.mean(single), rel=1e-12)


def test_distance_errors():
    a = torch.rand(1, 1, 8, 8)
    with pytest.raises(ConfigError):
        distance_batch("psnr", a, a)
    with pytest.raises(ConfigError):
        distance_batch("lpips", a, a, None)


def test_pad_score_invariant():
    with pytest.raises(ValueError):
        PadScore("x", -0.1)
    with pytest.raises(ValueError):
        PadScore("x", float("nan"))


@pytest.fixture(scope="module")
def scored(tiny_synth):
    cfg, manifest = tiny_synth
    net = init_network(NetConfig(1, 8, 2, 16, 16, 32), 0)
    rec = DiffusionReconstructor(net, default_schedule(20), 5)
    return manifest, rec


def test_score_batch_empty(scored):
    manifest, rec = scored
    assert score_batch(manifest.subset([]), rec, "mse") == ([], [])


def test_score_batch_single_matches_score_sample(scored):
    manifest, rec = scored
    from diffpad.data import load_image
    one = manifest.subset(manifest.entries[:1])
    scores, failures = score_batch(one, rec, "lpips", F, base_seed=9)
    direct = score_sample(load_image(manifest.resolve(one.entries[0])), rec, "lpips", F,
                          seed=derive_seed(9, 0))
    assert failures == [] and len(scores) == 1
    assert scores[0].score == direct.score


def test_score_batch_parallel_equals_serial(scored):
    manifest, rec = scored
    sub = manifest.subset(manifest.entries[:30] + manifest.entries[-10:])
    serial = score_batch(sub, rec, "lpips", F, base_seed=1, chunk_size=7)
    parallel = score_batch(sub, rec, "lpips", F, base_seed=1, chunk_size=7, jobs=3)
    assert serial == parallel
    assert [s.sample_id for s in serial[0]] == [e.sample_id for e in sub.entries]


def test_score_batch_collects_failures(scored):
    manifest, rec = scored
    broken = ManifestEntry("ghost", "images/does_not_exist.png", "bonafide", subject_id="s9")
    sub = manifest.subset(manifest.entries[:2] + (broken,))
    scores, failures = score_batch(sub, rec, "mse")
    assert [s.sample_id for s in scores] == [e.sample_id for e in manifest.entries[:2]]
    assert [f["sample_id"] for f in failures] == ["ghost"]


def test_score_batch_roi(scored):
    manifest, rec = scored
    with_roi = score_batch(manifest.subset(manifest.entries[:3]), rec, "mse", roi=(16, 32))
    without = score_batch(manifest.subset(manifest.entries[:3]), rec, "mse")
    assert with_roi == without
    _, failures = score_batch(manifest.subset(manifest.entries[:1]), rec, "mse", roi=(64, 64))
    assert len(failures) == 1


# --- thresholds ----------------------------------------------------------------

def sweep_threshold(attack, target):
    """Largest candidate threshold whose APCER stays within target."""
    best = -math.inf
    for tau in [-math.inf] + sorted(attack):
        if 100.0 * sum(a <= tau for a in attack) / len(attack) <= target:
            best = max(best, tau)
    return best


def test_calibrate_examples():
    assert calibrate_threshold(list(range(1, 11)), 10) == 1
    assert calibrate_threshold([5.0] * 10, 10) == -math.inf
    with pytest.raises(EmptyScores):
        calibrate_threshold([], 10)
    with pytest.raises(ConfigError):
        calibrate_threshold([1.0], 0)


def test_calibrate_ten_distinct_accepts_one():
    scores = list(np.random.default_rng(0).permutation(np.linspace(0.1, 2.0, 10)))
    tau = calibrate_threshold(scores, 10)
    assert tau == sweep_threshold(scores, 10)
    assert sum(s <= tau for s in scores) == 1


@given(st.lists(st.integers(0, 30).map(float), min_size=1, max_size=60),
       st.floats(0.5, 99.5))
@settings(max_examples=200, deadline=None)
def test_calibrate_matches_sweep_and_is_tight(scores, target):
    tau = calibrate_threshold(scores, target)
    assert tau == sweep_threshold(scores, target)
    n = len(scores)
    assert 100.0 * sum(s <= tau for s in scores) / n <= target
    larger = [s for s in scores if s > tau]
    if larger:
        assert 100.0 * sum(s <= min(larger) for s in scores) / n > target


def test_classify_rules():
    d = classify([PadScore("a", 0.3), PadScore("b", 0.5), PadScore("c", 0.7)], 0.5)
    assert [x.predicted for x in d] == ["bonafide", "bonafide", "attack"]
    assert all(x.predicted == "attack" for x in classify([PadScore("z", 0.0)], -math.inf))


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0, 10))
@settings(max_examples=100, deadline=None)
def test_classify_elementwise_oracle(values, tau):
    decisions = classify([PadScore(str(i), v) for i, v in enumerate(values)], tau)
    assert [d.predicted for d in decisions] == ["attack" if v > tau else "bonafide" for v in values]


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0, 10), st.floats(0, 10))
@settings(max_examples=100, deadline=None)
def test_raising_threshold_never_creates_attacks(values, t1, t2):
    lo, hi = sorted((t1, t2))
    scores = [PadScore(str(i), v) for i, v in enumerate(values)]
    for a, b in zip(classify(scores, lo), classify(scores, hi)):
        assert not (a.predicted == "bonafide" and b.predicted == "attack")


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=60), st.floats(1, 50))
@settings(max_examples=100, deadline=None)
def test_decisions_invariant_under_monotone_transform(values, target):
    attack = values[: len(values) // 2 + 1]

    def transform(x):
        return math.log1p(3.0 * x) ** 2

    plain = classify([PadScore(str(i), v) for i, v in enumerate(values)],
                     calibrate_threshold(attack, target))
    moved = classify([PadScore(str(i), transform(v)) for i, v in enumerate(values)],
                     calibrate_threshold([transform(a) for a in attack], target))
    assert [d.predicted for d in plain] == [d.predicted for d in moved]


# --- scores file ---------------------------------------------------------------

def test_scores_csv_round_trip(tmp_path):
    scores = [PadScore("bf_1", 0.123456789123, "bonafide"),
              PadScore("pa_1", 2.5, "attack", "blur")]
    path = write_scores_csv(scores, tmp_path / "s.csv")
    text = path.read_text()
    assert text.splitlines()[0] == "sample_id,label,pai_type,score"
    assert "bf_1,bonafide,,0.123456789\n" in text
    again = read_scores_csv(path)
    assert again[1] == scores[1] and again[0].score == 0.123456789


def test_scores_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,score\n")
    with pytest.raises(ParseError):
        read_scores_csv(tmp_path / "bad.csv")
    (tmp_path / "neg.csv").write_text("sample_id,label,pai_type,score\nx,bonafide,,-1\n")
    with pytest.raises(ParseError) as info:
        read_scores_csv(tmp_path / "neg.csv")
    assert info.value.line == 2
