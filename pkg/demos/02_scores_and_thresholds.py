"""
From distances to decisions
===========================

Three distances (MSE, 1 - SSIM, LPIPS) react differently to the same damage.
A threshold calibrated on attack scores turns any of them into a detector,
and the DET curve shows the whole trade-off at once. No training here, so the
script runs in a few seconds.
"""
import numpy as np
import torch
from scipy import ndimage

from diffpad.data import SynthConfig, synth_bonafide
from diffpad.evaluation import bpcer_at_apcer, build_report, det_curve, error_rates
from diffpad.pipeline import PadScore, calibrate_threshold, classify
from diffpad.similarity import fixed_random_extractor, lpips, mse, ssim

# %% How each distance grows with blur
img = torch.from_numpy(synth_bonafide(SynthConfig(seed=3), 0))[None]
f = fixed_random_extractor(7)
print(f"{'blur sigma':>10} {'MSE':>8} {'1-SSIM':>8} {'LPIPS':>8}")
for sigma in (0.5, 1.0, 2.0, 4.0):
    blurred = torch.from_numpy(ndimage.gaussian_filter(img.numpy(), sigma=(0, sigma, sigma)))
    print(f"{sigma:>10} {mse(img, blurred):8.4f} {1 - ssim(img, blurred):8.4f} {lpips(img, blurred, f):8.4f}")

# %% A toy score population: attacks score higher on average
rng = np.random.default_rng(0)
bona = rng.gamma(4.0, 0.10, 300)
attack = {"blur": rng.gamma(9.0, 0.10, 60), "moire": rng.gamma(5.5, 0.10, 60)}
all_attack = np.concatenate(list(attack.values()))

# %% Calibrate on the attacks: at most 10% of them may fall at or below tau
tau = calibrate_threshold(all_attack, 10.0)
scores = [PadScore(f"b{i}", float(v), "bonafide") for i, v in enumerate(bona)]
decisions = classify(scores, tau)
rejected = sum(d.predicted == "attack" for d in decisions)
rates = error_rates(bona, all_attack, tau)
print(f"\ntau = {tau:.4f}: APCER {rates.apcer:.1f}%, BPCER {rates.bpcer:.1f}% "
      f"({rejected} of {len(bona)} bona fide rejected)")
print("same via bpcer_at_apcer:", bpcer_at_apcer(bona, all_attack, 10.0))

# %% DET curve: APCER rises and BPCER falls as the threshold increases
points = det_curve(bona, all_attack)
for a, b in points[:: max(1, len(points) // 8)]:
    print(f"APCER {a:6.2f}%  BPCER {b:6.2f}%")

# %% The full report, one row per attack type plus the pooled row
score_set = scores + [PadScore(f"{pai}{i}", float(v), "attack", pai)
                      for pai, values in attack.items() for i, v in enumerate(values)]
print()
print(build_report({"toy": score_set}, 10.0).to_text())
