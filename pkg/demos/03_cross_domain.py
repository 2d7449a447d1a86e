"""
Same-domain, cross-domain and combined-domain runs
==================================================

Two synthetic capture domains differ in ridge frequency and sensor noise.
We train on A, on B and on both, then score the test split of each domain
and print one combined table per training set. Sizes are cut down so the
whole script finishes in a few minutes on one core; the full-size recipes
live in ``experiments/``. At this size blur and flatten separate well while
halftone and moire barely do, so read the tables for the contrast between
training sets rather than for absolute error rates.
"""
import tempfile
from dataclasses import replace
from pathlib import Path

import torch

from diffpad.data import (DatasetManifest, SynthConfig, generate_synthetic, load_images,
                          partition_by_subject)
from diffpad.diffusion import default_schedule
from diffpad.evaluation import build_report
from diffpad.pipeline import DiffusionReconstructor, score_batch
from diffpad.similarity import fixed_random_extractor
from diffpad.unet import NetConfig, TrainConfig, init_network, train

torch.set_num_threads(1)

base = SynthConfig(n_bonafide=300, n_attack_per_pai=15, image_height=16, image_width=32,
                   images_per_subject=10)
domains = {"A": replace(base, freq_min=3, freq_max=5, noise_sigma=0.03, seed=10),
           "B": replace(base, freq_min=4, freq_max=7, noise_sigma=0.05, seed=20)}
work = Path(tempfile.mkdtemp(prefix="diffpad_domains_"))

# %% Generate each domain and split it by subject
splits = {}
for name, cfg in domains.items():
    manifest = generate_synthetic(cfg, work / name)
    splits[name] = partition_by_subject(manifest, 0.8, seed=0)
    print(f"domain {name}: {len(splits[name][0])} train, {len(splits[name][1])} test")


def absolute(manifest):
    """Same entries with absolute paths, so manifests from two roots can be merged."""
    return DatasetManifest(tuple(replace(e, file_path=str(manifest.resolve(e))) for e in manifest.entries))


training_sets = {"A": absolute(splits["A"][0]), "B": absolute(splits["B"][0])}
training_sets["A+B"] = DatasetManifest(training_sets["A"].entries + training_sets["B"].entries)

# %% Train one denoiser per training set and score both test splits
schedule = default_schedule(100)
f = fixed_random_extractor(7)
for name, manifest in training_sets.items():
    net = init_network(NetConfig(1, 8, 2, 16, 16, 32), seed=0)
    net, trace = train(net, load_images(manifest), schedule,
                       TrainConfig(epochs=12, batch_size=32, learning_rate=2e-3))
    reconstructor = DiffusionReconstructor(net, schedule, 25)
    score_sets = {f"test {d}": score_batch(splits[d][1], reconstructor, "lpips", f, base_seed=0)[0]
                  for d in domains}
    print(f"\n== trained on {name} ({len(manifest)} images, final loss {trace[-1]:.3f})")
    print(build_report(score_sets, 10.0).to_text())
