"""Unsupervised presentation attack detection by diffusion restoration.

A denoising diffusion model trained only on bona fide images restores each
test image from a partially noised copy; the perceptual distance between input
and restoration is the attack score.
"""

__version__ = "0.1.0"

from .diffusion import (NoiseSchedule, ancestral_sample, default_schedule, forward_marginal,
                        forward_step, make_linear_schedule, restore, reverse_step, training_loss)
from .evaluation import (EvalReport, apcer, bpcer, bpcer_at_apcer, build_report, det_curve, fid,
                         fid_images)
from .pipeline import (DiffusionReconstructor, PadDecision, PadScore, calibrate_threshold,
                       classify, extract_roi, score_batch, score_sample)
from .similarity import SsimParams, build_feature_extractor, lpips, mse, ssim
from .unet import NetConfig, TrainConfig, gradient_check, init_network, predict_noise, train
