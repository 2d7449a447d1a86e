"""Command-line interface: ``diffpad {synth,train,score,eval,fid,reconstruct}``.

Progress goes to stderr, results to files and stdout. Exit codes: 0 success,
2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .baselines import (init_autoencoder, load_autoencoder,
                        save_autoencoder, train_autoencoder)
from .checkpoint import load_checkpoint, load_denoiser, save_denoiser
from .config import RunConfig, describe_defaults, load_config
from .data import (atomic_write_text, generate_synthetic, load_image, load_images, load_manifest,
                   partition_by_subject, save_image, save_manifest)
from .errors import ConfigError, DiffPadError
from .evaluation import build_report, fid_images
from .pipeline import (AutoencoderReconstructor, DiffusionReconstructor, derive_seed,
                       extract_roi, read_scores_csv, score_batch, write_scores_csv)
from .similarity import build_feature_extractor
from .unet import init_network, train

log = logging.getLogger("diffpad")


def artifact_meta(cfg: RunConfig, **extra) -> dict:
    return {"tool": "diffpad", "version": __version__, "config_digest": cfg.digest(),
            "seeds": cfg.seeds(), **extra}


def write_json(path, payload: dict) -> Path:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return Path(path)


def cmd_synth(cfg: RunConfig, out_dir) -> Path:
    """Generate the synthetic set plus subject-disjoint ``train.csv`` / ``test.csv``."""
    out_dir = Path(out_dir)
    manifest = generate_synthetic(cfg.synth_config(), out_dir)
    train_m, test_m = partition_by_subject(manifest, cfg.data.train_fraction, cfg.data.split_seed)
    save_manifest(train_m, out_dir / "train.csv")
    save_manifest(test_m, out_dir / "test.csv")
    write_json(out_dir / "synth.meta.json", artifact_meta(
        cfg, counts={"all": len(manifest), "train": len(train_m), "test": len(test_m)}))
    log.info("wrote %d images; train %d, test %d", len(manifest), len(train_m), len(test_m))
    return out_dir / "manifest.csv"


def _training_images(cfg: RunConfig, manifest_path) -> torch.Tensor:
    manifest = load_manifest(manifest_path).bonafide
    images = load_images(manifest)
    return extract_roi(images, cfg.pipeline.roi_height, cfg.pipeline.roi_width)


def cmd_train(cfg: RunConfig, manifest_path, out_checkpoint) -> Path:
    """Train the configured model on the bona fide entries of a manifest."""
    images = _training_images(cfg, manifest_path)
    kind = cfg.model.kind
    extra = artifact_meta(cfg, kind=kind, truncation=cfg.model.truncation_step())

    if kind == "diffusion":
        net = init_network(cfg.model.net_config(), cfg.train.seed)
        schedule = cfg.model.schedule()

        def on_epoch(epoch, model, opt, trace):
            if epoch % cfg.train.checkpoint_every == 0 or epoch == cfg.train.epochs:
                save_denoiser(out_checkpoint, model, schedule, opt, epoch,
                              dict(extra, loss_trace=[float(x) for x in trace]))

        train(net, images, schedule, cfg.train, on_epoch=on_epoch)
    else:
        net = init_autoencoder(cfg.model.ae_config(), cfg.train.seed)

        def on_epoch(epoch, model, opt, trace):
            if epoch % cfg.train.checkpoint_every == 0 or epoch == cfg.train.epochs:
                save_autoencoder(out_checkpoint, model, opt, epoch,
                                 dict(extra, loss_trace=[float(x) for x in trace]))

        train_autoencoder(net, images, cfg.train, on_epoch=on_epoch)
    return Path(out_checkpoint)


def load_reconstructor(cfg: RunConfig, checkpoint):
    """Reconstructor and checkpoint content id for a diffusion, CAE or VAE checkpoint."""
    kind = load_checkpoint(checkpoint).kind
    if kind == "diffusion":
        net, schedule, ckpt = load_denoiser(checkpoint)
        n_steps = int(ckpt.meta.get("truncation", cfg.model.truncation_step()))
        if cfg.model.truncation:
            n_steps = cfg.model.truncation
        return DiffusionReconstructor(net, schedule, n_steps), ckpt.digest()
    if kind in ("cae", "vae"):
        net, ckpt = load_autoencoder(checkpoint)
        return AutoencoderReconstructor(net), ckpt.digest()
    raise ConfigError(f"checkpoint kind {kind!r} cannot reconstruct images")


def load_extractor(cfg: RunConfig):
    p = cfg.pipeline
    return build_feature_extractor(p.extractor, seed=p.extractor_seed,
                                   checkpoint=p.extractor_checkpoint or None,
                                   in_channels=cfg.model.in_channels)


def cmd_score(cfg: RunConfig, checkpoint, manifest_path, out_csv, jobs: int = 1,
              metric: str | None = None) -> Path:
    reconstructor, ckpt_id = load_reconstructor(cfg, checkpoint)
    metric = metric or cfg.pipeline.metric
    extractor = load_extractor(cfg) if metric == "lpips" else None
    manifest = load_manifest(manifest_path)
    p = cfg.pipeline
    scores, failures = score_batch(manifest, reconstructor, metric, extractor, p.seed,
                                   roi=(p.roi_height, p.roi_width), restarts=p.restarts,
                                   jobs=jobs, chunk_size=p.chunk_size)
    write_scores_csv(scores, out_csv)
    write_json(f"{out_csv}.meta.json", artifact_meta(
        cfg, checkpoint=ckpt_id, metric=metric, n_scored=len(scores), failures=failures))
    return Path(out_csv)


def _scores_meta(path: Path) -> dict:
    side = Path(f"{path}.meta.json")
    return json.loads(side.read_text()) if side.exists() else {}


def cmd_eval(cfg: RunConfig, scores_csvs, out_dir, names=None) -> tuple[Path, Path]:
    """Write ``report.txt`` and ``report.json`` for one or more score files."""
    paths = [Path(p) for p in scores_csvs]
    names = list(names) if names else [p.stem for p in paths]
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise ConfigError("need one distinct name per scores file")
    sets, failures, sources = {}, [], []
    for name, path in zip(names, paths):
        sets[name] = read_scores_csv(path)
        side = _scores_meta(path)
        failures += [dict(f, dataset=name) for f in side.get("failures", [])]
        sources.append({"dataset": name, "checkpoint": side.get("checkpoint"),
                        "metric": side.get("metric"), "config_digest": side.get("config_digest")})
    report = build_report(sets, cfg.eval.target_apcer, cfg.eval.pooled,
                          meta=artifact_meta(cfg, pooled_threshold=cfg.eval.pooled, sources=sources),
                          failures=failures)
    out_dir = Path(out_dir)
    text_path, json_path = out_dir / "report.txt", out_dir / "report.json"
    atomic_write_text(text_path, report.to_text())
    atomic_write_text(json_path, report.to_json())
    sys.stdout.write(report.to_text())
    return text_path, json_path


def fid_table(cfg: RunConfig, checkpoint, manifest_path) -> dict:
    """FID between inputs and their reconstructions, per image type."""
    reconstructor, _ = load_reconstructor(cfg, checkpoint)
    extractor = load_extractor(cfg)
    manifest = load_manifest(manifest_path)
    groups = {"bonafide": manifest.bonafide}
    for pai in manifest.pai_types():
        groups[f"PAI: {pai}"] = manifest.subset(e for e in manifest.attacks if e.pai_type == pai)
    if manifest.attacks.entries:
        groups["PAI: all"] = manifest.attacks
    index = {e.sample_id: i for i, e in enumerate(manifest.entries)}
    p = cfg.pipeline
    table = {}
    for name, group in groups.items():
        images = extract_roi(load_images(group), p.roi_height, p.roi_width)
        seeds = [derive_seed(p.seed, index[e.sample_id]) for e in group.entries]
        recon = torch.cat([reconstructor(images[s:s + p.chunk_size], seeds[s:s + p.chunk_size])
                           for s in range(0, len(images), p.chunk_size)])
        table[name] = round(fid_images(images, recon, extractor), 6)
        log.info("FID %s: %.4f", name, table[name])
    return table


def cmd_fid(cfg: RunConfig, checkpoint, manifest_path, out_json=None) -> dict:
    table = fid_table(cfg, checkpoint, manifest_path)
    payload = {"fid": table, "meta": artifact_meta(cfg)}
    if out_json:
        write_json(out_json, payload)
    width = max(len(k) for k in table)
    for k, v in table.items():
        sys.stdout.write(f"{k.ljust(width)}  {v:.4f}\n")
    return table


def cmd_reconstruct(cfg: RunConfig, checkpoint, image_in, image_out) -> Path:
    reconstructor, _ = load_reconstructor(cfg, checkpoint)
    p = cfg.pipeline
    image = extract_roi(load_image(image_in), p.roi_height, p.roi_width)
    restored = reconstructor(image[None], [p.seed])[0]
    save_image(restored, image_out)
    return Path(image_out)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI run configuration")
    parser.add_argument("--seed", type=int, default=default,
                        help="override every seed in the configuration")
    parser.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="single-threaded, deterministic torch kernels")
    parser.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="parallel scoring workers")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpad", description="Unsupervised presentation attack detection with diffusion "
        "restoration and perceptual similarity.",
        epilog="Configuration keys and defaults:\n\n" + describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"diffpad {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train diffusion, cae or vae")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("score", parents=[common], help="score a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="scores CSV path")
    p.add_argument("--metric", choices=("mse", "ssim", "lpips"))

    p = sub.add_parser("eval", parents=[common], help="BPCER@APCER report from score files")
    p.add_argument("scores", nargs="+", help="scores CSV file(s)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--names", nargs="+", help="dataset label per scores file")

    p = sub.add_parser("fid", parents=[common], help="FID of inputs vs reconstructions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="optional JSON output path")

    p = sub.add_parser("reconstruct", parents=[common], help="restore a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    jobs = args.jobs
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        jobs = 1
    if args.command == "synth":
        print(cmd_synth(cfg, args.out))
    elif args.command == "train":
        print(cmd_train(cfg, args.manifest, args.out))
    elif args.command == "score":
        print(cmd_score(cfg, args.checkpoint, args.manifest, args.out, jobs, args.metric))
    elif args.command == "eval":
        cmd_eval(cfg, args.scores, args.out, args.names)
    elif args.command == "fid":
        cmd_fid(cfg, args.checkpoint, args.manifest, args.out)
    elif args.command == "reconstruct":
        print(cmd_reconstruct(cfg, args.checkpoint, args.image, args.out))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run(args)
    except DiffPadError as exc:
        print(f"diffpad: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
