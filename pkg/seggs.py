#!/usr/bin/env python3
"""
SegGaussian command line

Usage: python seggs.py <command> [flags]
Commands: synth, label-transfer, render, train, eval, gradcheck, fixture
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from colorama import Fore, Style, init

from autodiff import load_checkpoint
from errors import GradCheckFailed, IoFailure, MissingSemantics, SegGaussianError, UsageError
from eval_metrics import PROTOCOLS, evaluate
from gsr_net import predict_semantics
from rasterizer import CHANNELS, RasterConfig, render
from scene_model import (
    DenseTargetMap,
    atomic_write,
    load_camera,
    load_point_cloud,
    load_scene,
    load_vocabulary,
    save_camera,
    save_dense_map,
    save_label_image,
    save_point_cloud,
    save_ppm,
    save_scene,
    save_vocabulary,
)
from scene_tools import RoomSpec, synth_cameras, synth_scene, synth_vocabulary, transfer_labels
from settings import echo_settings, load_settings, parse_name_list
from trainer import TrainConfig, build_toy_fixture, gradient_check_suite, load_manifest, load_params, resolve_vocabulary, train

# Initialize colorama
init(autoreset=True)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# flag dest -> settings key
FLAG_KEYS = {
    "seed": "seed",
    "threads": "threads",
    "out_dir": "out_dir",
    "voxel_size": "gsr.voxel_size",
    "lr": "train.learning_rate",
    "batch": "train.batch_size",
    "epochs": "train.epochs",
    "max_steps": "train.max_steps",
    "temperature": "loss.temperature",
    "unseen": "data.unseen",
    "vocabulary": "data.vocabulary",
    "protocol": "eval.protocol",
    "tol": "gradcheck.tol",
    "seeds": "gradcheck.seeds",
}


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors here exit with 1"""

    def error(self, message):
        raise UsageError(message)


def print_banner():
    print(f"{Fore.CYAN + Style.BRIGHT}")
    print("=" * 60)
    print("  SegGaussian - semantic Gaussian splatting toolkit")
    print("=" * 60)
    print(f"{Style.RESET_ALL}")


def ok(message: str):
    print(f"{Fore.GREEN}✅ {message}{Style.RESET_ALL}")


def info(message: str):
    print(f"{Fore.BLUE}{message}{Style.RESET_ALL}")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON file with dotted configuration keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out-dir", dest="out_dir")

    parser = CliParser(prog="seggs.py", description="Semantic Gaussian splatting: synth, render, train, evaluate")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic labeled room")
    p.add_argument("--name", default="synth_scene")
    p.add_argument("--classes", help="Comma-separated class names")
    p.add_argument("--gaussians", type=int, help="Gaussians per class")
    p.add_argument("--views", type=int)
    p.add_argument("--unlabeled", action="store_true", help="Write the scene without labels")

    p = sub.add_parser("label-transfer", parents=[common], help="Copy point-cloud labels onto a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--in-place", action="store_true", help="Overwrite the input scene file")

    p = sub.add_parser("render", parents=[common], help="Render a scene from one camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--channels", default="color", help=f"Comma-separated subset of {','.join(CHANNELS)}")
    p.add_argument("--checkpoint", help="Predict semantics with this checkpoint first")
    p.add_argument("--vocabulary", help="Vocabulary file (sizes the label image)")
    p.add_argument("--voxel-size", type=float, dest="voxel_size")

    p = sub.add_parser("train", parents=[common], help="Train the semantic network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--voxel-size", type=float, dest="voxel_size")
    p.add_argument("--temperature", type=float)
    p.add_argument("--unseen", help="Comma-separated classes withheld from training")
    p.add_argument("--vocabulary")
    p.add_argument("--resume", help="Checkpoint to resume from")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint under one protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--voxel-size", type=float, dest="voxel_size")
    p.add_argument("--temperature", type=float)
    p.add_argument("--unseen")
    p.add_argument("--vocabulary")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the full pipeline")
    p.add_argument("--tol", type=float)
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("fixture", parents=[common], help="Write the toy convergence dataset")
    p.add_argument("--with-targets", action="store_true", help="Also write dense target maps")
    p.add_argument("--train-scenes", type=int, default=6)
    p.add_argument("--val-scenes", type=int, default=2)
    return parser


def effective_settings(args) -> Dict:
    overrides = {key: getattr(args, dest, None) for dest, key in FLAG_KEYS.items()}
    settings = load_settings(getattr(args, "config", None), overrides)
    echo_settings(settings)
    return settings


def _out_dir(settings: Dict) -> Path:
    path = Path(settings["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, settings: Dict) -> int:
    out = _out_dir(settings)
    classes = parse_name_list(args.classes or settings["synth.classes"])
    spec = RoomSpec(
        extent=tuple(settings["synth.extent"]),
        classes=classes,
        gaussians_per_class=args.gaussians or settings["synth.gaussians_per_class"],
        cloud_density=settings["synth.cloud_density"],
        domain_shift=settings["synth.domain_shift"],
    )
    scene, cloud = synth_scene(spec, settings["seed"], scene_id=args.name)
    if args.unlabeled:
        scene = scene.replace(labels=None, instances=None, has_labels=False)
    save_scene(scene, out / f"{args.name}.sgs")
    save_point_cloud(cloud, out / f"{args.name}.spc")
    views = args.views or settings["synth.views"]
    cams = synth_cameras(spec.extent, views, settings["synth.width"], settings["synth.height"], settings["seed"])
    for i, cam in enumerate(cams):
        save_camera(cam, out / f"{args.name}_view_{i:02d}.json")
    vocab = synth_vocabulary(classes, settings["synth.embedding_dim"], settings["seed"])
    save_vocabulary(vocab, out / "vocabulary.txt")
    ok(f"Synthesized {scene.count} Gaussians, {cloud.count} cloud points and {views} cameras in {out}")
    return 0


def cmd_label_transfer(args, settings: Dict) -> int:
    scene = load_scene(args.scene)
    cloud = load_point_cloud(args.cloud)
    labeled = transfer_labels(scene, cloud)
    if args.in_place:
        target = Path(args.scene)
    else:
        target = _out_dir(settings) / f"{Path(args.scene).stem}_labeled.sgs"
    save_scene(labeled, target)
    counts = np.bincount(labeled.labels.astype(np.int64)) if labeled.count else np.zeros(0)
    ok(f"Transferred labels to {labeled.count} Gaussians -> {target}")
    info(f"Label histogram: {dict((i, int(c)) for i, c in enumerate(counts) if c)}")
    return 0


def cmd_render(args, settings: Dict) -> int:
    channels = parse_name_list(args.channels)
    scene = load_scene(args.scene)
    cam = load_camera(args.camera)
    if "semantic" in channels and args.checkpoint:
        config = TrainConfig.from_settings(settings)
        params = {k: v for k, v in load_checkpoint(args.checkpoint).items() if not k.startswith(("train.", "optim."))}
        scene = predict_semantics(scene, params, config.gsr)
    elif "semantic" in channels and not scene.has_semantics:
        raise MissingSemantics(f"scene {args.scene} has no semantics; pass --checkpoint to predict them")

    out = render(scene, cam, channels=channels, config=RasterConfig.from_settings(settings), retain=False)
    out_dir = _out_dir(settings)
    stem = f"{Path(args.scene).stem}_{Path(args.camera).stem}"
    written: List[Path] = []
    if out.color is not None:
        written.append(out_dir / f"{stem}.ppm")
        save_ppm(out.color, written[-1])
    if out.label_map is not None:
        vocab_size = load_vocabulary(args.vocabulary).size if args.vocabulary else int(scene.labels.max(initial=0)) + 1
        written.append(save_label_image(out.label_map, vocab_size, out_dir / f"{stem}_label"))
    if out.semantic_map is not None:
        written.append(out_dir / f"{stem}_semantic.sdm")
        save_dense_map(DenseTargetMap(out.semantic_map), written[-1])
    if out.depth is not None:
        written.append(out_dir / f"{stem}_depth.sdm")
        save_dense_map(DenseTargetMap(out.depth[:, :, None]), written[-1])
    if "alpha" in channels:
        written.append(out_dir / f"{stem}_alpha.sdm")
        save_dense_map(DenseTargetMap(out.alpha[:, :, None]), written[-1])
    for path in written:
        ok(f"Wrote {path}")
    return 0


def cmd_train(args, settings: Dict) -> int:
    config = TrainConfig.from_settings(settings)
    manifest = load_manifest(args.manifest)
    vocab = resolve_vocabulary(manifest, settings["data.vocabulary"], parse_name_list(settings["data.unseen"]))
    out_dir = _out_dir(settings)
    atomic_write(out_dir / "effective_config.json", json.dumps(settings, indent=2, sort_keys=True).encode("utf-8"))
    result = train(args.manifest, config, vocab=vocab, resume=args.resume)
    ok(f"Trained {result.steps} steps; checkpoint {result.checkpoint}")
    if result.last is not None:
        info(f"Last step: total {result.last.total:.4f} (3d {result.last.l_3d_text:.4f}, "
             f"2d {result.last.l_2d_text:.4f}, cos {result.last.l_cosine:.4f})")
    return 0


def cmd_eval(args, settings: Dict) -> int:
    config = TrainConfig.from_settings(settings)
    protocol = settings["eval.protocol"]
    manifest = load_manifest(args.manifest)
    vocab = resolve_vocabulary(manifest, settings["data.vocabulary"], parse_name_list(settings["data.unseen"]))
    report = evaluate(args.checkpoint, args.manifest, protocol, config, vocab)
    path = _out_dir(settings) / f"report_{protocol}.json"
    report.to_json(path)
    print(f"\n{Fore.YELLOW + Style.BRIGHT}{protocol} mIoU: {report.miou:.4f}{Style.RESET_ALL}")
    for key, value in report.extra.items():
        print(f"{Fore.YELLOW}{key}: {value:.4f}{Style.RESET_ALL}")
    print(report.format_table())
    ok(f"Report written to {path}")
    return 0


def cmd_gradcheck(args, settings: Dict) -> int:
    config = TrainConfig.from_settings(settings)
    config.augment = None
    tol = settings["gradcheck.tol"]
    worst = 0.0
    for seed in range(settings["seed"], settings["seed"] + settings["gradcheck.seeds"]):
        report = gradient_check_suite(
            seed, config,
            gaussians=settings["gradcheck.gaussians"],
            height=settings["gradcheck.height"],
            width=settings["gradcheck.width"],
            h=settings["gradcheck.h"],
            tol=tol,
            max_coords=settings["gradcheck.max_coords"],
        )
        worst = max(worst, report.max_rel_err)
        color = Fore.GREEN if report.passed else Fore.RED
        print(f"{color}seed {seed}: {report}{Style.RESET_ALL}")
    print(f"max_rel_err {worst:.3e}")
    if worst > tol:
        raise GradCheckFailed(f"max relative error {worst:.3e} exceeds tolerance {tol:g}")
    ok(f"Gradient check passed at tol {tol:g}")
    return 0


def cmd_fixture(args, settings: Dict) -> int:
    out = _out_dir(settings)
    manifest = build_toy_fixture(
        out,
        seed=settings["seed"],
        classes=parse_name_list(settings["synth.classes"]),
        n_train=args.train_scenes,
        n_val=args.val_scenes,
        gaussians_per_class=settings["synth.gaussians_per_class"],
        views=settings["synth.views"],
        width=settings["synth.width"],
        height=settings["synth.height"],
        embedding_dim=settings["synth.embedding_dim"],
        extent=tuple(settings["synth.extent"]),
        with_targets=args.with_targets,
    )
    ok(f"Fixture manifest: {manifest}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "label-transfer": cmd_label_transfer,
    "render": cmd_render,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "fixture": cmd_fixture,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code"""
    try:
        args = build_parser().parse_args(argv)
        print_banner()
        settings = effective_settings(args)
        return COMMANDS[args.command](args, settings)
    except SegGaussianError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"{Fore.RED}❌ {type(e).__name__}: {e}{Style.RESET_ALL}")
        return e.exit_code
    except (OSError, ValueError) as e:
        # unreadable or unwritable paths and unparsable files surface here from the stdlib
        failure = IoFailure(f"{type(e).__name__}: {e}")
        logger.error(f"IoFailure: {failure}")
        print(f"{Fore.RED}❌ IoFailure: {failure}{Style.RESET_ALL}")
        return failure.exit_code
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}Interrupted by user{Style.RESET_ALL}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
