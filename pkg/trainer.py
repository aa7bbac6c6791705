"""
Training loop

Each step draws a batch of (scene, view) samples, predicts per-Gaussian
semantics from an augmented copy of the scene, splats them through the cached
render of the original geometry and takes one SGD step on the averaged
gradients. Everything random is keyed by (seed, epoch, position), so a run can
be replayed or resumed bit for bit.
"""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import autodiff as ad
from ccl_losses import LossBreakdown, LossConfig, compute_losses, decoder_shapes, init_decoders
from errors import ConfigError, EmptyManifest, LengthMismatch, MalformedHeader, NonFinite, ShapeMismatch
from gsr_net import GsrConfig, forward_semantics, init_params, param_shapes
from rasterizer import RasterConfig, RenderOutput, rasterize_labels, render, semantic_map_op
from scene_model import (
    IGNORE_LABEL,
    Camera,
    DenseTargetMap,
    GaussianScene,
    LabelVocabulary,
    atomic_write,
    load_camera,
    load_dense_map,
    load_scene,
    load_vocabulary,
    read_bytes,
    save_camera,
    save_dense_map,
    save_point_cloud,
    save_scene,
    save_vocabulary,
)
from scene_tools import AugmentConfig, RoomSpec, augment, synth_cameras, synth_dense_target, synth_scene, synth_vocabulary

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "novel_view", "cross_domain")
TOY_CLASSES = ("floor", "wall", "chair", "table", "lamp")


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 3
    epochs: int = 300
    max_steps: int = 0
    momentum: float = 0.0
    checkpoint_every: int = 100
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs"
    gsr: GsrConfig = field(default_factory=GsrConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must not be negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def from_settings(cls, settings: Dict) -> "TrainConfig":
        return cls(
            learning_rate=settings["train.learning_rate"],
            batch_size=settings["train.batch_size"],
            epochs=settings["train.epochs"],
            max_steps=settings["train.max_steps"],
            momentum=settings["train.momentum"],
            checkpoint_every=settings["train.checkpoint_every"],
            seed=settings["seed"],
            threads=settings["threads"],
            out_dir=settings["out_dir"],
            gsr=GsrConfig.from_settings(settings),
            loss=LossConfig.from_settings(settings),
            raster=RasterConfig.from_settings(settings),
            augment=AugmentConfig.from_settings(settings) if settings["augment.enabled"] else None,
        )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    scene: Path
    cameras: List[Path]
    targets: List[Optional[Path]]
    split: str = "train"


@dataclass
class Manifest:
    path: Path
    entries: List[ManifestEntry]

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(read_bytes(path).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedHeader(f"manifest {path} is not valid JSON: {e}")
    if not isinstance(raw, list):
        raise MalformedHeader(f"manifest {path} must be a JSON list of entries")
    if not raw:
        raise EmptyManifest(f"manifest {path} lists no scenes")

    base = path.parent
    resolve = lambda p: None if p is None else (Path(p) if Path(p).is_absolute() else base / p)
    entries = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "scene" not in item or "cameras" not in item:
            raise MalformedHeader(f"manifest entry {i} needs 'scene' and 'cameras'")
        cameras = [resolve(c) for c in item["cameras"]]
        targets = item.get("targets") or [None] * len(cameras)
        if len(targets) != len(cameras):
            raise LengthMismatch(f"manifest entry {i}: {len(cameras)} cameras but {len(targets)} targets")
        split = item.get("split", "train")
        if split not in SPLITS:
            raise MalformedHeader(f"manifest entry {i}: unknown split '{split}'")
        entries.append(ManifestEntry(resolve(item["scene"]), cameras, [resolve(t) for t in targets], split))
    return Manifest(path, entries)


def save_manifest(entries: Sequence[dict], path) -> None:
    atomic_write(path, json.dumps(list(entries), indent=2).encode("utf-8"))


def resolve_vocabulary(manifest: Manifest, vocabulary_path: str = "", unseen: Sequence[str] = ()) -> LabelVocabulary:
    """Configured vocabulary file, else vocabulary.txt beside the manifest"""
    path = Path(vocabulary_path) if vocabulary_path else manifest.path.parent / "vocabulary.txt"
    vocab = load_vocabulary(path)
    unknown = [name for name in unseen if name not in vocab.names]
    if unknown:
        logger.debug(f"Unseen classes not in the vocabulary, ignored: {unknown}")
    return vocab.with_unseen(unseen)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    scene: GaussianScene
    camera: Camera
    render: RenderOutput
    label_map: np.ndarray
    target: Optional[DenseTargetMap] = None
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.target is not None:
            self.target.check_camera(self.camera)


class SceneSet:
    """Scenes of one manifest split with lazily cached renders (geometry never changes)"""

    def __init__(self, entries: Sequence[ManifestEntry], raster: Optional[RasterConfig] = None):
        self.entries = list(entries)
        self.raster = raster or RasterConfig()
        self.scenes = [load_scene(e.scene, domain_tag=e.split) for e in self.entries]
        self.cameras = [[load_camera(c) for c in e.cameras] for e in self.entries]
        self._renders: Dict[Tuple[int, int], Tuple[RenderOutput, np.ndarray]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def view_counts(self) -> List[int]:
        return [len(c) for c in self.cameras]

    def rendered(self, item: int, view: int) -> Tuple[RenderOutput, np.ndarray]:
        key = (item, view)
        with self._lock:
            cached = self._renders.get(key)
        if cached is not None:
            return cached
        scene, cam = self.scenes[item], self.cameras[item][view]
        channels = ("alpha", "label") if scene.has_labels else ("alpha",)
        out = render(scene, cam, channels=channels, config=self.raster, retain=True)
        label_map = out.label_map if out.label_map is not None else np.full((cam.height, cam.width), IGNORE_LABEL, np.uint16)
        with self._lock:
            self._renders.setdefault(key, (out, label_map))
            return self._renders[key]

    def sample(self, item: int, view: int, seed: int = 0) -> Sample:
        out, label_map = self.rendered(item, view)
        target_path = self.entries[item].targets[view]
        return Sample(
            scene=self.scenes[item],
            camera=self.cameras[item][view],
            render=out,
            label_map=label_map,
            target=load_dense_map(target_path) if target_path is not None else None,
            seed=seed,
            name=f"{self.scenes[item].scene_id}#{view}",
        )


def schedule(view_counts: Sequence[int], epochs: int, batch_size: int, seed: int) -> Iterator[Tuple[int, List[Tuple[int, int, int]]]]:
    """
    (epoch, [(scene, view, augmentation seed), ...]) batches in training order

    Every scene occurs once per epoch in a seeded shuffle; views are uniform
    over the scene's cameras.
    """
    n = len(view_counts)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        picks = []
        for pos, item in enumerate(order.tolist()):
            rng = np.random.default_rng([seed, epoch, pos])
            view = int(rng.integers(view_counts[item]))
            picks.append((item, view, int(rng.integers(2 ** 31 - 1))))
        for start in range(0, n, batch_size):
            yield epoch, picks[start:start + batch_size]


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------

def all_param_shapes(config: TrainConfig, embedding_dim: int) -> Dict[str, Tuple[int, ...]]:
    shapes = dict(param_shapes(config.gsr))
    shapes.update(decoder_shapes(config.gsr.semantic_dim, config.loss.decoder_hidden, embedding_dim))
    return shapes


def init_all_params(config: TrainConfig, embedding_dim: int) -> Dict[str, np.ndarray]:
    params = init_params(config.seed, config.gsr)
    params.update(init_decoders(config.seed, config.gsr.semantic_dim, config.loss.decoder_hidden, embedding_dim))
    return params


def checkpoint_entries(params: Dict[str, np.ndarray], velocity: Optional[Dict[str, np.ndarray]] = None,
                       step: int = 0, epoch: int = 0, seed: int = 0) -> Dict[str, np.ndarray]:
    entries = dict(params)
    for name, v in (velocity or {}).items():
        entries[f"optim.velocity.{name}"] = v
    entries["train.step"] = np.asarray(float(step))
    entries["train.epoch"] = np.asarray(float(epoch))
    entries["train.seed"] = np.asarray(float(seed))
    return entries


def split_checkpoint(entries: Dict[str, np.ndarray], shapes: Dict[str, Tuple[int, ...]]):
    """(params, velocity, step) out of a loaded checkpoint, checked against the expected shapes"""
    params = {}
    for name, shape in shapes.items():
        if name not in entries:
            raise ShapeMismatch(f"checkpoint lacks parameter '{name}'", [shape])
        if entries[name].shape != tuple(shape):
            raise ShapeMismatch(f"checkpoint parameter '{name}' has the wrong shape", [entries[name].shape, shape])
        params[name] = entries[name].copy()
    velocity = {name[len("optim.velocity."):]: v.copy() for name, v in entries.items()
                if name.startswith("optim.velocity.")}
    step = int(entries["train.step"]) if "train.step" in entries else 0
    return params, velocity, step


def load_params(path, config: TrainConfig, embedding_dim: int) -> Dict[str, np.ndarray]:
    params, _, _ = split_checkpoint(ad.load_checkpoint(path), all_param_shapes(config, embedding_dim))
    return params


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def sample_gradients(sample: Sample, params: Dict[str, np.ndarray], vocab: LabelVocabulary,
                     config: TrainConfig) -> Tuple[Dict[str, np.ndarray], LossBreakdown]:
    """Loss and parameter gradients of one sample on its own graph"""
    leaves = ad.as_parameters(params)
    net_scene = augment(sample.scene, sample.seed, config.augment) if config.augment is not None else sample.scene
    semantics = forward_semantics(net_scene, leaves, config.gsr)
    semantic_map = semantic_map_op(sample.render, semantics)
    breakdown = compute_losses(semantics, semantic_map, sample.scene.labels, sample.label_map, sample.target,
                               vocab, leaves, config.loss)
    grads = ad.backward(breakdown.total_tensor)
    by_name = {name: grads.of(leaf) for name, leaf in leaves.items()}
    for name, g in by_name.items():
        if not np.isfinite(g).all():
            logger.error(f"Non-finite gradient for {name} on sample {sample.name}")
            raise NonFinite(f"gradient of {name} went non-finite",
                            diagnostics={"sample": sample.name, "parameter": name, "loss": breakdown.as_row()})
    return by_name, breakdown


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    n = float(len(parts))
    l3d = sum(p.l_3d_text for p in parts) / n
    l2d = sum(p.l_2d_text for p in parts) / n
    lcos = sum(p.l_cosine for p in parts) / n
    counts: Dict[str, int] = {}
    for p in parts:
        for key, value in p.counts.items():
            counts[key] = counts.get(key, 0) + value
    return LossBreakdown(l3d, l2d, lcos, l3d + l2d + lcos, counts)


def train_step(batch: Sequence[Sample], params: Dict[str, np.ndarray], config: TrainConfig,
               vocab: LabelVocabulary, velocity: Optional[Dict[str, np.ndarray]] = None):
    """
    One SGD update on a batch; returns (params, breakdown, velocity)

    Gradients are reduced in batch order whatever the thread count, and a
    non-finite loss or gradient aborts before anything is updated.
    """
    if not batch:
        raise EmptyManifest("train_step needs at least one sample")
    work = lambda s: sample_gradients(s, params, vocab, config)
    if config.threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=min(config.threads, len(batch))) as pool:
            results = list(pool.map(work, batch))
    else:
        results = [work(s) for s in batch]

    scale = 1.0 / len(batch)
    grads = {}
    for name in params:
        total = np.zeros_like(params[name])
        for sample_grads, _ in results:
            total = total + sample_grads[name]
        grads[name] = total * scale

    lr = config.learning_rate
    updated, new_velocity = {}, {}
    for name, value in params.items():
        if config.momentum > 0:
            v = config.momentum * (velocity or {}).get(name, np.zeros_like(value)) + grads[name]
            new_velocity[name] = v
            updated[name] = value - lr * v
        else:
            updated[name] = value - lr * grads[name]
    return updated, _mean_breakdown([b for _, b in results]), new_velocity


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    steps: int
    last: Optional[LossBreakdown] = None


def format_log_line(step: int, epoch: int, b: LossBreakdown) -> str:
    return f"{step} {epoch} {b.l_3d_text:.17g} {b.l_2d_text:.17g} {b.l_cosine:.17g} {b.total:.17g}"


def read_loss_log(path) -> pd.DataFrame:
    return pd.read_csv(path, sep=" ", header=None, names=["step", "epoch", "l3d", "l2d", "lcos", "total"])


def _trimmed_log(path: Path, keep_steps: int) -> List[str]:
    if keep_steps == 0 or not path.exists():
        return []
    lines = path.read_text().splitlines()
    return [line for line in lines if line and int(line.split()[0]) <= keep_steps]


def train(manifest_path, config: TrainConfig, vocab: Optional[LabelVocabulary] = None,
          resume: Optional[str] = None) -> TrainResult:
    """Full training run over the manifest's train split; resumable from a checkpoint"""
    manifest = load_manifest(manifest_path)
    entries = [e for e in manifest.split("train") if e.cameras]
    if not entries:
        raise EmptyManifest(f"manifest {manifest_path} has no training scene with cameras")
    vocab = vocab or resolve_vocabulary(manifest)
    data = SceneSet(entries, config.raster)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.txt"

    shapes = all_param_shapes(config, vocab.dim)
    previous_log = log_path
    if resume:
        stored = ad.load_checkpoint(resume)
        if "train.seed" in stored and int(stored["train.seed"]) != config.seed:
            raise ConfigError(f"checkpoint {resume} was trained with seed {int(stored['train.seed'])}, "
                              f"not {config.seed}; the batch schedule would not line up")
        params, velocity, start_step = split_checkpoint(stored, shapes)
        previous_log = Path(resume).parent / "loss_log.txt"
        logger.info(f"Resuming from {resume} at step {start_step}")
    else:
        params, velocity, start_step = init_all_params(config, vocab.dim), {}, 0

    if len(vocab.unseen_ids):
        logger.info(f"Classes withheld from training: {[vocab.names[i] for i in vocab.unseen_ids]}")
    logger.info(f"Training on {len(data)} scenes, batch {config.batch_size}, lr {config.learning_rate}, "
                f"{config.epochs} epochs" + (f", at most {config.max_steps} steps" if config.max_steps else ""))

    lines = _trimmed_log(previous_log, start_step)
    step, epoch, last = 0, 0, None
    with open(log_path, "w") as log:
        for line in lines:
            log.write(line + "\n")
        for batch_epoch, picks in schedule(data.view_counts(), config.epochs, config.batch_size, config.seed):
            if config.max_steps and step >= config.max_steps:
                break
            step += 1
            epoch = batch_epoch
            if step <= start_step:
                continue
            batch = [data.sample(item, view, seed) for item, view, seed in picks]
            params, last, velocity = train_step(batch, params, config, vocab, velocity)
            log.write(format_log_line(step, epoch, last) + "\n")
            log.flush()
            if step % 25 == 0 or step == 1:
                logger.info(f"step {step} epoch {epoch}: total {last.total:.4f} "
                            f"(3d {last.l_3d_text:.4f}, 2d {last.l_2d_text:.4f}, cos {last.l_cosine:.4f})")
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                ad.save_checkpoint(checkpoint_entries(params, velocity, step, epoch, config.seed),
                                   out_dir / f"checkpoint_{step:06d}.sck")

    final = out_dir / "final.sck"
    ad.save_checkpoint(checkpoint_entries(params, velocity, step, epoch, config.seed), final)
    logger.info(f"Training finished after {step} steps; final checkpoint {final}")
    return TrainResult(final, log_path, step, last)


# ---------------------------------------------------------------------------
# Toy fixture
# ---------------------------------------------------------------------------

def build_toy_fixture(out_dir, seed: int = 0, classes: Sequence[str] = TOY_CLASSES, n_train: int = 6,
                      n_val: int = 2, n_cross: int = 2, gaussians_per_class: int = 160, views: int = 8,
                      novel_views: int = 2, width: int = 64, height: int = 48, embedding_dim: int = 512,
                      extent: Sequence[float] = (4.0, 3.0, 2.5), with_targets: bool = False,
                      domain_shift: float = 0.5) -> Path:
    """
    Write a small synthetic dataset: scenes, clouds, cameras, optional dense
    targets, vocabulary and a manifest covering every split
    """
    out_dir = Path(out_dir)
    vocab = synth_vocabulary(list(classes), embedding_dim, seed)
    save_vocabulary(vocab, out_dir / "vocabulary.txt")

    manifest = []
    families = [("train", n_train, 0.0), ("val", n_val, 0.0), ("cross_domain", n_cross, domain_shift)]
    index = 0
    for split, count, shift in families:
        for _ in range(count):
            name = f"scene_{index:02d}"
            spec = RoomSpec(extent=tuple(extent), classes=list(classes), gaussians_per_class=gaussians_per_class,
                            domain_shift=shift)
            scene, cloud = synth_scene(spec, seed * 1000 + index, scene_id=name, domain_tag=split)
            save_scene(scene, out_dir / "scenes" / f"{name}.sgs")
            save_point_cloud(cloud, out_dir / "clouds" / f"{name}.spc")

            n_views = views + (novel_views if split == "train" else 0)
            cams = synth_cameras(extent, n_views, width, height, seed * 1000 + index)
            cam_paths, target_paths = [], []
            for v, cam in enumerate(cams):
                cam_rel = f"cameras/{name}_view_{v:02d}.json"
                save_camera(cam, out_dir / cam_rel)
                cam_paths.append(cam_rel)
                target_rel = None
                if with_targets:
                    target_rel = f"targets/{name}_view_{v:02d}.sdm"
                    target = synth_dense_target(rasterize_labels(scene, cam), vocab)
                    save_dense_map(target, out_dir / target_rel)
                target_paths.append(target_rel)

            scene_rel = f"scenes/{name}.sgs"
            manifest.append({"scene": scene_rel, "cameras": cam_paths[:views],
                             "targets": target_paths[:views], "split": split})
            if split == "train" and novel_views:
                manifest.append({"scene": scene_rel, "cameras": cam_paths[views:],
                                 "targets": target_paths[views:], "split": "novel_view"})
            index += 1

    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    logger.info(f"Toy fixture with {index} scenes written to {out_dir}")
    return path


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------

def gradient_check_suite(seed: int, config: Optional[TrainConfig] = None, gaussians: int = 16, height: int = 24,
                         width: int = 32, h: float = 1e-5, tol: float = 1e-4, max_coords: Optional[int] = 6,
                         n_classes: int = 5, embedding_dim: int = 512, voxel_size: float = 0.6) -> ad.GradCheckReport:
    """
    Finite-difference check of total loss -> decoders -> semantic splat ->
    adapter -> sparse convs -> embedding on one random scene

    The render is computed once and reused, so only network parameters move.
    """
    config = config or TrainConfig(augment=None)
    gsr = replace(config.gsr, voxel_size=voxel_size)
    rng = np.random.default_rng([seed, 7])
    scene = GaussianScene(
        positions=np.column_stack([rng.uniform(-1.2, 1.2, gaussians), rng.uniform(-0.9, 0.9, gaussians),
                                   rng.uniform(2.0, 3.5, gaussians)]),
        rotations=rng.normal(size=(gaussians, 4)) * [1.0, 0.3, 0.3, 0.3] + [2.0, 0.0, 0.0, 0.0],
        scales=rng.uniform(0.15, 0.4, size=(gaussians, 3)),
        opacities=rng.uniform(0.3, 0.9, gaussians),
        colors=rng.uniform(0.0, 1.0, size=(gaussians, 3)),
        labels=rng.integers(0, n_classes, gaussians),
        has_labels=True,
        scene_id=f"gradcheck_{seed}",
    )
    rot = scene.rotations / np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    scene = scene.replace(rotations=rot)
    focal = 0.9 * width
    cam = Camera(focal, focal, width / 2.0, height / 2.0, width, height, np.eye(4))
    vocab = synth_vocabulary([f"class{i}" for i in range(n_classes)], embedding_dim, seed)

    out = render(scene, cam, channels=("alpha", "label"), config=config.raster, retain=True)
    target = synth_dense_target(out.label_map, vocab, noise=0.1, seed=seed)
    check_config = TrainConfig(seed=seed, gsr=gsr, loss=config.loss, raster=config.raster, augment=None)
    params = init_all_params(check_config, vocab.dim)
    names = list(params)
    leaves = [ad.parameter(params[n], name=n) for n in names]

    def loss_fn(*tensors):
        p = dict(zip(names, tensors))
        semantics = forward_semantics(scene, p, gsr)
        semantic_map = semantic_map_op(out, semantics)
        return compute_losses(semantics, semantic_map, scene.labels, out.label_map, target, vocab, p,
                              config.loss).total_tensor

    report = ad.grad_check(loss_fn, leaves, h=h, tol=tol, max_coords=max_coords, seed=seed)
    logger.info(f"Gradient check seed {seed}: {report}")
    return report
