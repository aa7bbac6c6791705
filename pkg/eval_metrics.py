"""
Text-query inference and mIoU evaluation

Gaussians and rendered pixels are classified by the closest text embedding;
predictions are scored with a confusion matrix under the CSA / OVA / NVA / CDA
protocols.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ccl_losses import ParamMap, decode, text_logits
from errors import EmptySplit, LengthMismatch, MissingLabels, MissingSemantics, UnknownMode
from gsr_net import predict_semantics
from rasterizer import RasterConfig, render
from scene_model import IGNORE_LABEL, GaussianScene, LabelVocabulary, atomic_write
from trainer import Manifest, SceneSet, TrainConfig, load_manifest, load_params, resolve_vocabulary

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PROTOCOLS = ("CSA3D", "CSA2D", "OVA3D", "OVA2D", "NVA", "CDA3D", "CDA2D")


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _classify_rows(feats: np.ndarray, vocab: LabelVocabulary, params: ParamMap, temperature: float) -> np.ndarray:
    """argmax over the full vocabulary; np.argmax keeps the lowest id on ties"""
    if feats.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    logits = text_logits(decode(params, "phi", feats), vocab, temperature).data
    return np.argmax(logits, axis=1)


def classify_gaussians(scene: GaussianScene, vocab: LabelVocabulary, params: ParamMap,
                       temperature: float = 1.0) -> np.ndarray:
    if not scene.has_semantics:
        raise MissingSemantics(f"scene '{scene.scene_id}' has no semantic vectors to classify")
    return _classify_rows(scene.semantics, vocab, params, temperature)


def classify_pixels(semantic_map: np.ndarray, vocab: LabelVocabulary, params: ParamMap, temperature: float = 1.0,
                    alpha: Optional[np.ndarray] = None, alpha_min: float = 0.5) -> np.ndarray:
    """Per-pixel class ids; pixels with alpha below `alpha_min` get the ignore label"""
    semantic_map = np.asarray(semantic_map, dtype=np.float64)
    h, w = semantic_map.shape[:2]
    rows = semantic_map.reshape(h * w, -1)
    out = np.full(h * w, IGNORE_LABEL, dtype=np.uint16)
    covered = np.ones(h * w, bool) if alpha is None else np.asarray(alpha).reshape(-1) >= alpha_min
    out[covered] = _classify_rows(rows[covered], vocab, params, temperature)
    return out.reshape(h, w)


# ---------------------------------------------------------------------------
# Confusion matrix and mIoU
# ---------------------------------------------------------------------------

class ConfusionMatrix:
    """
    Ground truth rows x predicted columns; the extra last column counts
    positions that received no valid prediction
    """

    def __init__(self, n_class: int):
        self.n_class = n_class
        self.matrix = np.zeros((n_class, n_class + 1), dtype=np.int64)

    def generate(self, preds: np.ndarray, labels: np.ndarray) -> np.ndarray:
        preds = np.asarray(preds).reshape(-1).astype(np.int64)
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
        if preds.shape != labels.shape:
            raise LengthMismatch(f"{preds.shape[0]} predictions for {labels.shape[0]} ground-truth entries")
        index = (labels >= 0) & (labels < self.n_class)
        preds = np.where((preds >= 0) & (preds < self.n_class), preds, self.n_class)
        mask = (self.n_class + 1) * labels[index] + preds[index]
        count = np.bincount(mask, minlength=self.n_class * (self.n_class + 1))
        return count.reshape(self.n_class, self.n_class + 1)

    def add_batch(self, preds, labels) -> None:
        self.matrix += self.generate(preds, labels)

    def reset(self) -> None:
        self.matrix[:] = 0

    def counts(self):
        tp = np.diag(self.matrix[:, :self.n_class]).copy()
        fp = self.matrix[:, :self.n_class].sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        return tp, fp, fn


@dataclass
class MetricReport:
    protocol: str
    miou: float
    iou: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    included: np.ndarray
    scored: List[int]
    names: List[str] = field(default_factory=list)
    accuracy: float = float("nan")
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        clean = lambda v: None if not np.isfinite(v) else float(v)
        per_class = []
        for c in range(len(self.iou)):
            per_class.append({
                "id": c,
                "name": self.names[c] if c < len(self.names) else str(c),
                "iou": clean(self.iou[c]),
                "tp": int(self.tp[c]),
                "fp": int(self.fp[c]),
                "fn": int(self.fn[c]),
                "scored": c in self.scored,
            })
        return {
            "protocol": self.protocol,
            "miou": clean(self.miou),
            "accuracy": clean(self.accuracy),
            "per_class": per_class,
            **{k: clean(v) for k, v in self.extra.items()},
        }

    def to_json(self, path) -> None:
        atomic_write(path, json.dumps(self.to_dict(), indent=2).encode("utf-8"))
        logger.info(f"Metric report written to {path}")

    def table(self) -> pd.DataFrame:
        df = pd.DataFrame(self.to_dict()["per_class"]).set_index("id")
        df["iou"] = df["iou"].astype(float)
        return df

    def format_table(self) -> str:
        return self.table().to_string(float_format=lambda v: f"{v:.4f}")


def report_from_confusion(cm: ConfusionMatrix, protocol: str = "", names: Sequence[str] = (),
                          classes: Optional[Sequence[int]] = None) -> MetricReport:
    """
    IoU_c = TP / (TP + FP + FN). A class with neither ground truth nor
    predictions is left out of the mean; one with false predictions only
    scores 0 and stays in. `classes` restricts the mean to a subset of ids.
    """
    tp, fp, fn = cm.counts()
    denom = tp + fp + fn
    iou = np.full(cm.n_class, np.nan)
    iou[denom > 0] = tp[denom > 0] / denom[denom > 0]
    included = denom > 0
    scored = np.flatnonzero(included)
    if classes is not None:
        scored = np.intersect1d(scored, np.asarray(list(classes), dtype=np.int64))
    miou = float(iou[scored].mean()) if scored.size else float("nan")
    support = cm.matrix.sum()
    accuracy = float(tp.sum() / support) if support else float("nan")
    return MetricReport(protocol, miou, iou, tp, fp, fn, included, scored.tolist(), list(names), accuracy)


def without_rows(cm: ConfusionMatrix, classes: Sequence[int]) -> ConfusionMatrix:
    """Copy of `cm` that forgets every position whose ground truth is in `classes`"""
    out = ConfusionMatrix(cm.n_class)
    out.matrix = cm.matrix.copy()
    out.matrix[np.asarray(list(classes), dtype=np.int64)] = 0
    return out


def miou(pred, gt, num_classes: int, names: Sequence[str] = (), protocol: str = "") -> MetricReport:
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape[0] != gt.shape[0]:
        raise LengthMismatch(f"{pred.shape[0]} predictions for {gt.shape[0]} ground-truth entries")
    cm = ConfusionMatrix(num_classes)
    cm.add_batch(pred, gt)
    return report_from_confusion(cm, protocol, names)


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def _split_for(protocol: str) -> str:
    if protocol in ("CSA3D", "CSA2D", "OVA3D", "OVA2D"):
        return "val"
    if protocol == "NVA":
        return "novel_view"
    return "cross_domain"


def _train_label_set(manifest: Manifest) -> np.ndarray:
    labels = set()
    for scene in SceneSet(manifest.split("train")).scenes:
        present = np.unique(scene.labels)
        labels.update(int(v) for v in present if v != IGNORE_LABEL)
    return np.array(sorted(labels), dtype=np.int64)


def score_scenes(scenes: SceneSet, params: ParamMap, vocab: LabelVocabulary, config: TrainConfig,
                 pixel_level: bool) -> ConfusionMatrix:
    """Accumulate predictions of every scene (and view) in manifest order"""
    cm = ConfusionMatrix(vocab.size)
    raster = config.raster or RasterConfig()
    for item, scene in enumerate(scenes.scenes):
        if not scene.has_labels:
            raise MissingLabels(f"scene '{scene.scene_id}' has no ground-truth labels")
        predicted = predict_semantics(scene, params, config.gsr)
        if not pixel_level:
            cm.add_batch(classify_gaussians(predicted, vocab, params, config.loss.temperature), scene.labels)
            continue
        for cam in scenes.cameras[item]:
            out = render(predicted, cam, channels=("semantic", "alpha", "label"), config=raster, retain=False)
            pred = classify_pixels(out.semantic_map, vocab, params, config.loss.temperature, out.alpha,
                                   raster.label_alpha)
            cm.add_batch(pred, out.label_map)
        logger.debug(f"Scored scene '{scene.scene_id}' over {len(scenes.cameras[item])} views")
    return cm


def evaluate(checkpoint, manifest_path, protocol: str, config: Optional[TrainConfig] = None,
             vocab: Optional[LabelVocabulary] = None) -> MetricReport:
    """
    CSA: all classes on val scenes. OVA: same scenes, mean over unseen classes
    only. NVA: held-out views of training scenes. CDA: cross-domain scenes,
    mean over classes that occur in the training scenes.
    """
    if protocol not in PROTOCOLS:
        raise UnknownMode(f"unknown protocol '{protocol}' (expected one of {PROTOCOLS})")
    config = config or TrainConfig()
    manifest = load_manifest(manifest_path)
    vocab = vocab or resolve_vocabulary(manifest)
    params = load_params(checkpoint, config, vocab.dim)

    split = _split_for(protocol)
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"manifest has no '{split}' scenes for protocol {protocol}")

    classes = None
    if protocol.startswith("OVA"):
        if not len(vocab.unseen_ids):
            raise EmptySplit("OVA needs at least one class marked unseen")
        classes = vocab.unseen_ids
    elif protocol.startswith("CDA"):
        classes = _train_label_set(manifest)

    pixel_level = protocol.endswith("2D") or protocol == "NVA"
    cm = score_scenes(SceneSet(entries, config.raster), params, vocab, config, pixel_level)
    report = report_from_confusion(cm, protocol, vocab.names, classes)
    if protocol.startswith("OVA"):
        seen = report_from_confusion(without_rows(cm, vocab.unseen_ids), protocol, vocab.names, vocab.seen_ids)
        report.extra["seen_miou"] = seen.miou
    logger.info(f"{protocol} on {len(entries)} '{split}' entries: mIoU {report.miou:.4f}")
    return report
