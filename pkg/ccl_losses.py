"""
Cross-modal consistency losses

Two decoders lift 16-d semantics into the text-embedding space: phi feeds the
3D-to-text and 2D-to-text cross entropies against vocabulary embeddings, psi
feeds the dense cosine alignment against ingested 2D feature maps.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import DimensionMismatch, IndexOutOfRange, NonFinite, NoValidTargets, ShapeMismatch
from gsr_net import glorot
from scene_model import IGNORE_LABEL, DenseTargetMap, LabelVocabulary

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DECODERS = ("phi", "psi")
NORM_FLOOR = 1e-8

ParamMap = Mapping[str, Union[np.ndarray, Tensor]]


@dataclass
class LossConfig:
    temperature: float = 1.0
    reduction: str = "mean"
    use_3d_text: bool = True
    use_2d_text: bool = True
    use_cosine: bool = True
    decoder_hidden: int = 128

    @classmethod
    def from_settings(cls, settings: Dict) -> "LossConfig":
        return cls(
            temperature=settings["loss.temperature"],
            reduction=settings["loss.reduction"],
            use_3d_text=settings["loss.use_3d_text"],
            use_2d_text=settings["loss.use_2d_text"],
            use_cosine=settings["loss.use_cosine"],
            decoder_hidden=settings["loss.decoder_hidden"],
        )


@dataclass
class LossBreakdown:
    l_3d_text: float
    l_2d_text: float
    l_cosine: float
    total: float
    counts: Dict[str, int] = field(default_factory=dict)
    total_tensor: Optional[Tensor] = field(default=None, repr=False)

    def as_row(self) -> Dict[str, float]:
        return {"l3d": self.l_3d_text, "l2d": self.l_2d_text, "lcos": self.l_cosine, "total": self.total}


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------

def decoder_shapes(semantic_dim: int = 16, hidden: int = 128, embedding_dim: int = 512):
    shapes = {}
    for name in DECODERS:
        shapes[f"{name}.w1"] = (semantic_dim, hidden)
        shapes[f"{name}.b1"] = (hidden,)
        shapes[f"{name}.w2"] = (hidden, embedding_dim)
        shapes[f"{name}.b2"] = (embedding_dim,)
    return shapes


def init_decoders(seed: int, semantic_dim: int = 16, hidden: int = 128, embedding_dim: int = 512) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    params = {}
    for name, shape in decoder_shapes(semantic_dim, hidden, embedding_dim).items():
        params[name] = np.zeros(shape) if len(shape) == 1 else glorot(rng, shape, shape[0], shape[1])
    return params


def _param(params: ParamMap, name: str) -> Tensor:
    value = params[name]
    return value if isinstance(value, Tensor) else ad.constant(value)


def decode(params: ParamMap, decoder: str, feats) -> Tensor:
    """Two-layer rectified MLP: relu(x W1 + b1) W2 + b2"""
    if decoder not in DECODERS:
        raise ShapeMismatch(f"unknown decoder '{decoder}'")
    feats = feats if isinstance(feats, Tensor) else ad.constant(np.asarray(feats, dtype=np.float64))
    w1, b1 = _param(params, f"{decoder}.w1"), _param(params, f"{decoder}.b1")
    w2, b2 = _param(params, f"{decoder}.w2"), _param(params, f"{decoder}.b2")
    if feats.ndim != 2 or feats.shape[1] != w1.shape[0]:
        raise ShapeMismatch(f"{decoder} expects width {w1.shape[0]}", [feats.shape, w1.shape])
    hidden = ad.relu(ad.broadcast_rows(ad.matmul(feats, w1), b1))
    return ad.broadcast_rows(ad.matmul(hidden, w2), b2)


def text_logits(decoded: Tensor, vocab: LabelVocabulary, temperature: float = 1.0,
                class_rows: Optional[np.ndarray] = None) -> Tensor:
    """e_m . z / temperature over the chosen vocabulary rows (all rows by default)"""
    if decoded.shape[1] != vocab.dim:
        raise DimensionMismatch(f"decoder width {decoded.shape[1]} vs embedding width {vocab.dim}")
    rows = np.arange(vocab.size) if class_rows is None else np.asarray(class_rows)
    logits = ad.matmul(decoded, ad.constant(vocab.embeddings[rows].T))
    return logits if temperature == 1.0 else ad.mul(logits, 1.0 / temperature)


# ---------------------------------------------------------------------------
# Terms
# ---------------------------------------------------------------------------

def _reduce(values: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(values)
    if reduction == "sum":
        return ad.sum(values)
    raise ShapeMismatch(f"unknown reduction '{reduction}'")


def _as_rows(feats) -> Tensor:
    if isinstance(feats, Tensor):
        return feats
    feats = np.asarray(feats, dtype=np.float64)
    return ad.constant(feats.reshape(-1, feats.shape[-1]))


def _text_ce(feats: Tensor, labels: np.ndarray, vocab: LabelVocabulary, params: ParamMap,
             config: LossConfig, what: str):
    """Cross entropy over seen classes; ignore- and unseen-labelled rows drop out"""
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if labels.shape[0] != feats.shape[0]:
        raise ShapeMismatch(f"one label per {what}", [feats.shape, labels.shape])
    labelled = labels != IGNORE_LABEL
    if np.any(labels[labelled] >= vocab.size) or np.any(labels < 0):
        raise IndexOutOfRange(f"{what} label outside the {vocab.size}-class vocabulary")

    seen = vocab.seen_ids
    remap = np.full(vocab.size, -1, dtype=np.int64)
    remap[seen] = np.arange(seen.shape[0])
    valid = np.flatnonzero(labelled)
    valid = valid[remap[labels[valid]] >= 0]
    if valid.size == 0:
        raise NoValidTargets(f"no {what} carries a seen, non-ignored label")

    decoded = decode(params, "phi", ad.gather_rows(feats, valid))
    logits = text_logits(decoded, vocab, config.temperature, seen)
    ce = ad.softmax_cross_entropy(logits, remap[labels[valid]])
    return _reduce(ce, config.reduction), int(valid.size)


def loss_3d_to_text(semantics, labels: np.ndarray, vocab: LabelVocabulary, params: ParamMap,
                    config: Optional[LossConfig] = None) -> Tensor:
    loss, _ = _text_ce(_as_rows(semantics), labels, vocab, params, config or LossConfig(), "Gaussian")
    return loss


def loss_2d_to_text(semantic_map, label_map: np.ndarray, vocab: LabelVocabulary, params: ParamMap,
                    config: Optional[LossConfig] = None) -> Tensor:
    loss, _ = _text_ce(_as_rows(semantic_map), label_map, vocab, params, config or LossConfig(), "pixel")
    return loss


def _cosine(semantic_map, target: DenseTargetMap, params: ParamMap, config: LossConfig):
    rows = _as_rows(semantic_map)
    out_dim = np.shape(params["psi.w2"].data if isinstance(params["psi.w2"], Tensor) else params["psi.w2"])[1]
    if target.dim != out_dim:
        raise DimensionMismatch(f"target map width {target.dim} vs psi output width {out_dim}")
    if target.height * target.width != rows.shape[0]:
        raise DimensionMismatch(f"target map {target.height}x{target.width} vs {rows.shape[0]} rendered pixels")

    S = target.data.reshape(-1, target.dim).astype(np.float64)
    candidates = np.flatnonzero(np.linalg.norm(S, axis=1) > NORM_FLOOR)
    if candidates.size == 0:
        return ad.constant(0.0), 0
    decoded = decode(params, "psi", ad.gather_rows(rows, candidates))
    keep = np.flatnonzero(np.linalg.norm(decoded.data, axis=1) > NORM_FLOOR)
    if keep.size == 0:
        return ad.constant(0.0), 0
    if keep.size < candidates.size:
        decoded = ad.gather_rows(decoded, keep)
    cos = ad.cosine_rows(decoded, ad.constant(S[candidates[keep]]))
    return ad.mul(_reduce(cos, config.reduction), -1.0), int(keep.size)


def loss_cosine(semantic_map, target: DenseTargetMap, params: ParamMap,
                config: Optional[LossConfig] = None) -> Tensor:
    """-mean cos(S, psi(M)) over pixels where both vectors are non-degenerate"""
    loss, _ = _cosine(semantic_map, target, params, config or LossConfig())
    return loss


def total_loss(parts: Mapping[str, Union[Tensor, float]], counts: Optional[Dict[str, int]] = None) -> LossBreakdown:
    """Unweighted sum of the three terms"""
    tensors = {k: v if isinstance(v, Tensor) else ad.constant(float(v)) for k, v in parts.items()}
    for key in ("l_3d_text", "l_2d_text", "l_cosine"):
        tensors.setdefault(key, ad.constant(0.0))
    values = {k: t.item() for k, t in tensors.items()}
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        logger.error(f"Non-finite loss terms: {bad}")
        raise NonFinite("loss went non-finite", diagnostics={"terms": values, "counts": counts or {}})

    total = ad.add(ad.add(tensors["l_3d_text"], tensors["l_2d_text"]), tensors["l_cosine"])
    return LossBreakdown(
        l_3d_text=values["l_3d_text"],
        l_2d_text=values["l_2d_text"],
        l_cosine=values["l_cosine"],
        total=total.item(),
        counts=dict(counts or {}),
        total_tensor=total,
    )


def compute_losses(semantics: Tensor, semantic_map: Optional[Tensor], labels: np.ndarray,
                   label_map: Optional[np.ndarray], target: Optional[DenseTargetMap],
                   vocab: LabelVocabulary, params: ParamMap, config: Optional[LossConfig] = None) -> LossBreakdown:
    """
    All enabled terms for one (scene, view) sample

    A term with nothing to supervise (every label ignored or unseen, no target
    map) contributes zero instead of failing the sample.
    """
    config = config or LossConfig()
    parts, counts = {}, {"gaussians": 0, "pixels": 0, "cosine_pixels": 0}

    if config.use_3d_text:
        try:
            parts["l_3d_text"], counts["gaussians"] = _text_ce(semantics, labels, vocab, params, config, "Gaussian")
        except NoValidTargets:
            logger.debug("3D-to-text term has no valid targets; contributing 0")
    if config.use_2d_text and semantic_map is not None and label_map is not None:
        try:
            parts["l_2d_text"], counts["pixels"] = _text_ce(semantic_map, label_map, vocab, params, config, "pixel")
        except NoValidTargets:
            logger.debug("2D-to-text term has no valid targets; contributing 0")
    if config.use_cosine and semantic_map is not None and target is not None:
        parts["l_cosine"], counts["cosine_pixels"] = _cosine(semantic_map, target, params, config)

    return total_loss(parts, counts)
