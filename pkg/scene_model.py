"""
Gaussian scene data model and file formats

Scenes, cameras, vocabularies, labeled point clouds and dense target maps,
plus the binary/text formats they are stored in (SGS1, SPC1, SDM1, SLM1,
camera JSON, vocabulary text, PPM/PGM images).
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from errors import (
    CountMismatch,
    DimensionMismatch,
    InvariantViolation,
    IoFailure,
    LengthMismatch,
    MalformedHeader,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

IGNORE_LABEL = 65535
SEMANTIC_DIM = 16
FORMAT_VERSION = 1

FLAG_SEMANTICS = 1
FLAG_LABELS = 2

SCENE_MAGIC = b"SGS1"
CLOUD_MAGIC = b"SPC1"
DENSE_MAGIC = b"SDM1"
LABEL_MAGIC = b"SLM1"

SCENE_HEADER = struct.Struct("<4sIQQ")
CLOUD_HEADER = struct.Struct("<4sIQ")
DENSE_HEADER = struct.Struct("<4sIII")
LABEL_HEADER = struct.Struct("<4sII")

SCENE_RECORD = np.dtype([
    ("position", "<f4", (3,)),
    ("rotation", "<f4", (4,)),
    ("scale", "<f4", (3,)),
    ("opacity", "<f4"),
    ("color", "<f4", (3,)),
    ("semantic", "<f4", (SEMANTIC_DIM,)),
    ("label", "<u2"),
    ("instance", "<u4"),
])

CLOUD_RECORD = np.dtype([
    ("position", "<f4", (3,)),
    ("label", "<u2"),
    ("instance", "<u4"),
])


def _frozen(array: np.ndarray, dtype, shape: tuple) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True).reshape(shape)
    out.setflags(write=False)
    return out


def atomic_write(path, payload: bytes) -> None:
    """Write bytes through a temporary file so readers never see half a file"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise IoFailure(f"Cannot write {path}: {e}")


def read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IoFailure(f"Cannot read {path}: {e}")


def quaternion_to_matrix(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices (N,3,3) from unit quaternions (N,4) in (w,x,y,z) order"""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_3d(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Sigma = R diag(scale^2) R^T for every Gaussian"""
    R = quaternion_to_matrix(rotations)
    S = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    RS = R * S[:, None, :]
    return RS @ np.transpose(RS, (0, 2, 1))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussian:
    """One Gaussian primitive; the semantic vector has no view-dependent terms"""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    semantic: np.ndarray
    label: int = IGNORE_LABEL
    instance: int = 0


@dataclass(frozen=True)
class GaussianScene:
    """
    An ordered, immutable collection of Gaussians stored column-wise

    Fields are held in float64; files store float32, so a loaded scene saves
    back to the same bytes. `has_semantics` / `has_labels` mirror the file flags.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    semantics: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    instances: Optional[np.ndarray] = None
    scene_id: str = ""
    domain_tag: str = "train"
    has_semantics: bool = False
    has_labels: bool = False

    def __post_init__(self):
        n = int(np.asarray(self.positions).reshape(-1, 3).shape[0]) if np.size(self.positions) else 0
        set_ = lambda name, value: object.__setattr__(self, name, value)
        set_("positions", _frozen(self.positions, np.float64, (n, 3)))
        set_("rotations", _frozen(self.rotations, np.float64, (n, 4)))
        set_("scales", _frozen(self.scales, np.float64, (n, 3)))
        set_("opacities", _frozen(self.opacities, np.float64, (n,)))
        set_("colors", _frozen(self.colors, np.float64, (n, 3)))
        semantics = np.zeros((n, SEMANTIC_DIM)) if self.semantics is None else self.semantics
        labels = np.full(n, IGNORE_LABEL) if self.labels is None else self.labels
        instances = np.zeros(n) if self.instances is None else self.instances
        set_("semantics", _frozen(semantics, np.float64, (n, SEMANTIC_DIM)))
        set_("labels", _frozen(labels, np.uint16, (n,)))
        set_("instances", _frozen(instances, np.uint32, (n,)))

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    def __len__(self) -> int:
        return self.count

    @property
    def flags(self) -> int:
        return (FLAG_SEMANTICS if self.has_semantics else 0) | (FLAG_LABELS if self.has_labels else 0)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
            semantic=self.semantics[i],
            label=int(self.labels[i]),
            instance=int(self.instances[i]),
        )

    def replace(self, **changes) -> "GaussianScene":
        return replace(self, **changes)

    def with_semantics(self, semantics: np.ndarray) -> "GaussianScene":
        return replace(self, semantics=semantics, has_semantics=True)

    def with_labels(self, labels: np.ndarray, instances: Optional[np.ndarray] = None) -> "GaussianScene":
        return replace(
            self,
            labels=labels,
            instances=self.instances if instances is None else instances,
            has_labels=True,
        )

    def permuted(self, order: Sequence[int]) -> "GaussianScene":
        order = np.asarray(order, dtype=np.int64)
        return replace(
            self,
            positions=self.positions[order],
            rotations=self.rotations[order],
            scales=self.scales[order],
            opacities=self.opacities[order],
            colors=self.colors[order],
            semantics=self.semantics[order],
            labels=self.labels[order],
            instances=self.instances[order],
        )

    def attributes(self) -> np.ndarray:
        """Per-Gaussian raw attributes [quaternion(4), color(3), scale(3), opacity(1)]"""
        return np.concatenate([
            self.rotations.astype(np.float64),
            self.colors.astype(np.float64),
            self.scales.astype(np.float64),
            self.opacities.astype(np.float64)[:, None],
        ], axis=1)

    @classmethod
    def empty(cls, scene_id: str = "", domain_tag: str = "train") -> "GaussianScene":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), z, np.zeros(0), z, scene_id=scene_id, domain_tag=domain_tag)

    def validate(self, renormalize: bool = False) -> "GaussianScene":
        """
        Check every field invariant; quaternions within 1e-3 of unit length are
        renormalized when `renormalize` is set, anything further off is an error
        """
        arrays = [self.positions, self.rotations, self.scales, self.opacities, self.colors, self.semantics]
        for arr in arrays:
            bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1) if arr.size else np.zeros(0, bool)
            if bad.any():
                raise InvariantViolation("non-finite field value", int(np.flatnonzero(bad)[0]))

        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        off = np.abs(norms - 1.0)
        if (off > 1e-3).any():
            raise InvariantViolation(f"rotation is not a unit quaternion (norm {norms[off > 1e-3][0]:.6f})",
                                     int(np.flatnonzero(off > 1e-3)[0]))
        scene = self
        if (off > 1e-6).any():
            if not renormalize:
                raise InvariantViolation("rotation norm differs from 1 by more than 1e-6",
                                         int(np.flatnonzero(off > 1e-6)[0]))
            logger.warning(f"Renormalizing {int((off > 1e-6).sum())} quaternion(s) in scene '{self.scene_id}'")
            rot = self.rotations.astype(np.float64)
            rot[off > 1e-6] /= norms[off > 1e-6, None]
            scene = replace(self, rotations=rot)

        checks = [
            (self.scales <= 0, "scale must be strictly positive"),
            ((self.opacities <= 0) | (self.opacities >= 1), "opacity must lie in (0,1)"),
            ((self.colors < 0) | (self.colors > 1), "color must lie in [0,1]"),
        ]
        for mask, message in checks:
            rows = mask.reshape(mask.shape[0], -1).any(axis=1) if mask.size else np.zeros(0, bool)
            if rows.any():
                raise InvariantViolation(message, int(np.flatnonzero(rows)[0]))
        return scene


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform (x right, y down, z forward)"""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "world_to_camera", _frozen(self.world_to_camera, np.float64, (4, 4)))
        self.validate()

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation("camera focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("camera resolution must be at least 1x1")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise InvariantViolation("camera rotation block is not orthonormal")

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            matrix = np.asarray(data["world_to_camera"], dtype=np.float64)
            if matrix.size != 16:
                raise MalformedHeader("world_to_camera must hold 16 numbers")
            return cls(
                fx=float(data["fx"]), fy=float(data["fy"]),
                cx=float(data["cx"]), cy=float(data["cy"]),
                width=int(data["width"]), height=int(data["height"]),
                world_to_camera=matrix.reshape(4, 4),
            )
        except KeyError as e:
            raise MalformedHeader(f"camera file is missing key {e}")


@dataclass(frozen=True)
class LabelVocabulary:
    """Class names with their L2-normalized text embeddings (M x D)"""

    names: List[str]
    embeddings: np.ndarray
    unseen_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(self.names):
            raise DimensionMismatch(f"vocabulary has {len(self.names)} names but embeddings of shape {emb.shape}")
        if len(self.names) < 2:
            raise InvariantViolation("vocabulary needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise InvariantViolation("vocabulary names must be unique")
        norms = np.linalg.norm(emb, axis=1)
        if (norms <= 0).any():
            raise InvariantViolation("zero-length embedding", int(np.flatnonzero(norms <= 0)[0]))
        mask = np.zeros(len(self.names), bool) if self.unseen_mask is None else np.asarray(self.unseen_mask, bool)
        if mask.shape != (len(self.names),):
            raise DimensionMismatch("unseen mask length differs from vocabulary size")
        object.__setattr__(self, "names", list(self.names))
        object.__setattr__(self, "embeddings", _frozen(emb / norms[:, None], np.float64, emb.shape))
        object.__setattr__(self, "unseen_mask", _frozen(mask, bool, mask.shape))

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def seen_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.unseen_mask)

    @property
    def unseen_ids(self) -> np.ndarray:
        return np.flatnonzero(self.unseen_mask)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_unseen(self, unseen_names: Iterable[str]) -> "LabelVocabulary":
        unseen = set(unseen_names)
        mask = np.array([name in unseen for name in self.names], bool)
        return LabelVocabulary(self.names, self.embeddings, mask)


@dataclass(frozen=True)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray
    instances: Optional[np.ndarray] = None

    def __post_init__(self):
        k = int(np.asarray(self.points).reshape(-1, 3).shape[0]) if np.size(self.points) else 0
        labels = np.asarray(self.labels).reshape(-1)
        instances = np.zeros(k) if self.instances is None else np.asarray(self.instances).reshape(-1)
        if labels.shape[0] != k or instances.shape[0] != k:
            raise LengthMismatch(f"point cloud arrays differ in length: {k}, {labels.shape[0]}, {instances.shape[0]}")
        object.__setattr__(self, "points", _frozen(self.points, np.float64, (k, 3)))
        object.__setattr__(self, "labels", _frozen(labels, np.uint16, (k,)))
        object.__setattr__(self, "instances", _frozen(instances, np.uint32, (k,)))

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class DenseTargetMap:
    """Per-pixel target embeddings (H x W x D, float32, row-major)"""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DimensionMismatch(f"dense target map must be H x W x D, got shape {arr.shape}")
        object.__setattr__(self, "data", _frozen(arr, np.float32, arr.shape))

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])

    def check_camera(self, cam: Camera) -> None:
        if (self.height, self.width) != (cam.height, cam.width):
            raise DimensionMismatch(
                f"target map is {self.height}x{self.width} but camera renders {cam.height}x{cam.width}")


# ---------------------------------------------------------------------------
# SGS1 scenes
# ---------------------------------------------------------------------------

def scene_to_bytes(scene: GaussianScene) -> bytes:
    records = np.zeros(scene.count, dtype=SCENE_RECORD)
    records["position"] = scene.positions
    records["rotation"] = scene.rotations
    records["scale"] = scene.scales
    records["opacity"] = scene.opacities
    records["color"] = scene.colors
    records["semantic"] = scene.semantics
    records["label"] = scene.labels
    records["instance"] = scene.instances
    header = SCENE_HEADER.pack(SCENE_MAGIC, FORMAT_VERSION, scene.count, scene.flags)
    return header + records.tobytes()


def scene_from_bytes(payload: bytes, scene_id: str = "", domain_tag: str = "train") -> GaussianScene:
    if len(payload) < SCENE_HEADER.size:
        raise MalformedHeader("scene file is shorter than its header")
    magic, version, count, flags = SCENE_HEADER.unpack_from(payload, 0)
    if magic != SCENE_MAGIC:
        raise MalformedHeader(f"bad scene magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeader(f"unsupported scene format version {version}")
    body = len(payload) - SCENE_HEADER.size
    if body != count * SCENE_RECORD.itemsize:
        raise CountMismatch(
            f"header declares {count} records but file holds {body / SCENE_RECORD.itemsize:.2f}")
    records = np.frombuffer(payload, dtype=SCENE_RECORD, count=count, offset=SCENE_HEADER.size)
    scene = GaussianScene(
        positions=records["position"],
        rotations=records["rotation"],
        scales=records["scale"],
        opacities=records["opacity"],
        colors=records["color"],
        semantics=records["semantic"],
        labels=records["label"],
        instances=records["instance"],
        scene_id=scene_id,
        domain_tag=domain_tag,
        has_semantics=bool(flags & FLAG_SEMANTICS),
        has_labels=bool(flags & FLAG_LABELS),
    )
    return scene.validate(renormalize=True)


def save_scene(scene: GaussianScene, path) -> None:
    atomic_write(path, scene_to_bytes(scene))
    logger.debug(f"Wrote scene '{scene.scene_id}' with {scene.count} Gaussians to {path}")


def load_scene(path, domain_tag: str = "train") -> GaussianScene:
    scene = scene_from_bytes(read_bytes(path), scene_id=Path(path).stem, domain_tag=domain_tag)
    logger.debug(f"Loaded scene {path} ({scene.count} Gaussians)")
    return scene


# ---------------------------------------------------------------------------
# SPC1 point clouds
# ---------------------------------------------------------------------------

def save_point_cloud(cloud: LabeledPointCloud, path) -> None:
    records = np.zeros(cloud.count, dtype=CLOUD_RECORD)
    records["position"] = cloud.points
    records["label"] = cloud.labels
    records["instance"] = cloud.instances
    atomic_write(path, CLOUD_HEADER.pack(CLOUD_MAGIC, FORMAT_VERSION, cloud.count) + records.tobytes())


def load_point_cloud(path) -> LabeledPointCloud:
    payload = read_bytes(path)
    if len(payload) < CLOUD_HEADER.size:
        raise MalformedHeader("point cloud file is shorter than its header")
    magic, version, count = CLOUD_HEADER.unpack_from(payload, 0)
    if magic != CLOUD_MAGIC or version != FORMAT_VERSION:
        raise MalformedHeader(f"bad point cloud header {magic!r} v{version}")
    if len(payload) - CLOUD_HEADER.size != count * CLOUD_RECORD.itemsize:
        raise CountMismatch(f"header declares {count} points but the payload size disagrees")
    records = np.frombuffer(payload, dtype=CLOUD_RECORD, count=count, offset=CLOUD_HEADER.size)
    return LabeledPointCloud(records["position"], records["label"], records["instance"])


# ---------------------------------------------------------------------------
# SDM1 dense maps and SLM1 label maps
# ---------------------------------------------------------------------------

def save_dense_map(target: DenseTargetMap, path) -> None:
    header = DENSE_HEADER.pack(DENSE_MAGIC, target.height, target.width, target.dim)
    atomic_write(path, header + target.data.astype("<f4").tobytes())


def load_dense_map(path) -> DenseTargetMap:
    payload = read_bytes(path)
    if len(payload) < DENSE_HEADER.size:
        raise MalformedHeader("dense map file is shorter than its header")
    magic, h, w, d = DENSE_HEADER.unpack_from(payload, 0)
    if magic != DENSE_MAGIC:
        raise MalformedHeader(f"bad dense map magic {magic!r}")
    if len(payload) - DENSE_HEADER.size != h * w * d * 4:
        raise CountMismatch(f"dense map declares {h}x{w}x{d} values but the payload size disagrees")
    data = np.frombuffer(payload, dtype="<f4", count=h * w * d, offset=DENSE_HEADER.size)
    return DenseTargetMap(data.reshape(h, w, d))


def save_label_map(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    h, w = labels.shape
    atomic_write(path, LABEL_HEADER.pack(LABEL_MAGIC, h, w) + labels.astype("<u2").tobytes())


def load_label_map(path) -> np.ndarray:
    payload = read_bytes(path)
    if len(payload) < LABEL_HEADER.size:
        raise MalformedHeader("label map file is shorter than its header")
    magic, h, w = LABEL_HEADER.unpack_from(payload, 0)
    if magic != LABEL_MAGIC:
        raise MalformedHeader(f"bad label map magic {magic!r}")
    if len(payload) - LABEL_HEADER.size != h * w * 2:
        raise CountMismatch("label map payload size disagrees with its header")
    return np.frombuffer(payload, dtype="<u2", count=h * w, offset=LABEL_HEADER.size).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# Cameras and vocabularies
# ---------------------------------------------------------------------------

def save_camera(cam: Camera, path) -> None:
    atomic_write(path, json.dumps(cam.to_dict(), indent=2).encode("utf-8"))


def load_camera(path) -> Camera:
    try:
        data = json.loads(read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"camera file {path} is not valid JSON: {e}")
    return Camera.from_dict(data)


def save_vocabulary(vocab: LabelVocabulary, path) -> None:
    lines = [f"{vocab.size} {vocab.dim}"]
    for name, row in zip(vocab.names, vocab.embeddings):
        lines.append(name + " " + " ".join(repr(float(v)) for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_vocabulary(path, unseen: Iterable[str] = ()) -> LabelVocabulary:
    text = read_bytes(path).decode("utf-8").splitlines()
    text = [line for line in text if line.strip()]
    if not text:
        raise MalformedHeader(f"vocabulary file {path} is empty")
    try:
        m, d = (int(v) for v in text[0].split())
    except ValueError:
        raise MalformedHeader(f"vocabulary header must be 'M D', got {text[0]!r}")
    if len(text) - 1 != m:
        raise CountMismatch(f"vocabulary declares {m} classes but lists {len(text) - 1}")
    names, rows = [], []
    for i, line in enumerate(text[1:]):
        parts = line.split()
        if len(parts) != d + 1:
            raise DimensionMismatch(f"vocabulary line {i + 2} has {len(parts) - 1} values, expected {d}")
        names.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    vocab = LabelVocabulary(names, np.asarray(rows, dtype=np.float64))
    return vocab.with_unseen(unseen)


# ---------------------------------------------------------------------------
# Image exports
# ---------------------------------------------------------------------------

def save_ppm(color: np.ndarray, path) -> None:
    """Binary P6 image, maxval 255"""
    color = np.asarray(color, dtype=np.float64)
    h, w = color.shape[:2]
    pixels = np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def save_pgm(labels: np.ndarray, path) -> None:
    """Binary P5 label image; the ignore label is written as 255"""
    labels = np.asarray(labels)
    h, w = labels.shape
    pixels = np.where(labels == IGNORE_LABEL, 255, labels).astype(np.uint8)
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def save_label_image(labels: np.ndarray, vocab_size: int, path) -> Path:
    """PGM when every id fits in a byte, otherwise the raw SLM1 format"""
    path = Path(path)
    if vocab_size < 256:
        target = path.with_suffix(".pgm")
        save_pgm(labels, target)
    else:
        target = path.with_suffix(".slm")
        save_label_map(labels, target)
    return target
