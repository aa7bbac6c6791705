"""
Scene utilities: synthetic rooms, label transfer and geometric augmentation

Also builds the synthetic cameras, vocabularies and dense target maps used
to exercise the pipeline without real captures.
"""

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import EmptyCloud, EmptySpec
from scene_model import (
    IGNORE_LABEL,
    Camera,
    DenseTargetMap,
    GaussianScene,
    LabeledPointCloud,
    LabelVocabulary,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

STUFF_CLASSES = ("floor", "ceiling", "wall", "walls")


@dataclass
class RoomSpec:
    """
    Description of a synthetic room

    `classes` are class names; ids default to their position in the list.
    Names in STUFF_CLASSES become room surfaces, everything else becomes a
    box or ellipsoid object standing on the floor.
    """

    extent: Tuple[float, float, float] = (4.0, 3.0, 2.5)
    classes: List[str] = field(default_factory=lambda: ["floor", "wall", "chair"])
    gaussians_per_class: int = 100
    class_ids: Optional[List[int]] = None
    cloud_density: int = 4
    domain_shift: float = 0.0

    def ids(self) -> List[int]:
        return list(range(len(self.classes))) if self.class_ids is None else list(self.class_ids)


@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.9, 1.1)
    rotate: bool = True
    flip_prob: float = 0.5

    @classmethod
    def from_settings(cls, settings: Dict) -> "AugmentConfig":
        if not settings.get("augment.enabled", True):
            return cls.identity()
        lo, hi = settings["augment.scale_range"]
        return cls(scale_range=(lo, hi), rotate=settings["augment.rotate"], flip_prob=settings["augment.flip_prob"])

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale_range=(1.0, 1.0), rotate=False, flip_prob=0.0)


# ---------------------------------------------------------------------------
# Synthetic rooms
# ---------------------------------------------------------------------------

def class_color(name: str) -> np.ndarray:
    """Stable base colour per class name"""
    rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
    return rng.uniform(0.1, 0.9, size=3)


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


class _Surface:
    """Area-uniform sampler over one class's surface"""

    def __init__(self, name: str, extent: np.ndarray, rng: np.random.Generator):
        self.name = name
        self.extent = extent
        lx, ly, lz = extent
        if name == "floor":
            self.kind = "floor"
        elif name == "ceiling":
            self.kind = "ceiling"
        elif name in ("wall", "walls"):
            self.kind = "walls"
        else:
            self.kind = "box" if rng.random() < 0.5 else "ellipsoid"
            half = rng.uniform(0.15, 0.4, size=3) * np.array([min(lx, ly)] * 2 + [min(lz, 1.6)])
            half = np.minimum(half, extent / 2.0 * 0.9)
            center = np.array([
                rng.uniform(half[0] + 0.05 * lx, lx - half[0] - 0.05 * lx),
                rng.uniform(half[1] + 0.05 * ly, ly - half[1] - 0.05 * ly),
                half[2] + 0.01,
            ])
            self.center, self.half = center, half

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lx, ly, lz = self.extent
        if self.kind in ("floor", "ceiling"):
            z = 0.0 if self.kind == "floor" else lz
            pts = np.column_stack([rng.uniform(0, lx, n), rng.uniform(0, ly, n), np.full(n, z)])
        elif self.kind == "walls":
            areas = np.array([lx * lz, lx * lz, ly * lz, ly * lz])
            which = rng.choice(4, size=n, p=areas / areas.sum())
            u, v = rng.random(n), rng.uniform(0, lz, n)
            pts = np.empty((n, 3))
            pts[:, 2] = v
            pts[:, 0] = np.select([which == 0, which == 1, which == 2], [u * lx, u * lx, 0.0], lx)
            pts[:, 1] = np.select([which == 0, which == 1, which == 2], [0.0, ly, u * ly], u * ly)
        elif self.kind == "ellipsoid":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = self.center + d * self.half
        else:
            hx, hy, hz = self.half
            areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
            face = rng.choice(6, size=n, p=areas / areas.sum())
            local = rng.uniform(-1, 1, size=(n, 3))
            axis = face // 2
            local[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
            pts = self.center + local * self.half
        return pts


def synth_scene(spec: RoomSpec, seed: int, scene_id: str = "synth", domain_tag: str = "train"
                ) -> Tuple[GaussianScene, LabeledPointCloud]:
    """
    Generate a labeled Gaussian room and a denser labeled point cloud of the same surfaces
    """
    extent = np.asarray(spec.extent, dtype=np.float64)
    if not spec.classes:
        raise EmptySpec("room spec lists no classes")
    if extent.shape != (3,) or (extent <= 0).any():
        raise EmptySpec(f"room extent must be three positive numbers, got {spec.extent}")
    if spec.gaussians_per_class < 1:
        raise EmptySpec("gaussians_per_class must be at least 1")

    rng = np.random.default_rng(seed)
    shift = float(spec.domain_shift)
    ids = spec.ids()
    n = spec.gaussians_per_class

    columns = {key: [] for key in ("pos", "rot", "scale", "opacity", "color", "label", "instance")}
    cloud_pts, cloud_labels, cloud_instances = [], [], []

    for idx, (name, class_id) in enumerate(zip(spec.classes, ids)):
        surface = _Surface(name, extent, rng)
        instance = 0 if surface.kind in ("floor", "ceiling", "walls") else idx + 1

        pos = surface.sample(rng, n)
        base = np.clip(class_color(name) + shift * np.array([0.15, -0.1, 0.05]), 0.0, 1.0)
        columns["pos"].append(pos)
        columns["rot"].append(_random_quaternions(rng, n))
        columns["scale"].append(rng.uniform(0.01, 0.03, size=(n, 3)) * (1.0 + shift))
        columns["opacity"].append(rng.uniform(0.6, 0.95, size=n))
        columns["color"].append(np.clip(base + rng.normal(0.0, 0.03, size=(n, 3)), 0.0, 1.0))
        columns["label"].append(np.full(n, class_id))
        columns["instance"].append(np.full(n, instance))

        k = n * max(1, spec.cloud_density)
        cloud_pts.append(surface.sample(rng, k))
        cloud_labels.append(np.full(k, class_id))
        cloud_instances.append(np.full(k, instance))

    scene = GaussianScene(
        positions=np.concatenate(columns["pos"]),
        rotations=np.concatenate(columns["rot"]),
        scales=np.concatenate(columns["scale"]),
        opacities=np.concatenate(columns["opacity"]),
        colors=np.concatenate(columns["color"]),
        labels=np.concatenate(columns["label"]),
        instances=np.concatenate(columns["instance"]),
        scene_id=scene_id,
        domain_tag=domain_tag,
        has_labels=True,
    )
    cloud = LabeledPointCloud(np.concatenate(cloud_pts), np.concatenate(cloud_labels), np.concatenate(cloud_instances))
    logger.info(f"Synthesized scene '{scene_id}': {scene.count} Gaussians, {cloud.count} cloud points")
    return scene, cloud


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at `eye` looking at `target` (x right, y down, z forward)"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


def synth_cameras(extent: Sequence[float], n_views: int, width: int, height: int, seed: int,
                  fov_deg: float = 75.0) -> List[Camera]:
    """Cameras on a ring inside the room, each looking across the room centre"""
    rng = np.random.default_rng(seed)
    lx, ly, lz = (float(v) for v in extent)
    center = np.array([lx / 2.0, ly / 2.0, lz * 0.35])
    radius = 0.4 * min(lx, ly)
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    cameras = []
    for i in range(n_views):
        angle = 2.0 * math.pi * i / max(n_views, 1) + rng.uniform(-0.2, 0.2)
        eye = np.array([center[0] + radius * math.cos(angle),
                        center[1] + radius * math.sin(angle),
                        lz * rng.uniform(0.55, 0.75)])
        target = center + rng.uniform(-0.1, 0.1, size=3)
        cameras.append(Camera(focal, focal, width / 2.0, height / 2.0, width, height, look_at(eye, target)))
    return cameras


def synth_vocabulary(names: Sequence[str], dim: int = 512, seed: int = 0,
                     unseen: Sequence[str] = ()) -> LabelVocabulary:
    """Orthonormal random embeddings, one row per class name"""
    if len(names) > dim:
        raise EmptySpec(f"cannot build {len(names)} orthonormal rows in {dim} dimensions")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, len(names))))
    return LabelVocabulary(list(names), q.T.copy()).with_unseen(unseen)


def synth_dense_target(label_map: np.ndarray, vocab: LabelVocabulary, noise: float = 0.0,
                       seed: int = 0) -> DenseTargetMap:
    """
    Dense 2D target whose pixels carry the embedding of their class

    Ignore pixels get a zero vector, which the cosine loss skips.
    """
    labels = np.asarray(label_map)
    valid = labels != IGNORE_LABEL
    data = np.zeros(labels.shape + (vocab.dim,))
    data[valid] = vocab.embeddings[labels[valid].astype(np.int64)]
    if noise > 0:
        rng = np.random.default_rng(seed)
        data[valid] += noise * rng.normal(size=(int(valid.sum()), vocab.dim))
    return DenseTargetMap(data)


# ---------------------------------------------------------------------------
# Label transfer
# ---------------------------------------------------------------------------

def median_spacing(points: np.ndarray, max_samples: int = 256) -> float:
    """Median nearest-neighbour distance over an evenly spaced sample of points"""
    k = points.shape[0]
    if k < 2:
        return 0.0
    sample_idx = np.unique(np.linspace(0, k - 1, min(k, max_samples)).astype(np.int64))
    nearest = np.empty(sample_idx.shape[0])
    for start in range(0, sample_idx.shape[0], 16):
        rows = sample_idx[start:start + 16]
        d2 = ((points[rows, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(rows.shape[0]), rows] = np.inf
        nearest[start:start + 16] = np.sqrt(d2.min(axis=1))
    return float(np.median(nearest))


class SpatialHash:
    """
    Uniform grid over a point set answering exact nearest-neighbour queries

    Ties resolve to the lowest point index.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self.key_min = keys.min(axis=0)
        self.key_max = keys.max(axis=0)
        unique, inverse = np.unique(keys, axis=0, return_inverse=True)
        order = np.argsort(inverse.reshape(-1), kind="stable")
        bounds = np.searchsorted(inverse.reshape(-1)[order], np.arange(unique.shape[0] + 1))
        self.buckets = {
            tuple(int(v) for v in unique[i]): order[bounds[i]:bounds[i + 1]]
            for i in range(unique.shape[0])
        }

    def _shell(self, center: np.ndarray, r: int):
        if r == 0:
            offsets = np.zeros((1, 3), dtype=np.int64)
        else:
            side = np.arange(-r, r + 1)
            inner = np.arange(-r + 1, r)
            a, b = np.meshgrid(side, side, indexing="ij")
            c, d = np.meshgrid(inner, side, indexing="ij")
            e, f = np.meshgrid(inner, inner, indexing="ij")
            offsets = np.concatenate([
                np.column_stack([np.full(a.size, s), a.ravel(), b.ravel()]) for s in (-r, r)
            ] + [
                np.column_stack([c.ravel(), np.full(c.size, s), d.ravel()]) for s in (-r, r)
            ] + [
                np.column_stack([e.ravel(), f.ravel(), np.full(e.size, s)]) for s in (-r, r)
            ])
        for cell in (offsets + center).tolist():
            bucket = self.buckets.get(tuple(cell))
            if bucket is not None:
                yield bucket

    def _brute_force(self, query: np.ndarray) -> int:
        d2 = ((self.points - query) ** 2).sum(axis=1)
        return int(np.flatnonzero(d2 == d2.min())[0])

    def nearest(self, query: np.ndarray) -> int:
        query = np.asarray(query, dtype=np.float64)
        center = np.floor(query / self.cell).astype(np.int64)
        reach = int(max(np.abs(center - self.key_min).max(), np.abs(center - self.key_max).max()))
        best_d2, best_idx = np.inf, -1
        r = 0
        while True:
            # a shell with more cells than there are buckets costs more than a full scan
            if (2 * r + 1) ** 3 - max(2 * r - 1, 0) ** 3 > len(self.buckets):
                return self._brute_force(query)
            for bucket in self._shell(center, r):
                d2 = ((self.points[bucket] - query) ** 2).sum(axis=1)
                m = d2.min()
                cand = int(bucket[d2 == m].min())
                if m < best_d2 or (m == best_d2 and cand < best_idx):
                    best_d2, best_idx = m, cand
            # everything outside the searched block is at least (r * cell) away
            bound = max(r - 1e-6, 0.0) * self.cell
            if best_idx >= 0 and best_d2 < bound * bound:
                break
            if r >= reach:
                break
            r += 1
        return best_idx


def transfer_labels(scene: GaussianScene, cloud: LabeledPointCloud) -> GaussianScene:
    """
    Give every Gaussian the semantic and instance label of its nearest cloud point
    """
    if cloud.count == 0:
        raise EmptyCloud("label transfer needs a non-empty point cloud")
    points = cloud.points.astype(np.float64)
    spacing = median_spacing(points)
    if spacing <= 0:
        span = float(np.ptp(points, axis=0).max()) if cloud.count > 1 else 1.0
        spacing = max(span / max(cloud.count, 1) ** (1.0 / 3.0), 1e-3)
    grid = SpatialHash(points, 2.0 * spacing)

    nearest = np.array([grid.nearest(p) for p in scene.positions], dtype=np.int64)
    labels = cloud.labels[nearest] if scene.count else np.zeros(0, np.uint16)
    instances = cloud.instances[nearest] if scene.count else np.zeros(0, np.uint32)
    logger.info(f"Transferred labels onto {scene.count} Gaussians from {cloud.count} points "
                f"(grid cell {2.0 * spacing:.4f} m)")
    return scene.with_labels(labels, instances)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b for (w,x,y,z) quaternions, broadcasting over rows"""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotate_scene(scene: GaussianScene, theta: float) -> GaussianScene:
    """Rotate positions and orientations about the gravity (z) axis"""
    c, s = math.cos(theta), math.sin(theta)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    qz = np.array([math.cos(theta / 2.0), 0.0, 0.0, math.sin(theta / 2.0)])
    return scene.replace(
        positions=scene.positions @ Rz.T,
        rotations=quaternion_multiply(qz, scene.rotations),
    )


def flip_scene(scene: GaussianScene, axis: int) -> GaussianScene:
    """
    Mirror along x (axis 0) or y (axis 1)

    The covariance of a mirrored Gaussian is F R S^2 R^T F, realised by the
    rotation F R F, i.e. the quaternion with the other two vector parts negated.
    """
    positions = scene.positions.copy()
    positions[:, axis] = -positions[:, axis]
    sign = np.ones(4)
    sign[1 + (axis + 1) % 3] = -1.0
    sign[1 + (axis + 2) % 3] = -1.0
    return scene.replace(positions=positions, rotations=scene.rotations * sign)


def augment(scene: GaussianScene, seed: int, config: Optional[AugmentConfig] = None) -> GaussianScene:
    """
    Random uniform scaling, rotation about z, then independent x/y mirror flips

    Labels, colours, opacities and semantics are untouched; the random draws
    happen in a fixed order so the result depends only on the seed.
    """
    config = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.scale_range
    u = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    theta = float(rng.uniform(0.0, 2.0 * math.pi)) if config.rotate else 0.0
    flips = rng.random(2) < config.flip_prob

    out = scene
    if u != 1.0:
        out = out.replace(positions=out.positions * u, scales=out.scales * u)
    if theta != 0.0:
        out = rotate_scene(out, theta)
    for axis in (0, 1):
        if flips[axis]:
            out = flip_scene(out, axis)
    logger.debug(f"Augmented '{scene.scene_id}': scale {u:.4f}, theta {theta:.4f}, flips {flips.tolist()}")
    return out
