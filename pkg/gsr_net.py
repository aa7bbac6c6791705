"""
Semantic prediction network

voxelize -> sparse 3D conv stack -> voxel-to-point mapping -> attention adapter,
producing one 16-d semantic vector per Gaussian. Every stage is built from
autodiff ops so the whole pipeline trains end to end.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import (
    AssignOutOfRange,
    ConfigError,
    EmptyScene,
    NonPositiveVoxelSize,
    ShapeMismatch,
    UnknownMode,
)
from scene_model import GaussianScene

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VOXEL_FEATURE_DIM = 8
ATTRIBUTE_DIM = 11
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_TAP = 13

ATTENTION_MODES = ("self", "voxel-set")
MAPPING_MODES = ("nearest", "trilinear")


@dataclass
class GsrConfig:
    voxel_size: float = 0.10
    semantic_dim: int = 16
    conv_channels: Tuple[int, ...] = (32, 32, 16)
    attention: str = "self"
    heads: int = 1
    mapping: str = "nearest"
    use_adapter: bool = True
    adapter_hidden: int = 96

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != 3:
            raise ConfigError(f"gsr.conv_channels needs three widths, got {list(self.conv_channels)}")
        if self.conv_channels[-1] != self.semantic_dim:
            raise ConfigError("the last conv width must equal gsr.semantic_dim")
        if self.heads < 1 or ATTRIBUTE_DIM % self.heads:
            raise ConfigError(f"gsr.heads={self.heads} does not divide the value width {ATTRIBUTE_DIM}")
        if self.attention not in ATTENTION_MODES:
            raise UnknownMode(f"attention mode '{self.attention}' (expected one of {ATTENTION_MODES})")
        if self.mapping not in MAPPING_MODES:
            raise UnknownMode(f"mapping mode '{self.mapping}' (expected one of {MAPPING_MODES})")

    @classmethod
    def from_settings(cls, settings: Dict) -> "GsrConfig":
        return cls(
            voxel_size=settings["gsr.voxel_size"],
            semantic_dim=settings["gsr.semantic_dim"],
            conv_channels=tuple(settings["gsr.conv_channels"]),
            attention=settings["gsr.attention"],
            heads=settings["gsr.heads"],
            mapping=settings["gsr.mapping"],
            use_adapter=settings["gsr.use_adapter"],
            adapter_hidden=settings["gsr.adapter_hidden"],
        )


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

@dataclass
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray
    features: np.ndarray
    assign: np.ndarray
    counts: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @cached_property
    def _keys(self):
        lo = self.coords.min(axis=0) - 2
        span = self.coords.max(axis=0) - lo + 3
        return lo, span, self._encode(self.coords, lo, span)

    @staticmethod
    def _encode(coords: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
        c = coords - lo
        return (c[:, 0] * span[1] + c[:, 1]) * span[2] + c[:, 2]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row of each integer coordinate in the grid, -1 where unoccupied"""
        lo, span, keys = self._keys
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords > lo) & (coords < lo + span - 1), axis=1)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if not inside.any():
            return out
        # np.unique returns lexicographic rows, so the mixed-radix keys are already sorted
        query = self._encode(coords[inside], lo, span)
        pos = np.minimum(np.searchsorted(keys, query), keys.shape[0] - 1)
        hit = keys[pos] == query
        out[np.flatnonzero(inside)[hit]] = pos[hit]
        return out

    @cached_property
    def taps(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per kernel offset: (output rows, input rows) where the neighbour is occupied"""
        rows = np.arange(len(self))
        result = []
        for offset in KERNEL_OFFSETS:
            nb = self.lookup(self.coords + offset)
            ok = nb >= 0
            result.append((rows[ok], nb[ok]))
        return result


def voxelize(scene: GaussianScene, voxel_size: float) -> VoxelGrid:
    """
    Quantise Gaussian means into voxels and aggregate an 8-d feature per voxel:
    [mean colour (3), mean opacity, ln(1 + count), mean scale (3)]
    """
    if not voxel_size > 0:
        raise NonPositiveVoxelSize(f"voxel size must be positive, got {voxel_size}")
    if scene.count == 0:
        raise EmptyScene(f"scene '{scene.scene_id}' has no Gaussians to voxelize")

    cells = np.floor(scene.positions / voxel_size).astype(np.int64)
    coords, assign = np.unique(cells, axis=0, return_inverse=True)
    assign = assign.reshape(-1).astype(np.int64)
    counts = np.bincount(assign, minlength=coords.shape[0])

    values = np.column_stack([scene.colors, scene.opacities, scene.scales])
    # member sums in a content-defined order keep the result independent of Gaussian order
    order = np.lexsort(tuple(values[:, c] for c in reversed(range(values.shape[1]))) + (assign,))
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    sums = np.add.reduceat(values[order], starts, axis=0)
    means = sums / counts[:, None]

    features = np.column_stack([means[:, 0:3], means[:, 3], np.log1p(counts), means[:, 4:7]])
    logger.debug(f"Voxelized {scene.count} Gaussians into {coords.shape[0]} voxels at {voxel_size} m")
    return VoxelGrid(voxel_size=float(voxel_size), coords=coords, features=features, assign=assign, counts=counts)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def param_shapes(config: Optional[GsrConfig] = None) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes of the network, in checkpoint order"""
    config = config or GsrConfig()
    d = config.semantic_dim
    c1, c2, c3 = config.conv_channels
    hidden = config.adapter_hidden
    return {
        "embed.w": (VOXEL_FEATURE_DIM, d),
        "embed.b": (d,),
        "conv1.w": (27, d, c1),
        "conv1.b": (c1,),
        "conv2.w": (27, c1, c2),
        "conv2.b": (c2,),
        "conv3.w": (27, c2, c3),
        "conv3.b": (c3,),
        "adapter.wq": (d, ATTRIBUTE_DIM),
        "adapter.wk": (ATTRIBUTE_DIM, ATTRIBUTE_DIM),
        "adapter.wv": (ATTRIBUTE_DIM, ATTRIBUTE_DIM),
        "adapter.mlp0.w": (ATTRIBUTE_DIM + d, hidden),
        "adapter.mlp0.b": (hidden,),
        "adapter.mlp1.w": (hidden, hidden),
        "adapter.mlp1.b": (hidden,),
        "adapter.mlp2.w": (hidden, d),
        "adapter.mlp2.b": (d,),
    }


def init_params(seed: int, config: Optional[GsrConfig] = None) -> Dict[str, np.ndarray]:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases"""
    rng = np.random.default_rng([seed, 1])
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        elif len(shape) == 3:
            params[name] = glorot(rng, shape, shape[0] * shape[1], shape[0] * shape[2])
        else:
            params[name] = glorot(rng, shape, shape[0], shape[1])
    return params


def zero_params(config: Optional[GsrConfig] = None) -> Dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


def _tensors(params: Mapping[str, Union[np.ndarray, Tensor]]) -> Dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else ad.constant(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Sparse convolution stack
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = ad.matmul(x, w)
    return ad.broadcast_rows(out, b) if b is not None else out


def sparse_conv(h: Tensor, weight: Tensor, bias: Tensor, grid: VoxelGrid) -> Tensor:
    """
    Submanifold 3x3x3 convolution: out[v] = b + sum_k W[k]^T h[v + offset_k],
    evaluated only at occupied voxels and only over occupied neighbours
    """
    if weight.ndim != 3 or weight.shape[0] != 27 or weight.shape[1] != h.shape[1]:
        raise ShapeMismatch("conv kernel must be (27, C_in, C_out)", [h.shape, weight.shape])
    n = len(grid)
    out = ad.matmul(h, ad.select(weight, CENTER_TAP))
    for k, (out_rows, in_rows) in enumerate(grid.taps):
        if k == CENTER_TAP or out_rows.size == 0:
            continue
        contrib = ad.matmul(ad.gather_rows(h, in_rows), ad.select(weight, k))
        out = ad.add(out, ad.scatter_add_rows(contrib, out_rows, n))
    return ad.broadcast_rows(out, bias)


def sparse_forward(grid: VoxelGrid, params: Mapping[str, Union[np.ndarray, Tensor]]) -> Tensor:
    """embed -> conv1 -> conv2 (+ residual) -> conv3, rectified after every conv"""
    p = _tensors(params)
    features = ad.constant(grid.features)
    if features.shape[1] != p["embed.w"].shape[0]:
        raise ShapeMismatch("voxel features do not match the embedding", [features.shape, p["embed.w"].shape])

    h0 = linear(features, p["embed.w"], p["embed.b"])
    h1 = ad.relu(sparse_conv(h0, p["conv1.w"], p["conv1.b"], grid))
    h2 = sparse_conv(h1, p["conv2.w"], p["conv2.b"], grid)
    if h2.shape == h1.shape:
        h2 = ad.add(h2, h1)
    h2 = ad.relu(h2)
    return ad.relu(sparse_conv(h2, p["conv3.w"], p["conv3.b"], grid))


# ---------------------------------------------------------------------------
# Voxel -> point mapping
# ---------------------------------------------------------------------------

def trilinear_weights(grid: VoxelGrid, positions: np.ndarray):
    """(gaussian, voxel, weight) triples over the 8 surrounding voxel centres, renormalised"""
    u = np.asarray(positions, dtype=np.float64) / grid.voxel_size - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    n = u.shape[0]

    gauss, voxel, weight = [], [], []
    for corner in itertools.product((0, 1), repeat=3):
        corner = np.array(corner)
        w = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        rows = grid.lookup(base + corner)
        ok = (rows >= 0) & (w > 0)
        gauss.append(np.flatnonzero(ok))
        voxel.append(rows[ok])
        weight.append(w[ok])
    gauss, voxel, weight = np.concatenate(gauss), np.concatenate(voxel), np.concatenate(weight)
    order = np.argsort(gauss, kind="stable")
    gauss, voxel, weight = gauss[order], voxel[order], weight[order]
    total = np.bincount(gauss, weights=weight, minlength=n)
    return gauss, voxel, weight / total[gauss]


def map_to_points(grid: VoxelGrid, voxel_features: Tensor, scene: GaussianScene, mode: str = "nearest") -> Tensor:
    if voxel_features.shape[0] != len(grid):
        raise ShapeMismatch("one feature row per occupied voxel", [voxel_features.shape, grid.coords.shape])
    if grid.assign.size and (grid.assign.min() < 0 or grid.assign.max() >= len(grid)):
        raise AssignOutOfRange(f"voxel assignment outside [0, {len(grid)})")
    if mode == "nearest":
        return ad.gather_rows(voxel_features, grid.assign)
    if mode == "trilinear":
        gauss, voxel, weight = trilinear_weights(grid, scene.positions)
        picked = ad.scale_rows(ad.gather_rows(voxel_features, voxel), ad.constant(weight))
        return ad.scatter_add_rows(picked, gauss, scene.count)
    raise UnknownMode(f"mapping mode '{mode}' (expected one of {MAPPING_MODES})")


# ---------------------------------------------------------------------------
# Adapter
# ---------------------------------------------------------------------------

def same_voxel_pairs(assign: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Every (i, j) with assign[i] == assign[j], grouped by i"""
    n = assign.shape[0]
    members = np.argsort(assign, kind="stable")
    counts = np.bincount(assign)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    rep = counts[assign]
    pair_i = np.repeat(np.arange(n), rep)
    slot = np.arange(pair_i.shape[0]) - np.repeat(np.cumsum(rep) - rep, rep)
    pair_j = members[starts[assign[pair_i]] + slot]
    return pair_i, pair_j


def _attend(q: Tensor, k: Tensor, v: Tensor, pair_i: np.ndarray, pair_j: np.ndarray, n: int, heads: int) -> Tensor:
    width = v.shape[1] // heads
    outputs = []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        qh, kh, vh = ad.columns(q, lo, hi), ad.columns(k, lo, hi), ad.columns(v, lo, hi)
        scores = ad.sum(ad.mul(ad.gather_rows(qh, pair_i), ad.gather_rows(kh, pair_j)), axis=1)
        weights = ad.segment_softmax(ad.mul(scores, 1.0 / np.sqrt(width)), pair_i, n)
        outputs.append(ad.scatter_add_rows(ad.scale_rows(ad.gather_rows(vh, pair_j), weights), pair_i, n))
    return outputs[0] if heads == 1 else ad.concat(outputs, axis=1)


def adapter_forward(point_feats: Tensor, attrs, params: Mapping[str, Union[np.ndarray, Tensor]],
                    mode: str = "self", grid: Optional[VoxelGrid] = None, heads: int = 1) -> Tensor:
    """
    s_i = MLP(concat(m_i, f_i)) + f_i

    q comes from the point feature f_i, k and v from the raw attributes. In
    "self" mode the attention set is {i} so m_i = v_i; in "voxel-set" mode it
    is every Gaussian sharing i's voxel.
    """
    p = _tensors(params)
    attrs = attrs if isinstance(attrs, Tensor) else ad.constant(attrs)
    if point_feats.ndim != 2 or point_feats.shape[1] != p["adapter.wq"].shape[0]:
        raise ShapeMismatch("point features do not match the query projection",
                            [point_feats.shape, p["adapter.wq"].shape])
    if attrs.shape != (point_feats.shape[0], p["adapter.wk"].shape[0]):
        raise ShapeMismatch("attributes must be (N, 11) alongside the point features",
                            [attrs.shape, point_feats.shape])

    v = ad.matmul(attrs, p["adapter.wv"])
    if mode == "self":
        m = v
    elif mode == "voxel-set":
        if grid is None:
            raise UnknownMode("voxel-set attention needs the voxel grid")
        q = ad.matmul(point_feats, p["adapter.wq"])
        k = ad.matmul(attrs, p["adapter.wk"])
        pair_i, pair_j = same_voxel_pairs(grid.assign)
        m = _attend(q, k, v, pair_i, pair_j, point_feats.shape[0], heads)
    else:
        raise UnknownMode(f"attention mode '{mode}' (expected one of {ATTENTION_MODES})")

    x = ad.concat([m, point_feats], axis=1)
    x = ad.relu(linear(x, p["adapter.mlp0.w"], p["adapter.mlp0.b"]))
    x = ad.relu(linear(x, p["adapter.mlp1.w"], p["adapter.mlp1.b"]))
    x = linear(x, p["adapter.mlp2.w"], p["adapter.mlp2.b"])
    return ad.add(x, point_feats)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def forward_semantics(scene: GaussianScene, params: Mapping[str, Union[np.ndarray, Tensor]],
                      config: Optional[GsrConfig] = None) -> Tensor:
    """Differentiable s_i for every Gaussian of the scene (N x 16)"""
    config = config or GsrConfig()
    grid = voxelize(scene, config.voxel_size)
    voxel_feats = sparse_forward(grid, params)
    point_feats = map_to_points(grid, voxel_feats, scene, config.mapping)
    if not config.use_adapter:
        return point_feats
    return adapter_forward(point_feats, scene.attributes(), params, config.attention, grid, config.heads)


def predict_semantics(scene: GaussianScene, params: Mapping[str, Union[np.ndarray, Tensor]],
                      config: Optional[GsrConfig] = None) -> GaussianScene:
    if scene.count == 0:
        raise EmptyScene(f"scene '{scene.scene_id}' has no Gaussians")
    plain = {k: v.data if isinstance(v, Tensor) else v for k, v in params.items()}
    semantics = forward_semantics(scene, plain, config).data
    return scene.with_semantics(semantics)
