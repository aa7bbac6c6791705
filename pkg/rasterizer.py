"""
Gaussian splatting rasterizer

Projects Gaussians with the EWA approximation and alpha-composites colour,
depth, alpha and the 16-channel semantic map front to back. Geometry is frozen,
so the semantic map is linear in the semantic vectors and its backward pass is
an exact weighted scatter.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

import autodiff
from errors import ContribNotRetained, MissingLabels, MissingSemantics, ShapeMismatch
from scene_model import IGNORE_LABEL, SEMANTIC_DIM, Camera, Gaussian, GaussianScene, covariance_3d

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHANNELS = ("color", "semantic", "depth", "alpha", "label")
NEAR_PLANE = 0.01


@dataclass
class RasterConfig:
    cov_dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    t_min: float = 1e-4
    transmittance: bool = True
    label_alpha: float = 0.5
    threads: int = 1
    band_rows: int = 16

    @classmethod
    def from_settings(cls, settings: Dict) -> "RasterConfig":
        return cls(
            cov_dilation=settings["raster.cov_dilation"],
            alpha_min=settings["raster.alpha_min"],
            alpha_max=settings["raster.alpha_max"],
            t_min=settings["raster.t_min"],
            transmittance=settings["raster.transmittance"],
            label_alpha=settings["raster.label_alpha"],
            threads=settings["threads"],
        )

    @classmethod
    def exact(cls) -> "RasterConfig":
        """No dilation, floor, clamp or early stop: plain compositing"""
        return cls(cov_dilation=0.0, alpha_min=0.0, alpha_max=1.0, t_min=0.0)


@dataclass
class Projection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    in_frustum: bool


@dataclass
class Contributions:
    """
    Per-pixel blend weights, pixel-major and front-to-back within a pixel

    `pixel` is the flat index y * width + x.
    """

    pixel: np.ndarray
    gaussian: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return int(self.pixel.shape[0])

    def for_pixel(self, x: int, y: int, width: int):
        sel = self.pixel == y * width + x
        return list(zip(self.gaussian[sel].tolist(), self.weight[sel].tolist()))


@dataclass
class RenderOutput:
    height: int
    width: int
    n_gaussians: int
    alpha: np.ndarray
    final_transmittance: np.ndarray
    color: Optional[np.ndarray] = None
    semantic_map: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    label_map: Optional[np.ndarray] = None
    contrib: Optional[Contributions] = None


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_arrays(positions: np.ndarray, rotations: np.ndarray, scales: np.ndarray, cam: Camera,
                   config: Optional[RasterConfig] = None) -> Dict[str, np.ndarray]:
    """
    Screen-space footprints for many Gaussians at once

    cov2d = J W Sigma W^T J^T + dilation * I with W the world-to-camera rotation
    and J the perspective Jacobian at the mean.
    """
    config = config or RasterConfig()
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    W = cam.rotation
    t = positions @ W.T + cam.translation
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    safe_z = np.where(z > NEAR_PLANE, z, 1.0)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / safe_z
    J[:, 0, 2] = -cam.fx * x / (safe_z * safe_z)
    J[:, 1, 1] = cam.fy / safe_z
    J[:, 1, 2] = -cam.fy * y / (safe_z * safe_z)

    M = J @ W
    sigma = covariance_3d(rotations, scales)
    cov2d = M @ sigma @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += config.cov_dilation
    cov2d[:, 1, 1] += config.cov_dilation

    mean2d = np.column_stack([cam.fx * x / safe_z + cam.cx, cam.fy * y / safe_z + cam.cy])

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0.0))

    in_frustum = (
        (z > NEAR_PLANE) & (det > 0)
        & (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width)
        & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height)
    )
    safe_det = np.where(det > 0, det, 1.0)
    conic = np.column_stack([c / safe_det, -b / safe_det, a / safe_det])
    return {
        "mean2d": mean2d,
        "cov2d": cov2d,
        "conic": conic,
        "depth": z,
        "radius": radius,
        "in_frustum": in_frustum,
    }


def project_gaussian(g: Gaussian, cam: Camera, config: Optional[RasterConfig] = None) -> Projection:
    proj = project_arrays(g.position[None], g.rotation[None], g.scale[None], cam, config)
    return Projection(
        mean2d=proj["mean2d"][0],
        cov2d=proj["cov2d"][0],
        depth=float(proj["depth"][0]),
        in_frustum=bool(proj["in_frustum"][0]),
    )


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

def _splat_pairs(proj: Dict[str, np.ndarray], opacities: np.ndarray, cam: Camera, config: RasterConfig):
    """All (pixel, Gaussian) pairs inside each footprint's 3-sigma box with their alpha"""
    visible = np.flatnonzero(proj["in_frustum"])
    depth = proj["depth"][visible]
    order = visible[np.lexsort((visible, depth))]
    rank = np.empty(opacities.shape[0], dtype=np.int64)
    rank[order] = np.arange(order.shape[0])

    mean, radius = proj["mean2d"][order], proj["radius"][order]
    x0 = np.clip(np.floor(mean[:, 0] - radius), 0, cam.width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(mean[:, 0] + radius), 0, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.floor(mean[:, 1] - radius), 0, cam.height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(mean[:, 1] + radius), 0, cam.height - 1).astype(np.int64)
    box_w = x1 - x0 + 1
    counts = box_w * (y1 - y0 + 1)

    total = int(counts.sum())
    owner = np.repeat(np.arange(order.shape[0]), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[owner] + local % box_w[owner]
    py = y0[owner] + local // box_w[owner]
    gauss = order[owner]

    dx = px + 0.5 - proj["mean2d"][gauss, 0]
    dy = py + 0.5 - proj["mean2d"][gauss, 1]
    conic = proj["conic"][gauss]
    power = -0.5 * (conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy)
    alpha = np.minimum(opacities[gauss] * np.exp(np.minimum(power, 0.0)), config.alpha_max)
    alpha = np.maximum(alpha, 0.0)

    keep = alpha >= config.alpha_min if config.alpha_min > 0 else alpha > 0
    pixel = (py * cam.width + px)[keep]
    gauss, alpha = gauss[keep], alpha[keep]

    sort = np.argsort(pixel * max(order.shape[0], 1) + rank[gauss], kind="stable")
    return pixel[sort], gauss[sort], alpha[sort]


def _composite_band(pixel: np.ndarray, alpha: np.ndarray, T: np.ndarray, config: RasterConfig):
    """Front-to-back blend for one contiguous band of pixels; writes T in place"""
    n = pixel.shape[0]
    weight = np.zeros(n)
    live = np.zeros(n, dtype=bool)
    if n == 0:
        return weight, live
    start = np.r_[0, np.flatnonzero(np.diff(pixel)) + 1]
    seg_len = np.diff(np.r_[start, n])
    slot = np.arange(n) - np.repeat(start, seg_len)
    by_slot = np.argsort(slot, kind="stable")
    bounds = np.searchsorted(slot[by_slot], np.arange(int(slot.max()) + 2))

    for k in range(bounds.shape[0] - 1):
        sel = by_slot[bounds[k]:bounds[k + 1]]
        p = pixel[sel]
        t = T[p]
        if config.transmittance:
            ok = t >= config.t_min
            sel, p, t = sel[ok], p[ok], t[ok]
            weight[sel] = alpha[sel] * t
        else:
            weight[sel] = alpha[sel]
        live[sel] = True
        T[p] = t * (1.0 - alpha[sel])
    return weight, live


def composite(scene: GaussianScene, cam: Camera, config: Optional[RasterConfig] = None):
    """Blend weights for every contributing (pixel, Gaussian) pair plus the final transmittance"""
    config = config or RasterConfig()
    hw = cam.height * cam.width
    T = np.ones(hw)
    if scene.count == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Contributions(empty, empty.copy(), np.zeros(0)), T

    proj = project_arrays(scene.positions, scene.rotations, scene.scales, cam, config)
    pixel, gauss, alpha = _splat_pairs(proj, scene.opacities, cam, config)

    band = max(1, config.band_rows) * cam.width
    edges = np.searchsorted(pixel, np.arange(0, hw + band, band))
    slices = [(int(edges[i]), int(edges[i + 1])) for i in range(edges.shape[0] - 1) if edges[i + 1] > edges[i]]

    def run(bounds):
        lo, hi = bounds
        return _composite_band(pixel[lo:hi], alpha[lo:hi], T, config)

    if config.threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, slices))
    else:
        results = [run(s) for s in slices]

    weight = np.zeros(pixel.shape[0])
    live = np.zeros(pixel.shape[0], dtype=bool)
    for (lo, hi), (w, ok) in zip(slices, results):
        weight[lo:hi] = w
        live[lo:hi] = ok
    return Contributions(pixel[live], gauss[live], weight[live]), T


def blend(contrib: Contributions, values: np.ndarray, n_pixels: int) -> np.ndarray:
    """Sum_i w_i * values_i per pixel, accumulated in contribution order"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    out = np.empty((n_pixels, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(contrib.pixel, weights=contrib.weight * values[contrib.gaussian, c],
                                minlength=n_pixels)
    return out


def _label_from_contrib(contrib: Contributions, labels: np.ndarray, alpha: np.ndarray,
                        config: RasterConfig) -> np.ndarray:
    """Label of the strongest contributor per pixel; ties go to the front-most one"""
    out = np.full(alpha.shape[0], IGNORE_LABEL, dtype=np.uint16)
    if len(contrib):
        start = np.r_[0, np.flatnonzero(np.diff(contrib.pixel)) + 1]
        seg_len = np.diff(np.r_[start, len(contrib)])
        seg_max = np.maximum.reduceat(contrib.weight, start)
        is_max = contrib.weight == np.repeat(seg_max, seg_len)
        candidates = np.flatnonzero(is_max)
        pix, first = np.unique(contrib.pixel[candidates], return_index=True)
        out[pix] = labels[contrib.gaussian[candidates[first]]]
    out[alpha < config.label_alpha] = IGNORE_LABEL
    return out


def render(scene: GaussianScene, cam: Camera, channels: Iterable[str] = ("color", "semantic", "depth", "alpha"),
           config: Optional[RasterConfig] = None, semantics: Optional[np.ndarray] = None,
           retain: bool = True) -> RenderOutput:
    """
    Render the requested channels of a scene from one camera

    `semantics` overrides the scene's own vectors (e.g. freshly predicted ones).
    """
    config = config or RasterConfig()
    channels = set(channels)
    unknown = channels - set(CHANNELS)
    if unknown:
        raise ShapeMismatch(f"unknown render channels {sorted(unknown)}")
    if "semantic" in channels and semantics is None and not scene.has_semantics:
        raise MissingSemantics(f"scene '{scene.scene_id}' carries no semantic vectors")
    if "label" in channels and not scene.has_labels:
        raise MissingLabels(f"scene '{scene.scene_id}' carries no labels")

    h, w = cam.height, cam.width
    contrib, T = composite(scene, cam, config)
    alpha = np.bincount(contrib.pixel, weights=contrib.weight, minlength=h * w)
    out = RenderOutput(
        height=h,
        width=w,
        n_gaussians=scene.count,
        alpha=alpha.reshape(h, w),
        final_transmittance=T.reshape(h, w),
        contrib=contrib if retain else None,
    )
    if "color" in channels:
        out.color = blend(contrib, scene.colors, h * w).reshape(h, w, 3)
    if "semantic" in channels:
        values = scene.semantics if semantics is None else semantics
        out.semantic_map = blend(contrib, values, h * w).reshape(h, w, -1)
    if "depth" in channels:
        proj_depth = (scene.positions @ cam.rotation.T + cam.translation)[:, 2] if scene.count else np.zeros(0)
        summed = blend(contrib, proj_depth, h * w)[:, 0]
        out.depth = np.where(alpha > 0, summed / np.where(alpha > 0, alpha, 1.0), 0.0).reshape(h, w)
    if "label" in channels:
        out.label_map = _label_from_contrib(contrib, scene.labels, alpha, config).reshape(h, w)
    logger.debug(f"Rendered '{scene.scene_id}' at {w}x{h}: {len(contrib)} contributions")
    return out


def rasterize_labels(scene: GaussianScene, cam: Camera, config: Optional[RasterConfig] = None) -> np.ndarray:
    if not scene.has_labels:
        raise MissingLabels(f"scene '{scene.scene_id}' carries no labels")
    return render(scene, cam, channels=("label",), config=config, retain=False).label_map


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def render_backward(out: RenderOutput, grad_semantic_map: np.ndarray) -> np.ndarray:
    """
    ds_i = sum over pixels of w_i(x,y) * dL/dM(x,y), accumulated pixel-major
    """
    if out.contrib is None:
        raise ContribNotRetained("render was called with retain=False; blend weights are gone")
    grad = np.asarray(grad_semantic_map, dtype=np.float64)
    grad = grad.reshape(out.height * out.width, -1)
    contrib = out.contrib
    ds = np.empty((out.n_gaussians, grad.shape[1]))
    for c in range(grad.shape[1]):
        ds[:, c] = np.bincount(contrib.gaussian, weights=contrib.weight * grad[contrib.pixel, c],
                               minlength=out.n_gaussians)
    return ds


def semantic_map_op(out: RenderOutput, semantics: "autodiff.Tensor") -> "autodiff.Tensor":
    """The semantic blend as a graph node: (N x C) vectors -> (H*W x C) pixel rows"""
    if out.contrib is None:
        raise ContribNotRetained("semantic_map_op needs retained contributions")
    if semantics.shape[0] != out.n_gaussians:
        raise ShapeMismatch("semantic rows differ from rendered Gaussian count",
                            [semantics.shape, (out.n_gaussians,)])
    value = blend(out.contrib, semantics.data, out.height * out.width)
    return autodiff.custom("render_semantic", [semantics], value,
                           lambda g: [render_backward(out, g)])
