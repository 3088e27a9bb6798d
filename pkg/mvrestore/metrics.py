# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .dataio import BoolArray, CameraView, DepthMap, FloatArray, Image, ViewSet
from .exceptions import ContractError, DegenerateFitError, UndefinedMetricError
from .geometry import (
    DEFAULT_OCCLUSION_THRESHOLD,
    compute_correspondences,
    fit_affine,
    nearest_pixel,
    project_points,
    unproject_points,
    warp_patch_affine,
)
from .matcher import HarrisNCCMatcher, Matcher

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DELTA1_THRESHOLD = 1.25
VCONSIS_DISPLAY_SCALE = 100.0
CALIBRATION_NOISE_STD = 0.1
CALIBRATION_TARGET = 0.1
CALIBRATION_SIZE = 64


def _check_same_shape(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise ContractError(f"Image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0, capped at 99 dB."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian window (sigma 1.5).

    Computed per channel, then averaged over channels.
    """
    _check_same_shape(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ContractError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.height}x{a.width}"
        )
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    radius = SSIM_WINDOW // 2
    valid = (slice(radius, -radius), slice(radius, -radius))

    def blur(x: FloatArray) -> FloatArray:
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=radius / SSIM_SIGMA)[valid]

    scores = []
    for channel in range(a.channels):
        x = a.pixels[:, :, channel]
        y = b.pixels[:, :, channel]
        mu_x, mu_y = blur(x), blur(y)
        var_x = blur(x * x) - mu_x**2
        var_y = blur(y * y) - mu_y**2
        cov = blur(x * y) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        scores.append(float(ssim_map.mean()))
    return float(np.mean(scores))


class PerceptualBackend(Protocol):
    def distance(self, a: FloatArray, b: FloatArray) -> float:
        """Non-negative, symmetric distance between equal-size (h, w, c) patches."""
        ...


def _area_downsample(x: FloatArray) -> FloatArray:
    height, width = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:height, :width]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


class RandomProjectionBackend:
    """Deterministic stand-in for a learned perceptual distance.

    Each pyramid level is filtered with seeded zero-mean random projections
    of 5x5xC neighbourhoods. Feature vectors are normalized per location
    and compared by half squared distance (cosine distance for unit
    vectors); the result is averaged over locations and levels and scaled
    by a calibration constant.
    """

    def __init__(
        self,
        n_levels: int = 3,
        n_projections: int = 8,
        neighborhood: int = 5,
        channels: int = 3,
        seed: int = 0,
        eps: float = 0.05,
        scale: Optional[float] = None,
    ) -> None:
        rng = np.random.default_rng(seed)
        weights = rng.normal(size=(n_projections, neighborhood, neighborhood, channels))
        weights -= weights.mean(axis=(1, 2, 3), keepdims=True)
        weights /= np.linalg.norm(weights.reshape(n_projections, -1), axis=1)[
            :, None, None, None
        ]
        self.weights = weights
        self.n_levels = n_levels
        self.channels = channels
        self.eps = eps
        self.scale = 1.0
        self.scale = self.calibrate() if scale is None else scale

    def calibrate(self) -> float:
        """Scale that maps mid-gray vs noisy mid-gray (sigma 0.1, seed 0) to 0.1."""
        size = (CALIBRATION_SIZE, CALIBRATION_SIZE, self.channels)
        gray = np.full(size, 0.5)
        noise = np.random.default_rng(0).normal(0.0, CALIBRATION_NOISE_STD, size=size)
        noisy = np.clip(gray + noise, 0.0, 1.0)
        return CALIBRATION_TARGET / self._raw_distance(gray, noisy)

    def _features(self, x: FloatArray) -> FloatArray:
        maps = []
        for projection in self.weights:
            response = np.zeros(x.shape[:2])
            for channel in range(self.channels):
                response += ndimage.correlate(
                    x[:, :, channel], projection[:, :, channel], mode="reflect"
                )
            maps.append(response)
        features = np.stack(maps, axis=-1)
        norm = np.sqrt(np.sum(features**2, axis=-1, keepdims=True) + self.eps**2)
        return features / norm

    def _raw_distance(self, a: FloatArray, b: FloatArray) -> float:
        levels = []
        for _ in range(self.n_levels):
            diff = self._features(a) - self._features(b)
            levels.append(float(np.mean(np.sum(diff**2, axis=-1)) / 2.0))
            if min(a.shape[0], a.shape[1]) < 4:
                break
            a, b = _area_downsample(a), _area_downsample(b)
        return float(np.mean(levels))

    def _prepare(self, x: FloatArray) -> FloatArray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[2] == 1 and self.channels > 1:
            x = np.repeat(x, self.channels, axis=2)
        if x.shape[2] != self.channels:
            raise ContractError(
                f"Perceptual backend expects {self.channels} channels, got {x.shape[2]}"
            )
        return x

    def distance(self, a: FloatArray, b: FloatArray) -> float:
        a, b = self._prepare(a), self._prepare(b)
        if a.shape != b.shape:
            raise ContractError(f"Patch shapes differ: {a.shape} vs {b.shape}")
        return self.scale * self._raw_distance(a, b)

    def __call__(self, a: FloatArray, b: FloatArray) -> float:
        return self.distance(a, b)


@functools.lru_cache(maxsize=1)
def default_perceptual_backend() -> RandomProjectionBackend:
    return RandomProjectionBackend()


def _require_geometry(gt: ViewSet) -> Tuple[List[DepthMap], List[CameraView]]:
    if gt.depths is None or gt.cameras is None:
        raise ContractError(
            f"Ground-truth set of scene '{gt.scene_id}' needs depths and cameras"
        )
    return gt.depths, gt.cameras


def _ordered_pairs(n_views: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n_views) for j in range(n_views) if i != j]


def visual_consistency_pair(
    restored: ViewSet,
    gt: ViewSet,
    src: int,
    dst: int,
    backend: PerceptualBackend,
    patch: int = 30,
    min_pts: int = 300,
    gt_gate: float = 0.1,
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> List[float]:
    """Distances of every kept patch of view `src` warped into view `dst`."""
    depths, cameras = _require_geometry(gt)
    correspondences = compute_correspondences(
        (depths[src], cameras[src]),
        (depths[dst], cameras[dst]),
        occl_thresh,
        src_index=src,
        dst_index=dst,
    )
    height, width, _ = gt.shape
    distances = []
    for top in range(0, height - patch + 1, patch):
        for left in range(0, width - patch + 1, patch):
            window = (slice(top, top + patch), slice(left, left + patch))
            valid = correspondences.valid[window]
            if int(valid.sum()) < min_pts:
                continue
            v, u = np.nonzero(valid)
            src_points = np.stack([u + left, v + top], axis=1).astype(np.float64)
            dst_points = correspondences.map[window][valid]
            try:
                affine = fit_affine(src_points, dst_points)
            except DegenerateFitError:
                continue
            box = (top, left, patch)
            gt_distance = backend.distance(
                warp_patch_affine(gt.images[dst], box, affine),
                gt.images[src].pixels[window],
            )
            if not gt_distance < gt_gate:
                continue
            distances.append(
                backend.distance(
                    warp_patch_affine(restored.images[dst], box, affine),
                    restored.images[src].pixels[window],
                )
            )
    return distances


def visual_consistency(
    restored: ViewSet,
    gt: ViewSet,
    backend: Optional[PerceptualBackend] = None,
    patch: int = 30,
    min_pts: int = 300,
    gt_gate: float = 0.1,
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> float:
    """Mean perceptual distance of warped corresponding patches over all ordered pairs.

    Args:
        restored (ViewSet): Restored views, aligned with `gt`.
        gt (ViewSet): Ground-truth views with depths and cameras.
        backend (PerceptualBackend): Patch distance; the default backend if None.
        patch (int): Side of the non-overlapping patch grid.
        min_pts (int): Patches with fewer correspondences are discarded.
        gt_gate (float): Patches whose warped ground truth is this far from
            the destination ground truth are discarded.

    Returns:
        float: Unscaled mean distance (reports multiply it by 100).

    Raises:
        UndefinedMetricError: If no patch survives in any pair.
    """
    if len(restored) != len(gt) or restored.shape != gt.shape:
        raise ContractError("Restored and ground-truth sets are not aligned")
    backend = backend or default_perceptual_backend()
    distances: List[float] = []
    for src, dst in _ordered_pairs(len(gt)):
        distances.extend(
            visual_consistency_pair(
                restored, gt, src, dst, backend, patch, min_pts, gt_gate, occl_thresh
            )
        )
    if not distances:
        raise UndefinedMetricError(
            f"Visual consistency undefined for scene '{gt.scene_id}': no patch survived"
        )
    return float(np.mean(distances))


def align_scale_bias(
    pred: FloatArray, gt: FloatArray, mask: BoolArray
) -> Tuple[float, float]:
    """Least-squares (scale, bias) with scale * pred + bias ~ gt over `mask`."""
    if not np.any(mask):
        raise UndefinedMetricError("Cannot align depth: empty validity mask")
    p, g = pred[mask], gt[mask]
    p_centered, g_centered = p - p.mean(), g - g.mean()
    variance = float(np.mean(p_centered * p_centered))
    if variance == 0.0:
        raise DegenerateFitError("Cannot align a constant depth prediction")
    # closed form keeps pred == gt at exactly (1, 0)
    scale = float(np.mean(p_centered * g_centered)) / variance
    return scale, float(g.mean() - scale * p.mean())


def _prediction_arrays(
    pred_depths: Sequence[DepthMap], gt_depths: Sequence[DepthMap], align: bool
) -> List[Tuple[FloatArray, BoolArray]]:
    arrays = []
    for pred, gt in zip(pred_depths, gt_depths):
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise ContractError(
                f"Predicted depth {pred.height}x{pred.width} differs from ground truth {gt.height}x{gt.width}"
            )
        mask = pred.mask & gt.mask
        values = pred.depth
        if align:
            scale, bias = align_scale_bias(values, gt.depth, mask)
            values = scale * values + bias
        arrays.append((values, mask))
    return arrays


def geometric_consistency_pair(
    pred: Tuple[FloatArray, BoolArray],
    pred_dst: Tuple[FloatArray, BoolArray],
    gt_src: Tuple[DepthMap, CameraView],
    gt_dst: Tuple[DepthMap, CameraView],
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> FloatArray:
    """Per-correspondence |disagreement| in metres of one ordered view pair.

    The source prediction is lifted into the destination camera and
    compared with the destination prediction at the corresponding pixel;
    the same comparison on ground truth is subtracted so exact predictions
    score 0.
    """
    (src_values, src_mask), (dst_values, dst_mask) = pred, pred_dst
    correspondences = compute_correspondences(gt_src, gt_dst, occl_thresh)
    height, width = src_values.shape
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)

    points = unproject_points(u, v, src_values, gt_src[1])
    _, _, z_pred, in_front = project_points(points, gt_dst[1])
    z_gt = correspondences.projected_depth

    rows = np.clip(nearest_pixel(np.nan_to_num(correspondences.map[..., 1])), 0, height - 1).astype(int)
    cols = np.clip(nearest_pixel(np.nan_to_num(correspondences.map[..., 0])), 0, width - 1).astype(int)
    usable = correspondences.valid & src_mask & in_front & dst_mask[rows, cols]
    pred_gap = z_pred - dst_values[rows, cols]
    gt_gap = z_gt - gt_dst[0].depth[rows, cols]
    return np.abs(pred_gap - gt_gap)[usable]


def geometric_consistency(
    pred_depths: Sequence[DepthMap],
    gt_depths: Sequence[DepthMap],
    cameras: Sequence[CameraView],
    align: bool = True,
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> float:
    """Mean cross-view depth disagreement in metres over all ordered pairs."""
    if not len(pred_depths) == len(gt_depths) == len(cameras):
        raise ContractError("Predicted depths, ground truth and cameras are not aligned")
    arrays = _prediction_arrays(pred_depths, gt_depths, align)
    differences = [
        geometric_consistency_pair(
            arrays[i],
            arrays[j],
            (gt_depths[i], cameras[i]),
            (gt_depths[j], cameras[j]),
            occl_thresh,
        )
        for i, j in _ordered_pairs(len(pred_depths))
    ]
    pooled = np.concatenate(differences) if differences else np.zeros(0)
    if pooled.size == 0:
        raise UndefinedMetricError("Geometric consistency undefined: no valid correspondences")
    return float(pooled.mean())


def absrel_delta1(pred: DepthMap, gt: DepthMap, align: bool = False) -> Tuple[float, float]:
    """AbsRel and delta1 (percent of pixels with max ratio strictly below 1.25)."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ContractError(
            f"Predicted depth {pred.height}x{pred.width} differs from ground truth {gt.height}x{gt.width}"
        )
    mask = pred.mask & gt.mask
    values = pred.depth
    if align:
        scale, bias = align_scale_bias(values, gt.depth, mask)
        values = scale * values + bias
        mask = mask & (values > 0)
    if not np.any(mask):
        raise UndefinedMetricError("AbsRel/delta1 undefined: empty validity mask")
    p, g = values[mask], gt.depth[mask]
    absrel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    return absrel, 100.0 * float(np.mean(ratio < DELTA1_THRESHOLD))


def count_correspondences(a: Image, b: Image, matcher: Optional[Matcher] = None) -> int:
    _check_same_shape(a, b)
    return int(len((matcher or HarrisNCCMatcher()).match(a, b)))


@dataclass
class MetricEntry:
    """Metric values for one view (views of length 1) or one ordered view pair."""

    kind: str
    views: Tuple[int, ...]
    values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = {"view": 1, "pair": 2}
        if self.kind not in expected:
            raise ContractError(f"Unknown metric entry kind '{self.kind}'")
        if len(self.views) != expected[self.kind]:
            raise ContractError(
                f"A '{self.kind}' entry needs {expected[self.kind]} view indices, got {self.views}"
            )
        self.views = tuple(int(v) for v in self.views)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "views": list(self.views), "values": dict(self.values)}


class MetricReport:
    """Per-view and per-pair metric values; aggregates are their plain means.

    VConsis values are stored multiplied by 100 and AbsRel as a fraction.
    """

    def __init__(
        self,
        task: str,
        scene_id: str,
        entries: Optional[List[MetricEntry]] = None,
        counts: Optional[Dict[str, int]] = None,
    ) -> None:
        self.task = task
        self.scene_id = scene_id
        self.entries: List[MetricEntry] = list(entries or [])
        self.counts: Dict[str, int] = dict(counts or {})

    def __iter__(self) -> Iterator[MetricEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> MetricEntry:
        return self.entries[index]

    def __contains__(self, name: str) -> bool:
        return any(name in entry.values for entry in self.entries)

    def add(self, kind: str, views: Tuple[int, ...], **values: float) -> None:
        self.entries.append(MetricEntry(kind, views, {k: float(v) for k, v in values.items()}))

    def values(self, name: str) -> List[float]:
        return [entry.values[name] for entry in self.entries if name in entry.values]

    def aggregate(self, name: str) -> float:
        values = self.values(name)
        if not values:
            raise UndefinedMetricError(f"No '{name}' values in report for scene '{self.scene_id}'")
        return float(np.mean(values))

    @property
    def aggregates(self) -> Dict[str, float]:
        names = sorted({name for entry in self.entries for name in entry.values})
        return {name: self.aggregate(name) for name in names}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "scene_id": self.scene_id,
            "aggregates": self.aggregates,
            "counts": dict(self.counts),
            "entries": [entry.to_dict() for entry in self.entries],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        try:
            entries = [
                MetricEntry(e["kind"], tuple(e["views"]), dict(e["values"]))
                for e in data["entries"]
            ]
            return cls(data["task"], data["scene_id"], entries, dict(data.get("counts", {})))
        except (KeyError, TypeError) as e:
            raise ContractError(f"Malformed metric report: {e}") from e


@dataclass(frozen=True)
class MetricOptions:
    patch: int = 30
    min_pts: int = 300
    gt_gate: float = 0.1
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD
    align: bool = True
    count_matches: bool = True


def evaluate_images(
    restored: ViewSet,
    gt: ViewSet,
    task: str,
    options: Optional[MetricOptions] = None,
    backend: Optional[PerceptualBackend] = None,
    matcher: Optional[Matcher] = None,
) -> MetricReport:
    """PSNR/SSIM per view, VConsis and correspondence counts per pair."""
    options = options or MetricOptions()
    backend = backend or default_perceptual_backend()
    if len(restored) != len(gt) or restored.shape != gt.shape:
        raise ContractError("Restored and ground-truth sets are not aligned")
    report = MetricReport(task, gt.scene_id)
    for position, view in enumerate(gt.view_indices):
        report.add(
            "view",
            (view,),
            psnr=psnr(restored[position], gt[position]),
            ssim=ssim(restored[position], gt[position]),
        )

    n_patches = 0
    has_geometry = gt.depths is not None and gt.cameras is not None
    for src, dst in _ordered_pairs(len(gt)):
        values: Dict[str, float] = {}
        if has_geometry:
            distances = visual_consistency_pair(
                restored,
                gt,
                src,
                dst,
                backend,
                options.patch,
                options.min_pts,
                options.gt_gate,
                options.occl_thresh,
            )
            n_patches += len(distances)
            if distances:
                values["vconsis"] = VCONSIS_DISPLAY_SCALE * float(np.mean(distances))
        if options.count_matches and src < dst:
            values["n_correspondences"] = count_correspondences(
                restored[src], restored[dst], matcher
            )
        if values:
            report.add("pair", (gt.view_indices[src], gt.view_indices[dst]), **values)
    report.counts = {
        "views": len(gt),
        "pairs": len(_ordered_pairs(len(gt))),
        "vconsis_patches": n_patches,
        "vconsis_pairs": len(report.values("vconsis")),
    }
    return report


def evaluate_depths(
    pred_depths: Sequence[DepthMap],
    gt: ViewSet,
    options: Optional[MetricOptions] = None,
) -> MetricReport:
    """AbsRel/delta1 per view and GConsis per ordered pair."""
    options = options or MetricOptions()
    depths, cameras = _require_geometry(gt)
    if len(pred_depths) != len(gt):
        raise ContractError(f"Got {len(pred_depths)} predicted depths for {len(gt)} views")
    report = MetricReport("depth", gt.scene_id)
    for position, view in enumerate(gt.view_indices):
        absrel, delta1 = absrel_delta1(pred_depths[position], depths[position], options.align)
        report.add("view", (view,), absrel=absrel, delta1=delta1)

    arrays = _prediction_arrays(pred_depths, depths, options.align)
    n_correspondences = 0
    for src, dst in _ordered_pairs(len(gt)):
        differences = geometric_consistency_pair(
            arrays[src],
            arrays[dst],
            (depths[src], cameras[src]),
            (depths[dst], cameras[dst]),
            options.occl_thresh,
        )
        n_correspondences += differences.size
        if differences.size:
            report.add(
                "pair",
                (gt.view_indices[src], gt.view_indices[dst]),
                gconsis=float(differences.mean()),
            )
    report.counts = {
        "views": len(gt),
        "pairs": len(_ordered_pairs(len(gt))),
        "gconsis_correspondences": n_correspondences,
    }
    return report
