# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataio import BoolArray, CameraView, DepthMap, FloatArray, Image, Scene
from .exceptions import ContractError, DegenerateFitError

MIN_PROJECTION_DEPTH = 1e-9
DEFAULT_OCCLUSION_THRESHOLD = 0.1
# reprojection of a border pixel may land a rounding error outside the frame
IN_FRAME_TOLERANCE = 1e-6

RGBDView = Tuple[DepthMap, CameraView]


def _rotate(
    rotation: FloatArray, x: FloatArray, y: FloatArray, z: FloatArray
) -> Tuple[FloatArray, FloatArray, FloatArray]:
    # explicit sums keep elementwise results identical for any array size
    return (
        rotation[0, 0] * x + rotation[0, 1] * y + rotation[0, 2] * z,
        rotation[1, 0] * x + rotation[1, 1] * y + rotation[1, 2] * z,
        rotation[2, 0] * x + rotation[2, 1] * y + rotation[2, 2] * z,
    )


def unproject_points(
    u: FloatArray, v: FloatArray, depth: FloatArray, cam: CameraView
) -> FloatArray:
    """Lift pixels with camera-frame depth to world points, shape (..., 3)."""
    xc = (u - cam.cx) / cam.fx * depth
    yc = (v - cam.cy) / cam.fy * depth
    zc = depth
    t = cam.translation
    # world = R^T (x_cam - t)
    wx, wy, wz = _rotate(cam.rotation.T, xc - t[0], yc - t[1], zc - t[2])
    return np.stack([wx, wy, wz], axis=-1)


def project_points(
    points: FloatArray, cam: CameraView
) -> Tuple[FloatArray, FloatArray, FloatArray, BoolArray]:
    """Pinhole projection of world points; returns (u, v, depth, in_front)."""
    t = cam.translation
    xc, yc, zc = _rotate(cam.rotation, points[..., 0], points[..., 1], points[..., 2])
    xc, yc, zc = xc + t[0], yc + t[1], zc + t[2]
    in_front = zc > MIN_PROJECTION_DEPTH
    safe_z = np.where(in_front, zc, 1.0)
    u = cam.fx * (xc / safe_z) + cam.cx
    v = cam.fy * (yc / safe_z) + cam.cy
    return u, v, zc, in_front


def unproject(pixel: Tuple[float, float], depth: float, cam: CameraView) -> FloatArray:
    if not depth > 0:
        raise ContractError(f"Cannot unproject with non-positive depth {depth}")
    point = unproject_points(
        np.array([pixel[0]], dtype=np.float64),
        np.array([pixel[1]], dtype=np.float64),
        np.array([depth], dtype=np.float64),
        cam,
    )
    return point[0]


def project(
    point: Sequence[float], cam: CameraView
) -> Optional[Tuple[float, float, float]]:
    """Project one world point; None when it is not in front of the camera."""
    u, v, depth, in_front = project_points(
        np.asarray(point, dtype=np.float64).reshape(1, 3), cam
    )
    if not in_front[0]:
        return None
    return float(u[0]), float(v[0]), float(depth[0])


def in_frame(u: FloatArray, v: FloatArray, image_size: Tuple[int, int]) -> BoolArray:
    height, width = image_size
    tol = IN_FRAME_TOLERANCE
    return (u >= -tol) & (u <= width - 1 + tol) & (v >= -tol) & (v <= height - 1 + tol)


def nearest_pixel(coord: FloatArray) -> FloatArray:
    return np.floor(coord + 0.5)


@dataclass
class CorrespondenceField:
    """Where each source pixel lands in the destination view.

    `map` holds (u, v) destination coordinates and is NaN wherever `valid`
    is False. `projected_depth` is the destination camera-frame depth of the
    lifted source point (NaN where it does not project).
    """

    src_index: int
    dst_index: int
    map: FloatArray
    valid: BoolArray
    occluded: BoolArray
    projected_depth: FloatArray

    def __post_init__(self) -> None:
        if np.any(self.valid & self.occluded):
            raise ContractError("Correspondence valid and occluded masks overlap")

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def compute_correspondences(
    src: RGBDView,
    dst: RGBDView,
    occl_thresh: float = DEFAULT_OCCLUSION_THRESHOLD,
    src_index: int = 0,
    dst_index: int = 1,
) -> CorrespondenceField:
    src_depth, src_cam = src
    dst_depth, dst_cam = dst
    if (src_depth.height, src_depth.width) != (dst_depth.height, dst_depth.width):
        raise ContractError(
            f"Resolution mismatch: {src_depth.height}x{src_depth.width} vs {dst_depth.height}x{dst_depth.width}"
        )
    height, width = src_depth.height, src_depth.width
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)

    points = unproject_points(u, v, src_depth.depth, src_cam)
    pu, pv, pz, in_front = project_points(points, dst_cam)
    source_ok = src_depth.mask & in_front & in_frame(pu, pv, (height, width))

    rows = np.clip(nearest_pixel(pv), 0, height - 1).astype(int)
    cols = np.clip(nearest_pixel(pu), 0, width - 1).astype(int)
    lands_on_depth = source_ok & dst_depth.mask[rows, cols]
    difference = pz - dst_depth.depth[rows, cols]

    valid = lands_on_depth & (np.abs(difference) < occl_thresh)
    occluded = lands_on_depth & (difference >= occl_thresh)

    coords = np.stack([pu, pv], axis=-1)
    coords[~valid] = np.nan
    projected = np.where(src_depth.mask & in_front, pz, np.nan)
    return CorrespondenceField(
        src_index=src_index,
        dst_index=dst_index,
        map=coords,
        valid=valid,
        occluded=occluded,
        projected_depth=projected,
    )


def overlap_ratio(a: RGBDView, b: RGBDView) -> float:
    """Fraction of a's valid-depth pixels with a non-occluded match in b."""
    n_valid = int(a[0].mask.sum())
    if n_valid == 0:
        return 0.0
    return compute_correspondences(a, b).count / n_valid


def select_from_overlaps(
    overlaps: Callable[[int, int], float],
    n_views: int,
    overlap_range: Tuple[float, float] = (0.6, 0.8),
    list_size: int = 8,
) -> Dict[int, List[int]]:
    lo, hi = overlap_range
    selection: Dict[int, List[int]] = {}
    for anchor in range(n_views):
        candidates: List[int] = []
        for candidate in range(n_views):
            if len(candidates) >= list_size:
                break
            if candidate != anchor and lo <= overlaps(anchor, candidate) <= hi:
                candidates.append(candidate)
        selection[anchor] = candidates
    return selection


def select_view_sets(
    scene: Scene,
    overlap_range: Tuple[float, float] = (0.6, 0.8),
    list_size: int = 8,
) -> Dict[int, List[int]]:
    """For each anchor, the first `list_size` views whose overlap is in range."""
    if len(scene) < 2:
        raise ContractError("View selection needs a scene with at least 2 views")

    def overlap(anchor: int, candidate: int) -> float:
        return overlap_ratio(
            (scene[anchor].depth, scene[anchor].camera),
            (scene[candidate].depth, scene[candidate].camera),
        )

    selection = select_from_overlaps(overlap, len(scene), overlap_range, list_size)
    if not any(selection.values()):
        warnings.warn(
            f"Scene '{scene.scene_id}': no view pair has overlap within [{overlap_range[0]}, {overlap_range[1]}]",
            RuntimeWarning,
        )
    return selection


def select_test_views(
    n_total: int,
    reference: int,
    rng: np.random.Generator,
    n_select: int = 4,
    window: int = 20,
) -> List[int]:
    """Pick `n_select` views at random among the `window` nearest by index."""
    if not 0 <= reference < n_total:
        raise ContractError(f"Reference view {reference} outside [0, {n_total})")
    nearest = sorted(range(n_total), key=lambda i: (abs(i - reference), i))[:window]
    if n_select > len(nearest):
        raise ContractError(
            f"Cannot select {n_select} views from a window of {len(nearest)}"
        )
    chosen = rng.choice(np.asarray(nearest), size=n_select, replace=False)
    return [int(i) for i in chosen]


@dataclass
class Affine2D:
    matrix: FloatArray

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (2, 3):
            raise ContractError(f"Affine2D must be 2x3, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ContractError("Affine2D has non-finite entries")
        self.matrix = matrix

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Affine2D":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    def apply(self, u: FloatArray, v: FloatArray) -> Tuple[FloatArray, FloatArray]:
        m = self.matrix
        return m[0, 0] * u + m[0, 1] * v + m[0, 2], m[1, 0] * u + m[1, 1] * v + m[1, 2]


def fit_affine(src_pts: FloatArray, dst_pts: FloatArray) -> Affine2D:
    """Least-squares affine map taking src (u, v) points onto dst points."""
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ContractError(f"Point sets differ in size: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateFitError(f"Affine fit needs at least 3 points, got {len(src)}")
    design = np.hstack([src, np.ones((len(src), 1))])
    # column scaling keeps the rank test independent of pixel magnitudes
    scale = np.maximum(np.abs(design).max(axis=0), 1.0)
    if np.linalg.matrix_rank(design / scale) < 3:
        raise DegenerateFitError("Affine fit is rank deficient (collinear points)")
    solution, _, _, _ = np.linalg.lstsq(design, dst, rcond=None)
    return Affine2D(solution.T)


def sample_bilinear(pixels: FloatArray, u: FloatArray, v: FloatArray) -> FloatArray:
    """Bilinear lookup of an (h, w, c) array at (u, v); borders are clamped."""
    height, width = pixels.shape[:2]
    u = np.clip(u, 0.0, width - 1.0)
    v = np.clip(v, 0.0, height - 1.0)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = pixels[v0, u0] * (1 - fu) + pixels[v0, u1] * fu
    bottom = pixels[v1, u0] * (1 - fu) + pixels[v1, u1] * fu
    return top * (1 - fv) + bottom * fv


def warp_patch_affine(
    image: Image, patch_box: Tuple[int, int, int], affine: Affine2D
) -> FloatArray:
    """Sample `image` at the affine image of every pixel of a square patch."""
    top, left, size = patch_box
    v, u = np.mgrid[top : top + size, left : left + size].astype(np.float64)
    mu, mv = affine.apply(u, v)
    return sample_bilinear(image.pixels, mu, mv)
