# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Procedural RGB-D scenes with exact depth, used for tests and desk training.

A scene is an infinite textured back wall plus a few axis-aligned textured
boxes, seen by pinhole cameras on a wide arc. The angular step between
cameras is calibrated so that consecutive views overlap by about 70%.
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .dataio import (
    CameraView,
    DepthMap,
    FloatArray,
    Image,
    Scene,
    SceneView,
)
from .exceptions import ContractError
from .geometry import overlap_ratio

WALL_Z = 8.0
ARC_RADIUS = 30.0
FOCAL_SCALE = 0.9
MAX_ARC_STEP = 0.4
CALIBRATION_ITERATIONS = 40
OVERLAP_BOUNDS = (0.5, 0.9)


@dataclass(frozen=True)
class SceneSpec:
    n_views: int
    resolution: Tuple[int, int]
    seed: int
    n_boxes: int = 2
    target_overlap: float = 0.7
    scene_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.n_views < 2:
            raise ContractError(f"A scene needs n_views >= 2, got {self.n_views}")
        if min(self.resolution) < 8:
            raise ContractError(f"Resolution must be at least 8x8, got {self.resolution}")
        if not 0.0 < self.target_overlap < 1.0:
            raise ContractError(
                f"target_overlap must be in (0, 1), got {self.target_overlap}"
            )

    @property
    def name(self) -> str:
        return self.scene_id or f"synthetic_{self.seed:04d}"


@dataclass
class Texture:
    """Checkerboard with opaque disc blobs painted on top, in surface units."""

    color_a: FloatArray
    color_b: FloatArray
    cell: float
    blob_centers: FloatArray = field(default_factory=lambda: np.zeros((0, 2)))
    blob_radii: FloatArray = field(default_factory=lambda: np.zeros(0))
    blob_colors: FloatArray = field(default_factory=lambda: np.zeros((0, 3)))

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        extent: float,
        n_blobs: int,
        cell_range: Tuple[float, float],
    ) -> "Texture":
        return cls(
            color_a=_quantized_color(rng),
            color_b=_quantized_color(rng),
            cell=float(rng.uniform(*cell_range)),
            blob_centers=rng.uniform(-extent, extent, size=(n_blobs, 2)),
            blob_radii=rng.uniform(0.5, 1.5, size=n_blobs) * cell_range[0],
            blob_colors=np.stack([_quantized_color(rng) for _ in range(n_blobs)])
            if n_blobs
            else np.zeros((0, 3)),
        )

    def shade(self, s: FloatArray, t: FloatArray) -> FloatArray:
        parity = (np.floor(s / self.cell) + np.floor(t / self.cell)) % 2
        colors = np.where(parity[..., None] == 0, self.color_a, self.color_b)
        for center, radius, color in zip(
            self.blob_centers, self.blob_radii, self.blob_colors
        ):
            inside = (s - center[0]) ** 2 + (t - center[1]) ** 2 < radius**2
            colors = np.where(inside[..., None], color, colors)
        return colors


def _quantized_color(rng: np.random.Generator) -> FloatArray:
    # multiples of 1/255 survive the PNG round trip bit-exactly
    return np.round(rng.uniform(0.1, 0.9, size=3) * 255.0) / 255.0


@dataclass
class Box:
    lo: FloatArray
    hi: FloatArray
    texture: Texture


@dataclass
class SyntheticWorld:
    wall_texture: Texture
    boxes: List[Box] = field(default_factory=list)
    wall_z: float = WALL_Z

    @classmethod
    def random(cls, rng: np.random.Generator, n_boxes: int) -> "SyntheticWorld":
        wall = Texture.random(rng, extent=8.0, n_blobs=24, cell_range=(0.5, 1.0))
        boxes = []
        for _ in range(n_boxes):
            center = np.array(
                [rng.uniform(-1.5, 1.5), rng.uniform(-0.8, 0.8), rng.uniform(4.5, 6.0)]
            )
            half = rng.uniform(0.3, 0.6, size=3)
            boxes.append(
                Box(
                    center - half,
                    center + half,
                    Texture.random(rng, 0.6, n_blobs=3, cell_range=(0.25, 0.5)),
                )
            )
        return cls(wall_texture=wall, boxes=boxes)

    def intersect(
        self, origin: FloatArray, directions: FloatArray
    ) -> Tuple[FloatArray, FloatArray, FloatArray]:
        """Nearest hit along each ray: (t, surface id, face axis).

        Surface id -1 is the wall, k >= 0 is box k, -2 is a miss (t = inf).
        """
        shape = directions.shape[:-1]
        best_t = np.full(shape, np.inf)
        surface = np.full(shape, -2, dtype=int)
        axis = np.full(shape, 2, dtype=int)

        dz = directions[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            wall_t = np.where(dz > 1e-12, (self.wall_z - origin[2]) / dz, np.inf)
        hit = (wall_t > 0) & (wall_t < best_t)
        best_t = np.where(hit, wall_t, best_t)
        surface = np.where(hit, -1, surface)

        for index, box in enumerate(self.boxes):
            near = np.full(shape, -np.inf)
            far = np.full(shape, np.inf)
            near_axis = np.zeros(shape, dtype=int)
            for k in range(3):
                d = directions[..., k]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = (box.lo[k] - origin[k]) / d
                    t2 = (box.hi[k] - origin[k]) / d
                parallel = d == 0
                inside = box.lo[k] <= origin[k] <= box.hi[k]
                t_min = np.where(parallel, -np.inf if inside else np.inf, np.minimum(t1, t2))
                t_max = np.where(parallel, np.inf if inside else -np.inf, np.maximum(t1, t2))
                near_axis = np.where(t_min > near, k, near_axis)
                near = np.maximum(near, t_min)
                far = np.minimum(far, t_max)
            hit = (near <= far) & (near > 1e-9) & (near < best_t)
            best_t = np.where(hit, near, best_t)
            surface = np.where(hit, index, surface)
            axis = np.where(hit, near_axis, axis)
        return best_t, surface, axis

    def shade(
        self, points: FloatArray, surface: FloatArray, axis: FloatArray
    ) -> FloatArray:
        colors = np.zeros(points.shape[:-1] + (3,))
        on_wall = surface == -1
        colors[on_wall] = self.wall_texture.shade(
            points[on_wall][:, 0], points[on_wall][:, 1]
        )
        for index, box in enumerate(self.boxes):
            for k in range(3):
                selected = (surface == index) & (axis == k)
                if not np.any(selected):
                    continue
                s_axis, t_axis = [a for a in range(3) if a != k]
                center = (box.lo + box.hi) / 2.0
                colors[selected] = box.texture.shade(
                    points[selected][:, s_axis] - center[s_axis],
                    points[selected][:, t_axis] - center[t_axis],
                )
        return colors

    def _rays(
        self, cam: CameraView, u: FloatArray, v: FloatArray
    ) -> Tuple[FloatArray, FloatArray]:
        direction_cam = np.stack(
            [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1
        )
        # camera-frame z of the ray direction is 1, so ray t equals depth
        return cam.center, direction_cam @ cam.rotation

    def raycast_depth(self, cam: CameraView, u: FloatArray, v: FloatArray) -> FloatArray:
        """Exact camera-frame depth at (sub-)pixel positions; NaN on a miss."""
        origin, directions = self._rays(cam, np.asarray(u, float), np.asarray(v, float))
        t, _, _ = self.intersect(origin, directions)
        return np.where(np.isfinite(t), t, np.nan)

    def render_depth(self, cam: CameraView) -> DepthMap:
        height, width = cam.image_size
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        depth = self.raycast_depth(cam, u, v)
        return DepthMap(np.nan_to_num(depth, nan=0.0), valid=np.isfinite(depth))

    def render(self, cam: CameraView) -> SceneView:
        height, width = cam.image_size
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        origin, directions = self._rays(cam, u, v)
        t, surface, axis = self.intersect(origin, directions)
        hit = np.isfinite(t)
        points = origin + np.where(hit, t, 0.0)[..., None] * directions
        colors = self.shade(points, surface, axis)
        depth = DepthMap(np.where(hit, t, 0.0), valid=hit)
        return SceneView(image=Image(colors), depth=depth, camera=cam)


def arc_camera(theta: float, resolution: Tuple[int, int]) -> CameraView:
    """Camera on the arc of radius ARC_RADIUS, looking at the arc centre."""
    height, width = resolution
    center = np.array([0.0, 0.0, ARC_RADIUS])
    position = center + ARC_RADIUS * np.array([math.sin(theta), 0.0, -math.cos(theta)])
    rotation = np.array(
        [
            [math.cos(theta), 0.0, math.sin(theta)],
            [0.0, 1.0, 0.0],
            [-math.sin(theta), 0.0, math.cos(theta)],
        ]
    )
    world_to_camera = np.eye(4)
    world_to_camera[:3, :3] = rotation
    world_to_camera[:3, 3] = -rotation @ position
    return CameraView(
        fx=FOCAL_SCALE * width,
        fy=FOCAL_SCALE * width,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        world_to_camera=world_to_camera,
        image_size=(height, width),
    )


def arc_cameras(
    n_views: int, step: float, resolution: Tuple[int, int]
) -> List[CameraView]:
    return [
        arc_camera((i - (n_views - 1) / 2.0) * step, resolution) for i in range(n_views)
    ]


def _consecutive_overlaps(
    world: SyntheticWorld, cameras: List[CameraView]
) -> List[float]:
    depths = [world.render_depth(cam) for cam in cameras]
    return [
        overlap_ratio((depths[i], cameras[i]), (depths[i + 1], cameras[i + 1]))
        for i in range(len(cameras) - 1)
    ]


def calibrate_arc_step(world: SyntheticWorld, spec: SceneSpec) -> float:
    """Bisect the angular step until mean consecutive overlap hits the target."""
    lo, hi = 0.0, MAX_ARC_STEP
    for _ in range(CALIBRATION_ITERATIONS):
        mid = (lo + hi) / 2.0
        overlaps = _consecutive_overlaps(
            world, arc_cameras(spec.n_views, mid, spec.resolution)
        )
        if float(np.mean(overlaps)) > spec.target_overlap:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def build_synthetic_world(
    spec: SceneSpec,
) -> Tuple[SyntheticWorld, List[CameraView]]:
    world = SyntheticWorld.random(np.random.default_rng(spec.seed), spec.n_boxes)
    step = calibrate_arc_step(world, spec)
    return world, arc_cameras(spec.n_views, step, spec.resolution)


def generate_synthetic_scene(spec: SceneSpec) -> Scene:
    """Deterministic textured scene with exact depth and poses."""
    world, cameras = build_synthetic_world(spec)
    views = [world.render(cam) for cam in cameras]

    overlaps = [
        overlap_ratio((views[i].depth, views[i].camera), (views[i + 1].depth, views[i + 1].camera))
        for i in range(len(views) - 1)
    ]
    low, high = OVERLAP_BOUNDS
    if any(not low <= value <= high for value in overlaps):
        warnings.warn(
            f"Synthetic scene '{spec.name}' has consecutive overlaps {np.round(overlaps, 3).tolist()} outside [{low}, {high}]",
            RuntimeWarning,
        )
    return Scene(scene_id=spec.name, views=views)
