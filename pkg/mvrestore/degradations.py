# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy import ndimage

from .dataio import FloatArray, Image, ViewSet
from .exceptions import ContractError

CATMULL_ROM_A = -0.5


@dataclass(frozen=True)
class BlurParams:
    """Distribution of motion-blur kernels: size ~ Normal, intensity ~ Uniform."""

    size_mean: float = 85.0
    size_std: float = 12.75
    intensity_min: float = 0.0
    intensity_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.size_mean > 0:
            raise ContractError(f"size_mean must be positive, got {self.size_mean}")
        if self.size_std < 0:
            raise ContractError(f"size_std must be non-negative, got {self.size_std}")
        if not 0.0 <= self.intensity_min <= self.intensity_max <= 1.0:
            raise ContractError(
                f"Need 0 <= intensity_min <= intensity_max <= 1, got [{self.intensity_min}, {self.intensity_max}]"
            )

    @classmethod
    def preset(cls, name: str) -> "BlurParams":
        try:
            return BLUR_PRESETS[name]
        except KeyError:
            raise ContractError(
                f"Unknown blur preset '{name}', expected one of {sorted(BLUR_PRESETS)}"
            )


BLUR_PRESETS: Dict[str, BlurParams] = {
    "full_scale": BlurParams(85.0, 12.75, 0.0, 1.0),
    "medium": BlurParams(30.0, 10.2, 0.0, 0.4),
    "hard": BlurParams(45.0, 14.85, 0.0, 0.5),
    # full-scale kernel sizes scaled from 640-px to 64-px wide images
    "desk": BlurParams(9.0, 1.35, 0.0, 1.0),
}


@dataclass
class BlurKernel:
    """A normalized, non-negative, odd-sized convolution kernel."""

    weights: FloatArray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ContractError(f"BlurKernel must be square, got {weights.shape}")
        if weights.shape[0] % 2 != 1:
            raise ContractError(f"BlurKernel size must be odd, got {weights.shape[0]}")
        if weights.min() < 0:
            raise ContractError("BlurKernel weights must be non-negative")
        if abs(weights.sum() - 1.0) > 1e-6:
            raise ContractError(
                f"BlurKernel weights must sum to 1, got {weights.sum()}"
            )
        self.weights = weights

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    @classmethod
    def delta(cls, size: int = 1) -> "BlurKernel":
        weights = np.zeros((size, size))
        weights[size // 2, size // 2] = 1.0
        return cls(weights)


@dataclass(frozen=True)
class DeblurTask:
    params: BlurParams


@dataclass(frozen=True)
class SRTask:
    factor: int = 4


DegradationTask = Union[DeblurTask, SRTask]


def view_rng(seed: int, view_index: int) -> np.random.Generator:
    """Independent random stream for one view of a set."""
    return np.random.default_rng(np.random.SeedSequence([seed, view_index]))


def kernel_size_from_draw(raw: float, size_mean: float) -> int:
    """Round a raw size draw to the nearest odd integer in [3, 2*size_mean - 1]."""
    odd = 2 * int(math.floor((raw - 1.0) / 2.0 + 0.5)) + 1
    upper = max(3, 2 * int(round(size_mean)) - 1)
    return int(min(max(odd, 3), upper))


def sample_kernel_size(params: BlurParams, rng: np.random.Generator) -> int:
    return kernel_size_from_draw(
        float(rng.normal(params.size_mean, params.size_std)), params.size_mean
    )


def _motion_trajectory(
    size: int, intensity: float, rng: np.random.Generator
) -> FloatArray:
    n_steps = math.ceil(size * 3)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    turns = rng.normal(0.0, intensity * math.pi / 2.0, size=n_steps)
    turns[0] = 0.0
    headings = heading + np.cumsum(turns)
    steps = np.stack([np.cos(headings), np.sin(headings)], axis=1)
    points = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])

    points -= points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(points, axis=1)))
    target = (size - 3) / 2.0
    if radius > 0:
        points *= target / radius
    return points


def _densify(points: FloatArray, per_segment: int = 4) -> FloatArray:
    fractions = np.arange(per_segment) / per_segment
    starts, ends = points[:-1], points[1:]
    dense = starts[:, None, :] + fractions[None, :, None] * (ends - starts)[:, None, :]
    return np.concatenate([dense.reshape(-1, 2), points[-1:]])


def _splat_bilinear(points: FloatArray, size: int) -> FloatArray:
    grid = np.zeros((size, size))
    centre = (size - 1) / 2.0
    x = points[:, 0] + centre
    y = points[:, 1] + centre
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    for dy, dx, weight in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        rows = np.clip(y0 + dy, 0, size - 1)
        cols = np.clip(x0 + dx, 0, size - 1)
        np.add.at(grid, (rows, cols), weight)
    return grid


def synth_motion_kernel(
    size: int, intensity: float, rng: np.random.Generator
) -> BlurKernel:
    """Rasterize a random-walk camera trajectory into a blur kernel.

    The heading turns by Normal(0, intensity * pi/2) per unit step, so
    intensity 0 gives a straight streak and 1 a wiggly path. The trajectory
    is centred and scaled into the central (size - 2) x (size - 2) window.
    """
    if size < 3 or size % 2 != 1:
        raise ContractError(f"Kernel size must be odd and >= 3, got {size}")
    if not 0.0 <= intensity <= 1.0:
        raise ContractError(f"Blur intensity must be in [0, 1], got {intensity}")
    points = _densify(_motion_trajectory(size, intensity, rng))
    weights = _splat_bilinear(points, size)
    weights = np.maximum(weights, 0.0)
    return BlurKernel(weights / weights.sum())


def draw_blur_kernel(params: BlurParams, rng: np.random.Generator) -> BlurKernel:
    """Draw size, then intensity, then trajectory from one random stream."""
    size = sample_kernel_size(params, rng)
    intensity = float(rng.uniform(params.intensity_min, params.intensity_max))
    return synth_motion_kernel(size, intensity, rng)


def convolve_reflect(pixels: FloatArray, kernel: BlurKernel) -> FloatArray:
    """Per-channel 2-D convolution with reflect padding, without clipping."""
    return np.stack(
        [
            ndimage.convolve(pixels[:, :, c], kernel.weights, mode="reflect")
            for c in range(pixels.shape[2])
        ],
        axis=2,
    )


def apply_blur(image: Image, kernel: BlurKernel) -> Image:
    if kernel.size >= min(image.height, image.width):
        raise ContractError(
            f"Kernel size {kernel.size} must be smaller than image extent {image.height}x{image.width}"
        )
    return Image.clipped(convolve_reflect(image.pixels, kernel))


def _cubic_weight(distance: FloatArray, a: float = CATMULL_ROM_A) -> FloatArray:
    d = np.abs(distance)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((d - 5) * d + 8) * d * a - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int) -> FloatArray:
    """Catmull-Rom resampling matrix (n_out x n_in), half-pixel centred.

    Out-of-range taps are clamped to the border sample.
    """
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for out_index in range(n_out):
        source = (out_index + 0.5) * scale - 0.5
        base = math.floor(source)
        taps = np.arange(base - 1, base + 3)
        weights = _cubic_weight(source - taps)
        np.add.at(matrix[out_index], np.clip(taps, 0, n_in - 1), weights)
    return matrix


def resize_bicubic(pixels: FloatArray, size: Tuple[int, int]) -> FloatArray:
    """Separable bicubic resize of an (h, w, c) array; no clipping."""
    rows = bicubic_matrix(pixels.shape[0], size[0])
    cols = bicubic_matrix(pixels.shape[1], size[1])
    return np.einsum("ij,jkc,lk->ilc", rows, pixels, cols)


def degrade_sr(image: Image, factor: int = 4) -> Image:
    """Bicubic downsample by `factor`, then bicubic upsample back."""
    if factor < 2:
        raise ContractError(f"Super-resolution factor must be >= 2, got {factor}")
    if image.height % factor or image.width % factor:
        raise ContractError(
            f"Image size {image.height}x{image.width} is not divisible by factor {factor}"
        )
    low = resize_bicubic(image.pixels, (image.height // factor, image.width // factor))
    return Image.clipped(resize_bicubic(low, (image.height, image.width)))


def degrade_image(
    image: Image, task: DegradationTask, rng: np.random.Generator
) -> Image:
    if isinstance(task, DeblurTask):
        return apply_blur(image, draw_blur_kernel(task.params, rng))
    return degrade_sr(image, task.factor)


def degrade_viewset(vs: ViewSet, task: DegradationTask, seed: int) -> ViewSet:
    """Degrade every view independently; view i draws from view_rng(seed, i)."""
    images: List[Image] = [
        degrade_image(image, task, view_rng(seed, position))
        for position, image in enumerate(vs.images)
    ]
    return vs.with_images(images)
