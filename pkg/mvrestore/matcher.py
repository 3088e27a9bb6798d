# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Small corner matcher used to count correspondences between two images."""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .dataio import FloatArray, Image
from .exceptions import ContractError

IntArray = NDArray[np.int64]


class Matcher(Protocol):
    def match(self, a: Image, b: Image) -> IntArray:
        """Matched pixel pairs as rows (u_a, v_a, u_b, v_b)."""
        ...


def _gray(image: Image) -> FloatArray:
    return image.pixels.mean(axis=2)


def _nearest_of_best(
    ncc: FloatArray, src: IntArray, dst: IntArray, tolerance: float
) -> IntArray:
    """Per row, the column of highest NCC; ties go to the nearest dst corner."""
    tied = ncc >= ncc.max(axis=1, keepdims=True) - tolerance
    spatial = np.linalg.norm((src[:, None, :] - dst[None, :, :]).astype(float), axis=2)
    return np.argmin(np.where(tied, spatial, np.inf), axis=1).astype(np.int64)


@dataclass(frozen=True)
class HarrisNCCMatcher:
    """Harris corners matched by normalized cross-correlation.

    A match needs the ratio test on NCC distance (1 - ncc), mutual best
    agreement and NCC >= min_ncc. Candidates whose NCC ties the best within
    tie_tolerance are resolved to the spatially nearest corner, and a best NCC
    of 1 passes without the ratio test, so repeating texture still matches.
    """

    max_corners: int = 512
    window: int = 9
    ratio: float = 0.9
    min_ncc: float = 0.8
    harris_k: float = 0.04
    sigma: float = 1.5
    tie_tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 != 1:
            raise ContractError(f"Matcher window must be odd and >= 3, got {self.window}")
        if self.max_corners < 1:
            raise ContractError(f"max_corners must be >= 1, got {self.max_corners}")

    def response(self, gray: FloatArray) -> FloatArray:
        ix = ndimage.sobel(gray, axis=1, mode="reflect")
        iy = ndimage.sobel(gray, axis=0, mode="reflect")
        sxx = ndimage.gaussian_filter(ix * ix, self.sigma)
        syy = ndimage.gaussian_filter(iy * iy, self.sigma)
        sxy = ndimage.gaussian_filter(ix * iy, self.sigma)
        return sxx * syy - sxy * sxy - self.harris_k * (sxx + syy) ** 2

    def detect_corners(self, image: Image) -> IntArray:
        """Up to max_corners (row, col) corners, strongest first."""
        gray = _gray(image)
        r = self.response(gray)
        peaks = (r == ndimage.maximum_filter(r, size=3, mode="constant")) & (r > 1e-12)
        half = self.window // 2
        peaks[:half] = False
        peaks[-half:] = False
        peaks[:, :half] = False
        peaks[:, -half:] = False
        rows, cols = np.nonzero(peaks)
        order = np.argsort(-r[rows, cols], kind="stable")
        corners = np.stack([rows[order], cols[order]], axis=1)
        descriptors = self._patches(gray, corners)
        textured = descriptors.std(axis=1) > 1e-6
        return corners[textured][: self.max_corners].astype(np.int64)

    def _patches(self, gray: FloatArray, corners: IntArray) -> FloatArray:
        half = self.window // 2
        offsets = np.arange(-half, half + 1)
        rows = corners[:, 0, None, None] + offsets[None, :, None]
        cols = corners[:, 1, None, None] + offsets[None, None, :]
        return gray[rows, cols].reshape(len(corners), self.window * self.window)

    def describe(self, image: Image, corners: IntArray) -> FloatArray:
        patches = self._patches(_gray(image), corners)
        patches = patches - patches.mean(axis=1, keepdims=True)
        return patches / np.linalg.norm(patches, axis=1, keepdims=True)

    def match(self, a: Image, b: Image) -> IntArray:
        if a.shape != b.shape:
            raise ContractError(f"Cannot match images of shapes {a.shape} and {b.shape}")
        corners_a = self.detect_corners(a)
        corners_b = self.detect_corners(b)
        if len(corners_a) == 0 or len(corners_b) == 0:
            return np.zeros((0, 4), dtype=np.int64)

        ncc = self.describe(a, corners_a) @ self.describe(b, corners_b).T
        distance = 1.0 - ncc
        best_b = _nearest_of_best(ncc, corners_a, corners_b, self.tie_tolerance)
        best_a = _nearest_of_best(ncc.T, corners_b, corners_a, self.tie_tolerance)
        rows = np.arange(len(corners_a))
        best_distance = distance[rows, best_b]
        if distance.shape[1] > 1:
            second_distance = np.partition(distance, 1, axis=1)[:, 1]
            passes_ratio = (best_distance < self.ratio * second_distance) | (
                best_distance <= self.tie_tolerance
            )
        else:
            passes_ratio = np.ones(len(corners_a), dtype=bool)
        mutual = best_a[best_b] == rows
        keep = passes_ratio & mutual & (ncc[rows, best_b] >= self.min_ncc)

        matched_a = corners_a[keep]
        matched_b = corners_b[best_b[keep]]
        return np.stack(
            [matched_a[:, 1], matched_a[:, 0], matched_b[:, 1], matched_b[:, 0]], axis=1
        ).astype(np.int64)

