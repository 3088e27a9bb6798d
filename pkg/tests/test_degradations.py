# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from typing import Callable

import numpy as np
import pytest

from mvrestore import (
    BlurKernel,
    BlurParams,
    ContractError,
    DeblurTask,
    Image,
    Scene,
    SRTask,
    ViewSet,
    apply_blur,
    degrade_sr,
    degrade_viewset,
    resize_bicubic,
    synth_motion_kernel,
)
from mvrestore.degradations import (
    bicubic_matrix,
    convolve_reflect,
    draw_blur_kernel,
    kernel_size_from_draw,
    sample_kernel_size,
    view_rng,
)


def test_presets() -> None:
    assert BlurParams.preset("full_scale") == BlurParams(85.0, 12.75, 0.0, 1.0)
    assert BlurParams.preset("medium").intensity_max == 0.4
    assert BlurParams.preset("hard").size_mean == 45.0
    with pytest.raises(ContractError, match="Unknown blur preset 'soft'"):
        BlurParams.preset("soft")


def test_blur_params_validation() -> None:
    with pytest.raises(ContractError, match="intensity"):
        BlurParams(9.0, 1.0, 0.6, 0.4)
    with pytest.raises(ContractError, match="size_std"):
        BlurParams(9.0, -1.0)


@pytest.mark.parametrize(
    "raw, expected",
    [(85.0, 85), (86.2, 87), (85.9, 85), (0.2, 3), (-40.0, 3), (500.0, 169)],
)
def test_kernel_size_rounding(raw: float, expected: int) -> None:
    assert kernel_size_from_draw(raw, 85.0) == expected


def test_kernel_size_distribution() -> None:
    rng = np.random.default_rng(0)
    params = BlurParams.preset("full_scale")
    sizes = np.array([sample_kernel_size(params, rng) for _ in range(100_000)])

    assert abs(sizes.mean() - 85.0) < 1.0
    assert np.all(sizes % 2 == 1)
    assert sizes.min() >= 3


@pytest.mark.parametrize("size", [3, 9, 21])
@pytest.mark.parametrize("intensity", [0.0, 0.5, 1.0])
def test_kernels_are_normalized(size: int, intensity: float) -> None:
    kernel = synth_motion_kernel(size, intensity, np.random.default_rng(size))

    assert kernel.size == size
    assert abs(kernel.weights.sum() - 1.0) < 1e-9
    assert kernel.weights.min() >= 0.0
    # the outer ring stays empty
    ring = np.concatenate(
        [kernel.weights[0], kernel.weights[-1], kernel.weights[:, 0], kernel.weights[:, -1]]
    )
    assert ring.max() < 1e-9


def test_size_three_kernel_is_delta() -> None:
    kernel = synth_motion_kernel(3, 1.0, np.random.default_rng(0))
    assert np.array_equal(kernel.weights, BlurKernel.delta(3).weights)


def test_zero_intensity_gives_a_straight_streak() -> None:
    kernel = synth_motion_kernel(21, 0.0, np.random.default_rng(5))
    rows, cols = np.nonzero(kernel.weights)
    weights = kernel.weights[rows, cols]
    points = np.stack([cols, rows], axis=1).astype(float)
    centre = np.average(points, axis=0, weights=weights)
    covariance = np.cov((points - centre).T, aweights=weights)
    direction = np.linalg.eigh(covariance)[1][:, -1]
    offsets = points - centre
    residual = np.abs(offsets[:, 0] * direction[1] - offsets[:, 1] * direction[0])

    assert residual.max() < 1.5


def test_kernel_validation() -> None:
    with pytest.raises(ContractError, match="odd"):
        synth_motion_kernel(4, 0.5, np.random.default_rng(0))
    with pytest.raises(ContractError, match="intensity"):
        synth_motion_kernel(5, 1.5, np.random.default_rng(0))
    with pytest.raises(ContractError, match="sum to 1"):
        BlurKernel(np.ones((3, 3)))


def test_draw_is_reproducible() -> None:
    params = BlurParams.preset("desk")
    a = draw_blur_kernel(params, view_rng(3, 1))
    b = draw_blur_kernel(params, view_rng(3, 1))
    c = draw_blur_kernel(params, view_rng(3, 2))

    assert np.array_equal(a.weights, b.weights)
    assert a.weights.shape != c.weights.shape or not np.array_equal(a.weights, c.weights)


def test_delta_kernel_is_identity(random_image: Callable[..., Image]) -> None:
    image = random_image()
    assert np.array_equal(apply_blur(image, BlurKernel.delta(1)).pixels, image.pixels)


def test_blur_preserves_constant_image() -> None:
    image = Image(np.full((24, 32, 3), 0.3))
    kernel = synth_motion_kernel(9, 0.7, np.random.default_rng(1))
    assert np.allclose(apply_blur(image, kernel).pixels, 0.3, atol=1e-12)


def test_blur_preserves_mean_with_symmetric_kernel(random_image: Callable[..., Image]) -> None:
    image = random_image()
    box = BlurKernel(np.full((3, 3), 1.0 / 9.0))
    # half-sample reflection counts every pixel exactly nine times
    assert abs(convolve_reflect(image.pixels, box).mean() - image.pixels.mean()) < 1e-12


def test_blur_is_linear(random_image: Callable[..., Image]) -> None:
    a, b = random_image(), random_image()
    kernel = synth_motion_kernel(7, 0.5, np.random.default_rng(2))
    mix = Image(0.3 * a.pixels + 0.7 * b.pixels)

    expected = 0.3 * apply_blur(a, kernel).pixels + 0.7 * apply_blur(b, kernel).pixels
    assert np.allclose(apply_blur(mix, kernel).pixels, expected, atol=1e-12)


def test_kernel_must_fit_image(random_image: Callable[..., Image]) -> None:
    kernel = synth_motion_kernel(25, 0.5, np.random.default_rng(0))
    with pytest.raises(ContractError, match="smaller than image"):
        apply_blur(random_image(24, 32), kernel)


def test_bicubic_matrix_rows_sum_to_one() -> None:
    for n_in, n_out in [(64, 16), (16, 64), (10, 10)]:
        assert np.allclose(bicubic_matrix(n_in, n_out).sum(axis=1), 1.0)


def test_bicubic_same_size_is_identity(random_image: Callable[..., Image]) -> None:
    pixels = random_image().pixels
    assert np.allclose(resize_bicubic(pixels, (24, 32)), pixels, atol=1e-12)


def test_bicubic_reproduces_ramps() -> None:
    ramp = np.tile(np.arange(64, dtype=float)[None, :, None] / 63.0, (8, 1, 3))
    low = resize_bicubic(ramp, (8, 16))
    expected_low = (4.0 * np.arange(16) + 1.5) / 63.0
    assert np.allclose(low[0, :, 0], expected_low, atol=1e-3)

    high = resize_bicubic(low, (8, 64))
    interior = slice(8, 52)
    assert np.allclose(high[0, interior, 0], ramp[0, interior, 0], atol=1e-3)


def test_sr_degradation() -> None:
    constant = Image(np.full((32, 32, 3), 0.6))
    assert np.allclose(degrade_sr(constant).pixels, 0.6)
    with pytest.raises(ContractError, match="divisible"):
        degrade_sr(Image(np.full((30, 32, 3), 0.6)))


def test_sr_removes_fine_detail() -> None:
    checker = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
    image = Image(np.repeat(checker[:, :, None], 3, axis=2))
    degraded = degrade_sr(image, 4)
    assert degraded.pixels.std() < 0.1 * image.pixels.std()


def test_degrade_viewset_is_per_view(random_image: Callable[..., Image]) -> None:
    image = random_image()
    vs = ViewSet("s", [5, 6], [image, image])
    task = DeblurTask(BlurParams.preset("desk"))

    degraded = degrade_viewset(vs, task, seed=4)
    again = degrade_viewset(vs, task, seed=4)

    assert degraded.view_indices == [5, 6]
    assert np.array_equal(degraded[0].pixels, again[0].pixels)
    # same content, independent kernels
    assert not np.array_equal(degraded[0].pixels, degraded[1].pixels)


def test_degrade_viewset_sr_keeps_geometry(small_scene: Scene) -> None:
    vs = small_scene.view_set([0, 1])
    degraded = degrade_viewset(vs, SRTask(4), seed=0)
    assert degraded.depths is vs.depths and degraded.cameras is vs.cameras
    assert degraded.shape == vs.shape
