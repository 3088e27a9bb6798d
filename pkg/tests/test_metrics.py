# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

import math
from typing import Callable, List

import numpy as np
import pytest
from scipy import ndimage

from mvrestore import (
    CameraView,
    ContractError,
    DegenerateFitError,
    DepthMap,
    Image,
    MetricOptions,
    MetricReport,
    Scene,
    UndefinedMetricError,
    ViewSet,
    absrel_delta1,
    align_scale_bias,
    count_correspondences,
    default_perceptual_backend,
    evaluate_depths,
    evaluate_images,
    geometric_consistency,
    psnr,
    ssim,
    visual_consistency,
)
from mvrestore.metrics import CALIBRATION_NOISE_STD, MetricEntry, RandomProjectionBackend

from conftest import rotation_y


def noisy_copy(vs: ViewSet, std: float, seed: int) -> ViewSet:
    rng = np.random.default_rng(seed)
    return vs.with_images(
        [Image.clipped(image.pixels + rng.normal(0.0, std, image.shape)) for image in vs]
    )


def test_psnr_values() -> None:
    zeros = Image(np.zeros((16, 16, 3)))
    half = Image(np.full((16, 16, 3), 0.5))

    assert psnr(zeros, zeros) == 99.0
    assert psnr(zeros, half) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(half, zeros) == psnr(zeros, half)


def test_psnr_decreases_with_noise(random_image: Callable[..., Image]) -> None:
    image = random_image()
    rng = np.random.default_rng(0)
    noise = rng.normal(size=image.shape)
    scores = [
        psnr(image, Image.clipped(image.pixels + std * noise))
        for std in (0.01, 0.02, 0.05, 0.1, 0.2)
    ]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_psnr_shape_mismatch(random_image: Callable[..., Image]) -> None:
    with pytest.raises(ContractError, match="shapes differ"):
        psnr(random_image(), random_image(height=16))


def test_ssim_identity_and_symmetry(random_image: Callable[..., Image]) -> None:
    a, b = random_image(), random_image()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
    assert -1.0 <= ssim(a, b) < 1.0


def test_ssim_of_constant_images_is_luminance_term() -> None:
    a = Image(np.full((16, 16, 3), 0.2))
    b = Image(np.full((16, 16, 3), 0.7))
    c1 = 0.01**2
    expected = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_needs_window_sized_images(random_image: Callable[..., Image]) -> None:
    small = random_image(8, 8)
    with pytest.raises(ContractError, match="at least 11x11"):
        ssim(small, small)


def test_backend_properties(random_image: Callable[..., Image]) -> None:
    backend = default_perceptual_backend()
    a, b = random_image(30, 30).pixels, random_image(30, 30).pixels

    assert backend.distance(a, a) == 0.0
    assert abs(backend.distance(a, b) - backend.distance(b, a)) < 1e-9
    assert backend.distance(a, b) > 0.0
    assert default_perceptual_backend() is backend


def test_backend_calibration() -> None:
    backend = RandomProjectionBackend()
    gray = np.full((64, 64, 3), 0.5)
    noise = np.random.default_rng(0).normal(0.0, CALIBRATION_NOISE_STD, size=gray.shape)

    assert backend.distance(gray, np.clip(gray + noise, 0.0, 1.0)) == pytest.approx(0.1, abs=0.02)


def test_backend_channel_check() -> None:
    with pytest.raises(ContractError, match="expects 3 channels"):
        RandomProjectionBackend(scale=1.0).distance(np.zeros((8, 8, 2)), np.zeros((8, 8, 2)))


def _identity_pair(camera_factory: Callable[..., CameraView], image: Image) -> ViewSet:
    camera = camera_factory(image_size=(60, 60))
    depth = DepthMap(np.full((60, 60), 3.0))
    return ViewSet("twin", [0, 1], [image, image], [depth, depth], [camera, camera])


def test_visual_consistency_is_zero_on_identical_twins(
    camera_factory: Callable[..., CameraView], random_image: Callable[..., Image]
) -> None:
    gt = _identity_pair(camera_factory, random_image(60, 60))
    assert visual_consistency(gt, gt) == pytest.approx(0.0, abs=1e-9)


def test_visual_consistency_grows_with_corruption(desk_scene: Scene) -> None:
    gt = desk_scene.view_set([0, 1, 2])
    scores = [
        visual_consistency(noisy_copy(gt, std, seed=1), gt, gt_gate=10.0)
        for std in (0.0, 0.05, 0.2)
    ]
    assert scores[0] < scores[1] < scores[2]


def test_visual_consistency_without_overlap(
    camera_factory: Callable[..., CameraView], random_image: Callable[..., Image]
) -> None:
    front = camera_factory(image_size=(32, 32))
    back = camera_factory(image_size=(32, 32), rotation=rotation_y(math.pi))
    depth = DepthMap(np.full((32, 32), 3.0))
    gt = ViewSet(
        "apart", [0, 1], [random_image(32, 32), random_image(32, 32)], [depth, depth], [front, back]
    )
    with pytest.raises(UndefinedMetricError, match="no patch survived"):
        visual_consistency(gt, gt)


def test_visual_consistency_needs_geometry(random_image: Callable[..., Image]) -> None:
    bare = ViewSet("s", [0, 1], [random_image(), random_image()])
    with pytest.raises(ContractError, match="needs depths and cameras"):
        visual_consistency(bare, bare)


def test_align_scale_bias() -> None:
    gt = np.arange(1.0, 17.0).reshape(4, 4)
    mask = np.ones((4, 4), dtype=bool)

    assert align_scale_bias(gt, gt, mask) == (1.0, 0.0)
    scale, bias = align_scale_bias(2.0 * gt + 0.3, gt, mask)
    assert scale == pytest.approx(0.5) and bias == pytest.approx(-0.15)
    with pytest.raises(DegenerateFitError, match="constant"):
        align_scale_bias(np.ones((4, 4)), gt, mask)
    with pytest.raises(UndefinedMetricError, match="empty"):
        align_scale_bias(gt, gt, np.zeros((4, 4), dtype=bool))


def _depths(vs: ViewSet) -> List[DepthMap]:
    assert vs.depths is not None
    return vs.depths


@pytest.mark.parametrize("align", [True, False])
def test_geometric_consistency_of_exact_prediction(small_scene: Scene, align: bool) -> None:
    gt = small_scene.view_set([0, 1, 2])
    assert gt.cameras is not None
    assert geometric_consistency(_depths(gt), _depths(gt), gt.cameras, align=align) == 0.0


def test_geometric_consistency_removes_scale_and_bias(small_scene: Scene) -> None:
    gt = small_scene.view_set([0, 1, 2])
    assert gt.cameras is not None
    pred = [DepthMap(2.0 * d.depth + 0.3) for d in _depths(gt)]
    assert geometric_consistency(pred, _depths(gt), gt.cameras) == pytest.approx(0.0, abs=1e-6)


def test_geometric_consistency_is_invariant_to_per_view_affine(small_scene: Scene) -> None:
    gt = small_scene.view_set([0, 1, 2])
    assert gt.cameras is not None
    rng = np.random.default_rng(3)
    noisy = [DepthMap(d.depth + rng.normal(0.0, 0.05, d.depth.shape)) for d in _depths(gt)]
    rescaled = [
        DepthMap(scale * d.depth + bias)
        for d, scale, bias in zip(noisy, (0.5, 3.0, 1.2), (2.0, 0.1, 0.0))
    ]

    base = geometric_consistency(noisy, _depths(gt), gt.cameras)
    assert geometric_consistency(rescaled, _depths(gt), gt.cameras) == pytest.approx(base, rel=1e-6)


def test_geometric_consistency_matches_monte_carlo_noise_model(desk_scene: Scene) -> None:
    gt = desk_scene.view_set([0, 1, 2])
    assert gt.cameras is not None
    rng = np.random.default_rng(5)
    pred = [DepthMap(d.depth + rng.normal(0.0, 0.05, d.depth.shape)) for d in _depths(gt)]

    draws = np.random.default_rng(6).normal(0.0, 0.05, size=(2, 200_000))
    oracle = float(np.mean(np.abs(draws[0] - draws[1])))
    metric = geometric_consistency(pred, _depths(gt), gt.cameras, align=False)
    assert metric == pytest.approx(oracle, rel=0.1)


def test_geometric_consistency_without_correspondences(
    camera_factory: Callable[..., CameraView], plane_depth: Callable[..., DepthMap]
) -> None:
    depths = [plane_depth(3.0), plane_depth(3.0)]
    cameras = [camera_factory(), camera_factory(rotation=rotation_y(math.pi))]
    with pytest.raises(UndefinedMetricError, match="no valid correspondences"):
        geometric_consistency(depths, depths, cameras, align=False)


def test_absrel_delta1_boundaries() -> None:
    gt = DepthMap(np.arange(1.0, 65.0).reshape(8, 8))
    assert absrel_delta1(gt, gt) == (0.0, 100.0)
    assert absrel_delta1(DepthMap(1.25 * gt.depth), gt) == (0.25, 0.0)


def test_absrel_delta1_matches_pixel_loop() -> None:
    rng = np.random.default_rng(9)
    gt_values = rng.uniform(0.5, 5.0, size=(8, 8))
    pred_values = gt_values * rng.uniform(0.6, 1.6, size=(8, 8))
    pred_values[0, 0] = 0.0
    gt, pred = DepthMap(gt_values), DepthMap(pred_values)

    errors, hits = [], []
    for row in range(8):
        for col in range(8):
            if (row, col) == (0, 0):
                continue
            p, g = pred_values[row, col], gt_values[row, col]
            errors.append(abs(p - g) / g)
            hits.append(max(p / g, g / p) < 1.25)
    absrel, delta1 = absrel_delta1(pred, gt)

    assert absrel == pytest.approx(np.mean(errors), rel=1e-12)
    assert delta1 == pytest.approx(100.0 * np.mean(hits), rel=1e-12)


def test_absrel_delta1_needs_shared_mask() -> None:
    empty = DepthMap(np.zeros((8, 8)))
    with pytest.raises(UndefinedMetricError, match="empty validity mask"):
        absrel_delta1(empty, DepthMap(np.ones((8, 8))))


def _texture(seed: int) -> Image:
    noise = ndimage.gaussian_filter(np.random.default_rng(seed).normal(size=(48, 64)), 1.5)
    noise = (noise - noise.min()) / (noise.max() - noise.min())
    return Image(np.repeat(noise[:, :, None], 3, axis=2))


def test_correspondence_counts() -> None:
    a = _texture(0)
    blurred = Image(ndimage.gaussian_filter(a.pixels, (3.0, 3.0, 0.0)))
    rng = np.random.default_rng(1)
    noise_a = Image(rng.uniform(size=(48, 64, 3)))
    noise_b = Image(rng.uniform(size=(48, 64, 3)))

    identical = count_correspondences(a, a)
    assert identical > 10
    assert count_correspondences(a, blurred) < identical
    assert count_correspondences(noise_a, noise_b) < 0.05 * 512


def test_metric_entry_validation() -> None:
    with pytest.raises(ContractError, match="needs 2 view indices"):
        MetricEntry("pair", (1,))
    with pytest.raises(ContractError, match="Unknown metric entry kind"):
        MetricEntry("scene", (1,))


def test_report_aggregates_are_plain_means() -> None:
    report = MetricReport("deblur", "s")
    report.add("view", (0,), psnr=20.0)
    report.add("view", (1,), psnr=30.0)
    report.add("pair", (0, 1), vconsis=4.0)
    report.add("pair", (1, 0), vconsis=6.0)

    assert report.aggregates == {"psnr": 25.0, "vconsis": 5.0}
    assert "vconsis" in report and "gconsis" not in report
    with pytest.raises(UndefinedMetricError, match="No 'gconsis' values"):
        report.aggregate("gconsis")

    again = MetricReport.from_dict(report.to_dict())
    assert again.aggregates == report.aggregates
    assert [entry.views for entry in again] == [(0,), (1,), (0, 1), (1, 0)]
    with pytest.raises(ContractError, match="Malformed"):
        MetricReport.from_dict({"task": "deblur"})


def test_evaluate_images_on_identical_sets(small_scene: Scene) -> None:
    gt = small_scene.view_set([0, 1, 2])
    report = evaluate_images(gt, gt, "sr", MetricOptions(gt_gate=10.0))

    assert report.aggregate("psnr") == 99.0
    assert report.aggregate("ssim") == pytest.approx(1.0, abs=1e-12)
    assert report.counts["views"] == 3 and report.counts["pairs"] == 6
    assert len(report.values("n_correspondences")) == 3
    assert report.counts["vconsis_pairs"] == len(report.values("vconsis"))


def test_evaluate_images_without_matches(small_scene: Scene) -> None:
    gt = small_scene.view_set([0, 1])
    report = evaluate_images(gt, noisy_copy(gt, 0.05, 0), "deblur", MetricOptions(count_matches=False))
    assert "n_correspondences" not in report
    assert report.aggregate("psnr") < 99.0


def test_evaluate_depths_on_exact_prediction(small_scene: Scene) -> None:
    gt = small_scene.view_set([1, 2, 3])
    report = evaluate_depths(_depths(gt), gt)

    assert report.task == "depth"
    assert report.aggregate("gconsis") == 0.0
    assert report.aggregate("absrel") == 0.0
    assert report.aggregate("delta1") == 100.0
    assert report.counts["gconsis_correspondences"] > 0
    with pytest.raises(ContractError, match="predicted depths for 3 views"):
        evaluate_depths(_depths(gt)[:2], gt)
