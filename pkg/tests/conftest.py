# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from typing import Callable, Sequence, Tuple

import numpy as np
import pytest
import torch

from mvrestore import CameraView, DepthMap, Image, MVUNetConfig, Scene, SceneSpec
from mvrestore.synthetic import generate_synthetic_scene


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_camera(
    image_size: Tuple[int, int] = (24, 32),
    focal: float = 30.0,
    rotation: np.ndarray = np.eye(3),
    position: Sequence[float] = (0.0, 0.0, 0.0),
) -> CameraView:
    world_to_camera = np.eye(4)
    world_to_camera[:3, :3] = rotation
    world_to_camera[:3, 3] = -rotation @ np.asarray(position, dtype=float)
    height, width = image_size
    return CameraView(
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        world_to_camera=world_to_camera,
        image_size=image_size,
    )


@pytest.fixture
def camera_factory() -> Callable[..., CameraView]:
    return make_camera


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng: np.random.Generator) -> Callable[..., Image]:
    def build(height: int = 24, width: int = 32, channels: int = 3) -> Image:
        return Image(rng.uniform(0.0, 1.0, size=(height, width, channels)))

    return build


@pytest.fixture
def plane_depth() -> Callable[..., DepthMap]:
    def build(z: float, image_size: Tuple[int, int] = (24, 32)) -> DepthMap:
        return DepthMap(np.full(image_size, float(z)))

    return build


@pytest.fixture(scope="session")
def small_scene() -> Scene:
    """Six synthetic views at 32x40, shared read-only across tests."""
    return generate_synthetic_scene(SceneSpec(n_views=6, resolution=(32, 40), seed=3))


@pytest.fixture(scope="session")
def desk_scene() -> Scene:
    return generate_synthetic_scene(SceneSpec(n_views=8, resolution=(48, 64), seed=0))


@pytest.fixture
def tiny_model_config() -> MVUNetConfig:
    return MVUNetConfig(
        base_width=8,
        channel_mult=[1, 2],
        n_levels=2,
        attention_levels=[1],
        heads=2,
        num_groups=4,
        timestep_embed_dim=16,
    )


@pytest.fixture(autouse=True)
def _deterministic_torch() -> None:
    torch.manual_seed(0)
