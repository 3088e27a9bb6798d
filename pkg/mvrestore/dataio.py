# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image as PILImage

from .exceptions import ContractError, SceneLoadError, SceneWriteError

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]

DEPTH_MAGIC = b"FDEPTH"
POSES_FILE = "poses.json"
IMAGES_DIR = "images"
DEPTH_DIR = "depth"
MAX_VIEWS_PER_SET = 16


@dataclass
class Image:
    """A channel-last image with values in [0, 1]."""

    pixels: FloatArray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ContractError(
                f"Image must have shape (h, w, 1) or (h, w, 3), got {pixels.shape}"
            )
        if pixels.shape[0] < 8 or pixels.shape[1] < 8:
            raise ContractError(
                f"Image must be at least 8x8 pixels, got {pixels.shape[0]}x{pixels.shape[1]}"
            )
        if not np.all(np.isfinite(pixels)):
            raise ContractError("Image contains non-finite values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ContractError(
                f"Image values must lie in [0, 1], got [{pixels.min()}, {pixels.max()}]"
            )
        self.pixels = pixels

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @classmethod
    def clipped(cls, values: FloatArray) -> "Image":
        """Build an image from arbitrary values by clipping them to [0, 1]."""
        return cls(np.clip(np.nan_to_num(values, nan=0.0), 0.0, 1.0))

    def quantized(self) -> "Image":
        """The 8-bit representation this image gets when saved as PNG."""
        return Image(_to_uint8(self.pixels).astype(np.float64) / 255.0)


@dataclass
class DepthMap:
    """Metric depth with an explicit validity mask."""

    depth: FloatArray
    valid: Optional[BoolArray] = None

    def __post_init__(self) -> None:
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ContractError(f"DepthMap must be 2-D, got shape {depth.shape}")
        finite_positive = np.isfinite(depth) & (depth > 0)
        if self.valid is None:
            valid = finite_positive
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != depth.shape:
                raise ContractError(
                    f"Validity mask shape {valid.shape} differs from depth shape {depth.shape}"
                )
            valid = valid & finite_positive
        self.depth = np.where(valid, depth, 0.0)
        self.valid = valid

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def mask(self) -> BoolArray:
        assert self.valid is not None
        return self.valid


@dataclass
class CameraView:
    """Pinhole intrinsics and a rigid world-to-camera transform.

    Camera frame convention: +z forward, +x right, +y down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: FloatArray
    image_size: Tuple[int, int]

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(
                f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )
        matrix = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        rotation = matrix[:3, :3]
        if not np.all(np.isfinite(matrix)):
            raise ContractError("world_to_camera contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-6:
            raise ContractError("world_to_camera rotation block is not orthonormal")
        if np.linalg.det(rotation) <= 0:
            raise ContractError("world_to_camera rotation block has det != +1")
        if np.max(np.abs(matrix[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise ContractError("world_to_camera last row must be [0, 0, 0, 1]")
        self.world_to_camera = matrix
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def rotation(self) -> FloatArray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> FloatArray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> FloatArray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
        }


@dataclass
class SceneView:
    image: Image
    depth: DepthMap
    camera: CameraView


@dataclass
class Scene:
    """All posed RGB-D views of one scene, in file order."""

    scene_id: str
    views: List[SceneView] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.views) < 2:
            raise ContractError(
                f"Scene '{self.scene_id}' needs at least 2 views, got {len(self.views)}"
            )
        resolution = (self.views[0].image.height, self.views[0].image.width)
        for index, view in enumerate(self.views):
            for what, size in (
                ("image", (view.image.height, view.image.width)),
                ("depth", (view.depth.height, view.depth.width)),
                ("camera", view.camera.image_size),
            ):
                if size != resolution:
                    raise ContractError(
                        f"View {index} {what} resolution {size} differs from scene resolution {resolution}"
                    )

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self) -> Iterator[SceneView]:
        return iter(self.views)

    def __getitem__(self, index: int) -> SceneView:
        return self.views[index]

    @property
    def resolution(self) -> Tuple[int, int]:
        return (self.views[0].image.height, self.views[0].image.width)

    def view_set(self, indices: Sequence[int]) -> "ViewSet":
        """Gather the given views, with depth and cameras, into a ViewSet."""
        outside = [i for i in indices if not 0 <= i < len(self.views)]
        if outside:
            raise ContractError(
                f"View indices {outside} outside [0, {len(self.views)}) of scene '{self.scene_id}'"
            )
        return ViewSet(
            scene_id=self.scene_id,
            view_indices=list(indices),
            images=[self.views[i].image for i in indices],
            depths=[self.views[i].depth for i in indices],
            cameras=[self.views[i].camera for i in indices],
        )


@dataclass
class ViewSet:
    """N same-resolution views of one scene, processed jointly."""

    scene_id: str
    view_indices: List[int]
    images: List[Image]
    depths: Optional[List[DepthMap]] = None
    cameras: Optional[List[CameraView]] = None

    def __post_init__(self) -> None:
        n_views = len(self.images)
        if not 1 <= n_views <= MAX_VIEWS_PER_SET:
            raise ContractError(
                f"ViewSet must hold between 1 and {MAX_VIEWS_PER_SET} views, got {n_views}"
            )
        if len(self.view_indices) != n_views:
            raise ContractError(
                f"ViewSet has {n_views} images but {len(self.view_indices)} view indices"
            )
        if len(set(self.view_indices)) != n_views:
            raise ContractError(f"ViewSet indices are not unique: {self.view_indices}")
        shapes = {image.shape for image in self.images}
        if len(shapes) != 1:
            raise ContractError(f"ViewSet images differ in shape: {sorted(shapes)}")
        for name, aligned in (("depths", self.depths), ("cameras", self.cameras)):
            if aligned is not None and len(aligned) != n_views:
                raise ContractError(
                    f"ViewSet {name} has {len(aligned)} entries for {n_views} images"
                )

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[Image]:
        return iter(self.images)

    def __getitem__(self, index: int) -> Image:
        return self.images[index]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.images[0].shape

    def with_images(self, images: List[Image]) -> "ViewSet":
        """A copy of this set with the images replaced and geometry kept."""
        return ViewSet(
            scene_id=self.scene_id,
            view_indices=list(self.view_indices),
            images=images,
            depths=self.depths,
            cameras=self.cameras,
        )

    def stack(self) -> FloatArray:
        """All pixels as an (N, h, w, c) array."""
        return np.stack([image.pixels for image in self.images])


def _to_uint8(pixels: FloatArray) -> NDArray[np.uint8]:
    # round half up
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(image: Image, path: Union[str, Path]) -> None:
    data = _to_uint8(image.pixels)
    if image.channels == 1:
        PILImage.fromarray(data[:, :, 0]).save(path)
    else:
        PILImage.fromarray(data).save(path)


def read_image(path: Union[str, Path]) -> Image:
    with PILImage.open(path) as handle:
        if handle.mode not in ("L", "RGB"):
            handle = handle.convert("RGB")
        data = np.asarray(handle, dtype=np.float64)
    return Image(data / 255.0)


def write_depth(depth: DepthMap, path: Union[str, Path]) -> None:
    """Write a depth map as FDEPTH: magic, u32 h, u32 w, then h*w f32 LE."""
    values = np.where(depth.mask, depth.depth, 0.0).astype("<f4")
    with open(path, "wb") as handle:
        handle.write(DEPTH_MAGIC)
        handle.write(struct.pack("<II", depth.height, depth.width))
        handle.write(values.tobytes(order="C"))


def read_depth(path: Union[str, Path]) -> DepthMap:
    raw = Path(path).read_bytes()
    header_size = len(DEPTH_MAGIC) + 8
    if raw[: len(DEPTH_MAGIC)] != DEPTH_MAGIC:
        raise SceneLoadError(f"Depth file '{path}' does not start with FDEPTH magic")
    if len(raw) < header_size:
        raise SceneLoadError(f"Depth file '{path}' is truncated inside its header")
    height, width = struct.unpack("<II", raw[len(DEPTH_MAGIC) : header_size])
    payload = raw[header_size:]
    if len(payload) != 4 * height * width:
        raise SceneLoadError(
            f"Depth file '{path}' holds {len(payload)} bytes, expected {4 * height * width}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return DepthMap(values.reshape(height, width))


def save_scene(scene: Scene, path: Union[str, Path]) -> None:
    """Write a scene directory, replacing whatever was there."""
    root = Path(path)
    try:
        if root.exists():
            shutil.rmtree(root)
        (root / IMAGES_DIR).mkdir(parents=True)
        (root / DEPTH_DIR).mkdir(parents=True)
        poses = []
        for index, view in enumerate(scene.views):
            write_image(view.image, root / IMAGES_DIR / f"{index:04d}.png")
            write_depth(view.depth, root / DEPTH_DIR / f"{index:04d}.fdepth")
            poses.append(view.camera.to_dict())
        (root / POSES_FILE).write_text(json.dumps(poses, indent=2))
    except OSError as e:
        raise SceneWriteError(f"Could not write scene to '{root}': {e}") from e


def _parse_camera(
    entry: Dict[str, Any], image_size: Tuple[int, int], source: Path, index: int
) -> CameraView:
    try:
        return CameraView(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            world_to_camera=np.asarray(entry["world_to_camera"], dtype=np.float64),
            image_size=image_size,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SceneLoadError(f"Invalid pose {index} in '{source}': {e}") from e


def load_scene(path: Union[str, Path]) -> Scene:
    """Read a scene directory written by `save_scene` (or by hand)."""
    root = Path(path)
    poses_path = root / POSES_FILE
    if not poses_path.is_file():
        raise SceneLoadError(f"poses not found: '{poses_path}'")
    try:
        poses = json.loads(poses_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"Could not parse '{poses_path}': {e}") from e

    image_files = sorted((root / IMAGES_DIR).glob("*.png"))
    depth_files = sorted((root / DEPTH_DIR).glob("*.fdepth"))
    if len(image_files) != len(depth_files) or len(image_files) != len(poses):
        raise SceneLoadError(
            f"Scene '{root}' has {len(image_files)} images, {len(depth_files)} depth files and {len(poses)} poses"
        )

    views = []
    for index, (image_file, depth_file) in enumerate(zip(image_files, depth_files)):
        try:
            image = read_image(image_file)
        except (OSError, ContractError) as e:
            raise SceneLoadError(f"Could not read image '{image_file}': {e}") from e
        try:
            depth = read_depth(depth_file)
        except (OSError, ContractError) as e:
            raise SceneLoadError(f"Could not read depth '{depth_file}': {e}") from e
        if (depth.height, depth.width) != (image.height, image.width):
            raise SceneLoadError(
                f"Shape mismatch: depth '{depth_file}' is {depth.height}x{depth.width} but image is {image.height}x{image.width}"
            )
        camera = _parse_camera(
            poses[index], (image.height, image.width), poses_path, index
        )
        views.append(SceneView(image=image, depth=depth, camera=camera))

    try:
        return Scene(scene_id=root.name, views=views)
    except ContractError as e:
        raise SceneLoadError(f"Invalid scene '{root}': {e.message}") from e


def list_scene_dirs(root: Union[str, Path]) -> List[Path]:
    """Scene directories directly below `root` (or `root` itself if it is one)."""
    base = Path(root)
    if (base / POSES_FILE).is_file():
        return [base]
    return sorted(p for p in base.iterdir() if (p / POSES_FILE).is_file())
