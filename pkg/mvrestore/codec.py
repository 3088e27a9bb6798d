# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Maps view sets to the latent tensors the denoiser works on, and back.

Latents of one set are torch tensors shaped (N, C, h, w).
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

from typing import Dict, List, Protocol, Tuple, Type

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange

from .dataio import Image, ViewSet
from .exceptions import ConfigError, ContractError


class Codec(Protocol):
    name: str
    channels: int

    def latent_size(self, height: int, width: int) -> Tuple[int, int]: ...

    def encode(self, vs: ViewSet, dtype: torch.dtype = torch.float32) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor, template: ViewSet) -> ViewSet: ...


def _pixels(vs: ViewSet, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(rearrange(vs.stack(), "n h w c -> n c h w"), dtype=dtype)


def _images(latents: torch.Tensor) -> List[Image]:
    values = rearrange(latents.detach().to(torch.float64).cpu().numpy(), "n c h w -> n h w c")
    return [Image.clipped(np.ascontiguousarray(view)) for view in values]


class IdentityCodec:
    """Latent = pixels. decode(encode(x)) == x exactly."""

    name = "identity"

    def __init__(self, channels: int = 3) -> None:
        self.channels = channels

    def latent_size(self, height: int, width: int) -> Tuple[int, int]:
        return height, width

    def encode(self, vs: ViewSet, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        if vs.shape[2] != self.channels:
            raise ContractError(
                f"Codec expects {self.channels}-channel images, got {vs.shape[2]}"
            )
        return _pixels(vs, dtype)

    def decode(self, latents: torch.Tensor, template: ViewSet) -> ViewSet:
        if latents.ndim != 4 or latents.shape[0] != len(template):
            raise ContractError(
                f"Cannot decode latents of shape {tuple(latents.shape)} into {len(template)} views"
            )
        return template.with_images(_images(latents))


class IdentityDS2Codec(IdentityCodec):
    """Pixels after a 2x area downsample; decoding upsamples bilinearly."""

    name = "identity_ds2"

    def latent_size(self, height: int, width: int) -> Tuple[int, int]:
        if height % 2 or width % 2:
            raise ContractError(f"identity_ds2 needs even image sizes, got {height}x{width}")
        return height // 2, width // 2

    def encode(self, vs: ViewSet, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        height, width, _ = vs.shape
        self.latent_size(height, width)
        return F.avg_pool2d(super().encode(vs, dtype), kernel_size=2)

    def decode(self, latents: torch.Tensor, template: ViewSet) -> ViewSet:
        height, width, _ = template.shape
        upsampled = F.interpolate(
            latents, size=(height, width), mode="bilinear", align_corners=False
        )
        return super().decode(upsampled, template)


CODECS: Dict[str, Type[IdentityCodec]] = {
    IdentityCodec.name: IdentityCodec,
    IdentityDS2Codec.name: IdentityDS2Codec,
}


def make_codec(name: str, channels: int = 3) -> IdentityCodec:
    try:
        return CODECS[name](channels)
    except KeyError:
        raise ConfigError(f"Unknown codec '{name}', expected one of {sorted(CODECS)}")
