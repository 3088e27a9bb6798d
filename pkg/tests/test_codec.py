# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from typing import Callable

import numpy as np
import pytest
import torch

from mvrestore import ConfigError, ContractError, Image, ViewSet
from mvrestore.codec import IdentityCodec, IdentityDS2Codec, make_codec


def test_identity_codec_is_lossless(random_image: Callable[..., Image]) -> None:
    vs = ViewSet("s", [0, 1], [random_image(), random_image()])
    codec = IdentityCodec()

    latents = codec.encode(vs, dtype=torch.float64)
    assert latents.shape == (2, 3, 24, 32)
    decoded = codec.decode(latents, vs)
    for original, restored in zip(vs, decoded):
        assert np.array_equal(original.pixels, restored.pixels)
    assert decoded.view_indices == [0, 1]


def test_decode_clips_to_unit_range(random_image: Callable[..., Image]) -> None:
    vs = ViewSet("s", [0], [random_image()])
    latents = torch.full((1, 3, 24, 32), 1.7)
    assert IdentityCodec().decode(latents, vs)[0].pixels.max() == 1.0


def test_identity_codec_checks_shapes(random_image: Callable[..., Image]) -> None:
    gray = ViewSet("s", [0], [random_image(channels=1)])
    with pytest.raises(ContractError, match="3-channel"):
        IdentityCodec().encode(gray)
    with pytest.raises(ContractError, match="Cannot decode"):
        IdentityCodec(1).decode(torch.zeros(2, 1, 24, 32), gray)


def test_ds2_codec_halves_and_restores_constants() -> None:
    vs = ViewSet("s", [0], [Image(np.full((24, 32, 3), 0.25))])
    codec = IdentityDS2Codec()

    latents = codec.encode(vs)
    assert codec.latent_size(24, 32) == (12, 16)
    assert latents.shape == (1, 3, 12, 16)
    assert np.allclose(codec.decode(latents, vs)[0].pixels, 0.25, atol=1e-6)


def test_ds2_codec_needs_even_sizes(random_image: Callable[..., Image]) -> None:
    with pytest.raises(ContractError, match="even"):
        IdentityDS2Codec().encode(ViewSet("s", [0], [random_image(height=25)]))


def test_make_codec() -> None:
    assert isinstance(make_codec("identity_ds2"), IdentityDS2Codec)
    assert make_codec("identity", channels=1).channels == 1
    with pytest.raises(ConfigError, match="Unknown codec 'vae'"):
        make_codec("vae")
