# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Multi-view denoising UNet.

Feature tensors are laid out (B, N, C, H, W): B view sets of N views each.
ResNet blocks blend a per-view 2D convolution with a 3D convolution over
(view, height, width); low-resolution levels add joint self-attention over
the tokens of every view; the degraded-set condition enters by channel
concatenation through a stem whose condition slice starts at zero.
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Type, Union

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .exceptions import ConfigError, ContractError

LatentSet = torch.Tensor
OFF_CENTER_INIT_STD = 1e-3


@dataclass
class MVUNetConfig:
    in_channels: int = 3
    cond_channels: int = 3
    base_width: int = 32
    channel_mult: List[int] = field(default_factory=lambda: [1, 2, 2])
    level_widths: Optional[List[int]] = None
    n_levels: int = 3
    attention_levels: List[int] = field(default_factory=lambda: [1, 2])
    attention_in_bottleneck: bool = True
    num_res_blocks: int = 1
    blend_alpha: float = 0.5
    heads: int = 4
    timestep_embed_dim: int = 128
    num_groups: int = 8
    use_conv3d: bool = True
    use_attention3d: bool = True
    svd_like_init: bool = True

    def __post_init__(self) -> None:
        if self.n_levels < 2:
            raise ConfigError(f"n_levels must be >= 2, got {self.n_levels}")
        if self.in_channels < 1 or self.cond_channels < 0:
            raise ConfigError(
                f"Invalid channel counts in={self.in_channels}, cond={self.cond_channels}"
            )
        if self.level_widths is None and len(self.channel_mult) < self.n_levels:
            raise ConfigError(
                f"channel_mult {self.channel_mult} has fewer entries than n_levels={self.n_levels}"
            )
        if self.level_widths is not None and len(self.level_widths) != self.n_levels:
            raise ConfigError(
                f"level_widths {self.level_widths} must have n_levels={self.n_levels} entries"
            )
        for width in self.widths:
            if width <= 0 or width % self.num_groups:
                raise ConfigError(
                    f"Level width {width} must be positive and divisible by num_groups={self.num_groups}"
                )
        if 0 in self.attention_levels:
            raise ConfigError(
                "attention_levels must exclude level 0 (the highest resolution)"
            )
        for level in self.attention_levels:
            if not 0 < level < self.n_levels:
                raise ConfigError(
                    f"Attention level {level} outside [1, {self.n_levels - 1}]"
                )
            if self.widths[level] % self.heads:
                raise ConfigError(
                    f"Width {self.widths[level]} at level {level} not divisible by heads={self.heads}"
                )
        if self.attention_in_bottleneck and self.widths[-1] % self.heads:
            raise ConfigError(
                f"Bottleneck width {self.widths[-1]} not divisible by heads={self.heads}"
            )
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ConfigError(
                f"timestep_embed_dim must be even and >= 2, got {self.timestep_embed_dim}"
            )
        if self.num_res_blocks < 1:
            raise ConfigError(f"num_res_blocks must be >= 1, got {self.num_res_blocks}")

    @property
    def widths(self) -> List[int]:
        if self.level_widths is not None:
            return list(self.level_widths)
        return [self.base_width * m for m in self.channel_mult[: self.n_levels]]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.n_levels - 1)


def timestep_embedding(k: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = k.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1).to(dtype)


def per_view(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply a 2D module to every view independently."""
    b = x.shape[0]
    out = module(rearrange(x, "b n c h w -> (b n) c h w"))
    return rearrange(out, "(b n) c h w -> b n c h w", b=b)


class Spatial3DResBlock(nn.Module):
    """ResNet block whose output blends a 2D and a 3D convolution path.

    out = sigmoid(alpha) * O_2D + sigmoid(1 - alpha) * O_3D + skip(x)
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        temb_dim: int,
        alpha: float = 0.5,
        num_groups: int = 8,
        use_conv3d: bool = True,
        svd_like_init: bool = True,
    ) -> None:
        super().__init__()
        self.alpha = alpha
        self.use_conv3d = use_conv3d
        self.norm = nn.GroupNorm(num_groups, in_channels)
        self.film = nn.Linear(temb_dim, 2 * in_channels)
        self.conv2d = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv3d = (
            nn.Conv3d(in_channels, out_channels, 3, padding=1) if use_conv3d else None
        )
        self.skip: nn.Module = (
            nn.Identity()
            if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, 1)
        )
        if self.conv3d is not None and svd_like_init:
            self.init_3d_from_2d()

    @torch.no_grad()
    def init_3d_from_2d(self) -> None:
        """Central view slice = the 2D kernel; off-centre slices near zero."""
        assert self.conv3d is not None
        weight = torch.randn_like(self.conv3d.weight) * OFF_CENTER_INIT_STD
        weight[:, :, 1] = self.conv2d.weight
        self.conv3d.weight.copy_(weight)
        assert self.conv3d.bias is not None and self.conv2d.bias is not None
        self.conv3d.bias.copy_(self.conv2d.bias)

    @property
    def blend_weights(self) -> Tuple[float, float]:
        return (
            1.0 / (1.0 + math.exp(-self.alpha)),
            1.0 / (1.0 + math.exp(-(1.0 - self.alpha))),
        )

    def preactivate(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(F.silu(temb)).chunk(2, dim=1)
        h = per_view(self.norm, x)
        h = h * (1 + scale[:, None, :, None, None]) + shift[:, None, :, None, None]
        return F.silu(h)

    def path_2d(self, h: torch.Tensor) -> torch.Tensor:
        return per_view(self.conv2d, h)

    def path_3d(self, h: torch.Tensor) -> torch.Tensor:
        assert self.conv3d is not None
        out = self.conv3d(rearrange(h, "b n c h w -> b c n h w"))
        return rearrange(out, "b c n h w -> b n c h w")

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.preactivate(x, temb)
        skip = per_view(self.skip, x)
        if self.conv3d is None:
            return self.path_2d(h) + skip
        w2d, w3d = self.blend_weights
        return w2d * self.path_2d(h) + w3d * self.path_3d(h) + skip


class Attention3D(nn.Module):
    """Multi-head self-attention over the spatial tokens of all views.

    With joint=False tokens only attend within their own view.
    """

    def __init__(
        self, channels: int, heads: int, num_groups: int = 8, joint: bool = True
    ) -> None:
        super().__init__()
        self.heads = heads
        self.joint = joint
        self.norm = nn.GroupNorm(num_groups, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        h = per_view(self.norm, x)
        if self.joint:
            return rearrange(h, "b n c h w -> b (n h w) c")
        return rearrange(h, "b n c h w -> (b n) (h w) c")

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(
            self.qkv(tokens), "b t (three heads d) -> three b heads t d", three=3, heads=self.heads
        )
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        mixed = torch.softmax(scores, dim=-1) @ v
        return self.out(rearrange(mixed, "b heads t d -> b t (heads d)"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _, height, width = x.shape
        attended = self.attend(self.tokens(x))
        if self.joint:
            attended = rearrange(
                attended, "b (n h w) c -> b n c h w", n=n, h=height, w=width
            )
        else:
            attended = rearrange(
                attended, "(b n) (h w) c -> b n c h w", b=b, h=height, w=width
            )
        return x + attended


class _Level(nn.Module):
    def __init__(
        self,
        config: MVUNetConfig,
        in_channels: int,
        out_channels: int,
        attention: bool,
        skip_channels: int = 0,
    ) -> None:
        super().__init__()
        blocks: List[nn.Module] = []
        channels = in_channels
        for index in range(config.num_res_blocks):
            blocks.append(
                Spatial3DResBlock(
                    channels + (skip_channels if index == 0 else 0),
                    out_channels,
                    config.timestep_embed_dim,
                    alpha=config.blend_alpha,
                    num_groups=config.num_groups,
                    use_conv3d=config.use_conv3d,
                    svd_like_init=config.svd_like_init,
                )
            )
            channels = out_channels
        self.blocks = nn.ModuleList(blocks)
        self.attention = (
            Attention3D(
                out_channels,
                config.heads,
                config.num_groups,
                joint=config.use_attention3d,
            )
            if attention
            else None
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, temb)
        if self.attention is not None:
            x = self.attention(x)
        return x


class MVUNet(nn.Module):
    def __init__(self, config: MVUNetConfig) -> None:
        super().__init__()
        self.config = config
        widths = config.widths
        temb_dim = config.timestep_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.stem = nn.Conv2d(
            config.in_channels + config.cond_channels, widths[0], 3, padding=1
        )

        self.down_levels = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        channels = widths[0]
        for level, width in enumerate(widths):
            self.down_levels.append(
                _Level(config, channels, width, level in config.attention_levels)
            )
            channels = width
            if level < config.n_levels - 1:
                self.downsamplers.append(nn.Conv2d(width, width, 3, stride=2, padding=1))

        self.mid_in = _Level(config, channels, channels, config.attention_in_bottleneck)
        self.mid_out = _Level(config, channels, channels, False)

        self.up_levels = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(config.n_levels)):
            width = widths[level]
            self.up_levels.append(
                _Level(
                    config,
                    channels,
                    width,
                    level in config.attention_levels,
                    skip_channels=width,
                )
            )
            channels = width
            if level > 0:
                self.upsamplers.append(nn.Conv2d(width, widths[level - 1], 3, padding=1))
                channels = widths[level - 1]

        self.out_norm = nn.GroupNorm(config.num_groups, channels)
        self.out_conv = nn.Conv2d(channels, config.in_channels, 3, padding=1)
        self.zero_condition_stem()

    @torch.no_grad()
    def zero_condition_stem(self) -> None:
        self.stem.weight[:, self.config.in_channels :] = 0.0

    @property
    def condition_stem_weight(self) -> torch.Tensor:
        return self.stem.weight[:, self.config.in_channels :]

    def _check_inputs(self, noisy: torch.Tensor, cond: torch.Tensor) -> None:
        config = self.config
        if noisy.ndim != 5 or cond.ndim != 5:
            raise ContractError(
                f"Expected (B, N, C, H, W) latents, got {tuple(noisy.shape)} and {tuple(cond.shape)}"
            )
        b, n, c, height, width = noisy.shape
        if (cond.shape[0], cond.shape[1], cond.shape[3], cond.shape[4]) != (b, n, height, width):
            raise ContractError(
                f"Noisy latents {tuple(noisy.shape)} and condition {tuple(cond.shape)} differ in sets, views or size"
            )
        if c != config.in_channels or cond.shape[2] != config.cond_channels:
            raise ContractError(
                f"Expected {config.in_channels} noisy and {config.cond_channels} condition channels, got {c} and {cond.shape[2]}"
            )
        factor = config.downsample_factor
        if height % factor or width % factor:
            raise ContractError(
                f"Latent size {height}x{width} must be divisible by {factor}"
            )

    def forward(
        self,
        noisy: LatentSet,
        cond: LatentSet,
        k: Union[int, torch.Tensor],
    ) -> LatentSet:
        """Predict the noise in `noisy` given the condition latents.

        Accepts one set (N, C, H, W) or a batch (B, N, C, H, W); `k` is one
        timestep or one per set.
        """
        single = noisy.ndim == 4
        if single:
            noisy = noisy[None]
            cond = cond[None] if cond.ndim == 4 else cond
        self._check_inputs(noisy, cond)

        b = noisy.shape[0]
        steps = torch.as_tensor(k, dtype=torch.long).reshape(-1)
        if steps.numel() == 1:
            steps = steps.expand(b)
        if steps.numel() != b:
            raise ContractError(f"Got {steps.numel()} timesteps for {b} view sets")
        temb = self.time_mlp(
            timestep_embedding(steps, self.config.timestep_embed_dim, noisy.dtype)
        )

        x = per_view(self.stem, torch.cat([noisy, cond], dim=2))
        skips: List[torch.Tensor] = []
        for level, down in enumerate(self.down_levels):
            x = down(x, temb)
            skips.append(x)
            if level < len(self.downsamplers):
                x = per_view(self.downsamplers[level], x)

        x = self.mid_out(self.mid_in(x, temb), temb)

        for index, up in enumerate(self.up_levels):
            x = up(torch.cat([x, skips.pop()], dim=2), temb)
            if index < len(self.upsamplers):
                x = per_view(self.upsamplers[index], _upsample(x))

        x = per_view(self.out_conv, F.silu(per_view(self.out_norm, x)))
        return x[0] if single else x


def _upsample(x: torch.Tensor) -> torch.Tensor:
    b = x.shape[0]
    up = F.interpolate(rearrange(x, "b n c h w -> (b n) c h w"), scale_factor=2, mode="nearest")
    return rearrange(up, "(b n) c h w -> b n c h w", b=b)


def init_params(config: MVUNetConfig, seed: int) -> MVUNet:
    """Fresh model, deterministic in `seed`; the global torch RNG is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MVUNet(config)


def count_parameters(
    model: nn.Module,
    module_types: Optional[Tuple[Type[nn.Module], ...]] = None,
) -> int:
    """Number of scalar parameters, optionally only in modules of given types."""
    if module_types is None:
        return sum(p.numel() for p in model.parameters())
    return sum(
        p.numel()
        for module in model.modules()
        if isinstance(module, module_types)
        for p in module.parameters(recurse=False)
    )
