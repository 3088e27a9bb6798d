# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch

from .codec import Codec
from .dataio import ViewSet
from .exceptions import ContractError

logger = logging.getLogger(__name__)

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
REFERENCE_STEPS = 1000
FINAL_ALPHA_BAR_LIMIT = 0.05

NoisePredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

SAMPLER_ALIASES: Dict[str, str] = {
    "ancestral": "ancestral",
    "ddpm": "ancestral",
    "deterministic": "deterministic",
    "ddim": "deterministic",
}


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; coefficient tensors are float64."""

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def __post_init__(self) -> None:
        if self.betas.shape != (self.T,):
            raise ContractError(f"Expected {self.T} betas, got {tuple(self.betas.shape)}")
        if not bool(torch.all(self.alpha_bars[1:] < self.alpha_bars[:-1])):
            raise ContractError("alpha_bars must be strictly decreasing")
        if not float(self.alpha_bars[0]) > 0.99:
            raise ContractError(
                f"alpha_bar_0 must exceed 0.99, got {float(self.alpha_bars[0]):.6f}"
            )
        if not float(self.alpha_bars[-1]) < FINAL_ALPHA_BAR_LIMIT:
            raise ContractError(
                f"alpha_bar_(T-1) must be below {FINAL_ALPHA_BAR_LIMIT}, got {float(self.alpha_bars[-1]):.6f}"
            )

    def __len__(self) -> int:
        return self.T


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ContractError(f"Schedule needs T >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(
            f"Need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(
        T=T, betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0)
    )


def default_schedule(T: int) -> NoiseSchedule:
    """The T=1000 linear schedule with betas rescaled by 1000/T."""
    scale = REFERENCE_STEPS / T
    return make_schedule(T, DEFAULT_BETA_START * scale, DEFAULT_BETA_END * scale)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "deterministic"
    n_steps: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SAMPLER_ALIASES:
            raise ContractError(
                f"Unknown sampler '{self.kind}', expected one of {sorted(SAMPLER_ALIASES)}"
            )
        object.__setattr__(self, "kind", SAMPLER_ALIASES[self.kind])
        if self.n_steps < 1:
            raise ContractError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def eta(self) -> float:
        return 1.0 if self.kind == "ancestral" else 0.0


def _coefficient(
    values: torch.Tensor, k: Union[int, torch.Tensor], like: torch.Tensor
) -> torch.Tensor:
    picked = values.to(like.dtype)[torch.as_tensor(k, dtype=torch.long)]
    if picked.ndim == 0:
        return picked
    return picked.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(
    x0: torch.Tensor,
    k: Union[int, torch.Tensor],
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """x^k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps.

    `k` is one timestep, or one per leading (set) index of x0.
    """
    if eps.shape != x0.shape:
        raise ContractError(
            f"eps shape {tuple(eps.shape)} differs from x0 shape {tuple(x0.shape)}"
        )
    steps = torch.as_tensor(k, dtype=torch.long)
    if torch.any(steps < 0) or torch.any(steps >= sched.T):
        raise ContractError(f"Timestep {k} outside [0, {sched.T})")
    alpha_bar = _coefficient(sched.alpha_bars, steps, x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def _as_batch(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ContractError(f"Expected (N, C, H, W) or (B, N, C, H, W) latents, got {tuple(x.shape)}")


def training_step_loss(
    model: NoisePredictor,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    mask: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Noise-prediction loss and the timesteps drawn, one per view set.

    `mask` (broadcastable to x0, 1 = supervised) restricts the squared
    error to valid pixels.
    """
    x0, _ = _as_batch(x0)
    cond, _ = _as_batch(cond)
    if (cond.shape[0], cond.shape[1]) != (x0.shape[0], x0.shape[1]):
        raise ContractError(
            f"Condition {tuple(cond.shape)} does not match targets {tuple(x0.shape)}"
        )
    n_sets, n_views = x0.shape[:2]
    k = torch.randint(0, sched.T, (n_sets,), generator=generator)
    view_steps = k[:, None].expand(n_sets, n_views)
    assert bool(torch.all(view_steps == view_steps[:, :1])), "views of a set share k"

    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    eps_hat = model(q_sample(x0, k, eps, sched), cond, k)
    if eps_hat.shape != eps.shape:
        raise ContractError(
            f"Model returned shape {tuple(eps_hat.shape)}, expected {tuple(eps.shape)}"
        )
    squared = (eps - eps_hat) ** 2
    if mask is None:
        return squared.mean(), k
    weights = torch.broadcast_to(mask.to(x0.dtype), squared.shape)
    total = weights.sum()
    if float(total) == 0.0:
        raise ContractError("Loss mask selects no pixels")
    return (squared * weights).sum() / total, k


def training_loss(
    model: NoisePredictor,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    loss, _ = training_step_loss(model, x0, cond, sched, generator, mask)
    return loss


def sampling_timesteps(T: int, n_steps: int) -> List[int]:
    """Uniformly strided timesteps from T-1 down to 0 (just T-1 for one step)."""
    if not 1 <= n_steps <= T:
        raise ContractError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return [T - 1]
    strided = torch.linspace(T - 1, 0, n_steps, dtype=torch.float64).round().long()
    return [int(k) for k in torch.unique_consecutive(strided)]


def _model_dtype(model: NoisePredictor) -> torch.dtype:
    if isinstance(model, torch.nn.Module):
        for parameter in model.parameters():
            return parameter.dtype
    return torch.float32


@torch.no_grad()
def sample(
    model: NoisePredictor,
    cond: torch.Tensor,
    spec: SamplerSpec,
    sched: NoiseSchedule,
    channels: Optional[int] = None,
) -> torch.Tensor:
    """Denoise pure Gaussian noise into latents conditioned on `cond`.

    Both kinds run the generalized DDIM update over the strided timesteps;
    ancestral uses eta = 1 (the DDPM posterior step when every timestep is
    visited), deterministic uses eta = 0. The last step returns the clean
    estimate without fresh noise.
    """
    cond, single = _as_batch(cond)
    if channels is None:
        config = getattr(model, "config", None)
        channels = getattr(config, "in_channels", cond.shape[2])
    shape = (cond.shape[0], cond.shape[1], channels, cond.shape[3], cond.shape[4])
    generator = torch.Generator().manual_seed(spec.seed)
    x = torch.randn(shape, generator=generator, dtype=cond.dtype)

    timesteps = sampling_timesteps(sched.T, spec.n_steps)
    alpha_bars = sched.alpha_bars.to(cond.dtype)
    for index, t in enumerate(timesteps):
        is_last = index == len(timesteps) - 1
        alpha_bar = alpha_bars[t]
        alpha_bar_prev = (
            torch.ones((), dtype=cond.dtype) if is_last else alpha_bars[timesteps[index + 1]]
        )
        steps = torch.full((cond.shape[0],), t, dtype=torch.long)
        eps_hat = model(x, cond, steps)
        x0_hat = (x - (1.0 - alpha_bar).sqrt() * eps_hat) / alpha_bar.sqrt()
        if is_last:
            x = x0_hat
            break
        sigma = (
            spec.eta
            * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt()
            * (1.0 - alpha_bar / alpha_bar_prev).sqrt()
        )
        direction = (1.0 - alpha_bar_prev - sigma**2).clamp(min=0.0).sqrt() * eps_hat
        x = alpha_bar_prev.sqrt() * x0_hat + direction
        if spec.eta > 0:
            x = x + sigma * torch.randn(shape, generator=generator, dtype=cond.dtype)
        logger.debug("Sampling step %d/%d at k=%d", index + 1, len(timesteps), t)
    return x[0] if single else x


def restore(
    model: NoisePredictor,
    codec: Codec,
    degraded: ViewSet,
    spec: SamplerSpec,
    sched: NoiseSchedule,
    single_frame: bool = False,
) -> ViewSet:
    """Encode the degraded set, sample clean latents, decode and clip.

    With single_frame every view is restored on its own as a 1-view set.
    """
    if single_frame:
        images = [
            restore(model, codec, degraded_view, spec, sched).images[0]
            for degraded_view in _single_views(degraded)
        ]
        return degraded.with_images(images)
    cond = codec.encode(degraded, dtype=_model_dtype(model))
    latents = sample(model, cond, spec, sched)
    return codec.decode(latents, degraded)


def _single_views(vs: ViewSet) -> List[ViewSet]:
    return [
        ViewSet(
            scene_id=vs.scene_id,
            view_indices=[vs.view_indices[i]],
            images=[vs.images[i]],
            depths=None if vs.depths is None else [vs.depths[i]],
            cameras=None if vs.cameras is None else [vs.cameras[i]],
        )
        for i in range(len(vs))
    ]
