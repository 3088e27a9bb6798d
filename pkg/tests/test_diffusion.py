# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from typing import Callable

import numpy as np
import pytest
import torch

from mvrestore import (
    ContractError,
    Image,
    MVUNet,
    MVUNetConfig,
    SamplerSpec,
    ViewSet,
    default_schedule,
    make_schedule,
    q_sample,
    restore,
    sample,
    sampling_timesteps,
    training_loss,
)
from mvrestore.codec import IdentityCodec
from mvrestore.diffusion import NoiseSchedule, training_step_loss


def test_default_schedule() -> None:
    sched = default_schedule(1000)
    assert len(sched) == 1000
    assert sched.betas[0].item() == pytest.approx(1e-4)
    assert sched.betas[-1].item() == pytest.approx(0.02)
    assert sched.alpha_bars[0].item() == pytest.approx(1.0 - 1e-4)
    assert sched.alpha_bars[-1].item() < 0.05


def test_short_schedule_is_rescaled() -> None:
    sched = default_schedule(100)
    assert sched.betas[0].item() == pytest.approx(1e-3)
    assert sched.alpha_bars[-1].item() < 0.05
    assert torch.all(sched.alpha_bars[1:] < sched.alpha_bars[:-1])


def test_schedule_validation() -> None:
    with pytest.raises(ContractError, match="below 0.05"):
        make_schedule(10, 1e-4, 0.02)
    with pytest.raises(ContractError, match="beta_start"):
        make_schedule(100, 0.05, 0.01)
    with pytest.raises(ContractError, match="T >= 1"):
        make_schedule(0, 1e-4, 0.02)
    sched = default_schedule(100)
    with pytest.raises(ContractError, match="Expected 99 betas"):
        NoiseSchedule(99, sched.betas, sched.alphas, sched.alpha_bars)


def test_sampler_spec_aliases() -> None:
    assert SamplerSpec("ddpm").kind == "ancestral"
    assert SamplerSpec("ddpm").eta == 1.0
    assert SamplerSpec("ddim").kind == "deterministic"
    assert SamplerSpec().eta == 0.0
    with pytest.raises(ContractError, match="Unknown sampler 'euler'"):
        SamplerSpec("euler")
    with pytest.raises(ContractError, match="n_steps"):
        SamplerSpec(n_steps=0)


def test_sampling_timesteps() -> None:
    steps = sampling_timesteps(1000, 50)
    assert steps[0] == 999 and steps[-1] == 0
    assert len(steps) == 50
    assert all(a > b for a, b in zip(steps, steps[1:]))

    assert sampling_timesteps(1000, 1) == [999]
    assert sampling_timesteps(10, 10) == list(range(9, -1, -1))
    for n_steps in (0, 11):
        with pytest.raises(ContractError, match=r"n_steps must be in \[1, 10\]"):
            sampling_timesteps(10, n_steps)


def test_q_sample_can_be_inverted() -> None:
    sched = default_schedule(1000)
    x0 = torch.rand(3, 2, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(x0)
    k = torch.tensor([0, 500, 999])

    xk = q_sample(x0, k, eps, sched)
    alpha_bar = sched.alpha_bars[k].reshape(-1, 1, 1, 1, 1)
    recovered = (xk - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
    assert torch.allclose(recovered, x0, atol=1e-6)


def test_q_sample_validation() -> None:
    sched = default_schedule(100)
    x0 = torch.zeros(2, 3, 8, 8)
    with pytest.raises(ContractError, match="outside"):
        q_sample(x0, 100, torch.zeros_like(x0), sched)
    with pytest.raises(ContractError, match="eps shape"):
        q_sample(x0, 1, torch.zeros(2, 3, 8, 4), sched)


def test_training_loss_with_zero_predictor_is_noise_power() -> None:
    sched = default_schedule(1000)
    x0 = torch.rand(2, 3, 3, 32, 32, dtype=torch.float64)
    generator = torch.Generator().manual_seed(0)

    loss, k = training_step_loss(
        lambda x, c, t: torch.zeros_like(x), x0, x0, sched, generator
    )
    assert k.shape == (2,)
    assert torch.all((k >= 0) & (k < 1000))
    assert loss.item() == pytest.approx(1.0, abs=0.05)


def test_training_loss_is_reproducible_and_masked() -> None:
    sched = default_schedule(100)
    x0 = torch.rand(1, 2, 3, 8, 8, dtype=torch.float64)

    def predictor(x: torch.Tensor, c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return 0.5 * x

    a = training_loss(predictor, x0, x0, sched, torch.Generator().manual_seed(3))
    b = training_loss(predictor, x0, x0, sched, torch.Generator().manual_seed(3))
    assert a.item() == b.item()

    with pytest.raises(ContractError, match="selects no pixels"):
        training_loss(predictor, x0, x0, sched, mask=torch.zeros(1, 2, 1, 8, 8))
    with pytest.raises(ContractError, match="Model returned shape"):
        training_loss(lambda x, c, t: x[..., :4], x0, x0, sched)


def test_condition_stem_receives_gradient(tiny_model_config: MVUNetConfig) -> None:
    model = MVUNet(tiny_model_config)
    x0 = torch.rand(2, 2, 3, 8, 8)
    cond = torch.rand(2, 2, 3, 8, 8)

    training_loss(model, x0, cond, default_schedule(100)).backward()
    assert model.stem.weight.grad is not None
    assert torch.count_nonzero(model.stem.weight.grad[:, 3:]) > 0


def _oracle(x0: torch.Tensor, sched: torch.Tensor) -> Callable[..., torch.Tensor]:
    def predict(x: torch.Tensor, cond: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        alpha_bar = sched[k[0]]
        return (x - alpha_bar.sqrt() * x0) / (1.0 - alpha_bar).sqrt()

    return predict


@pytest.mark.parametrize("kind", ["deterministic", "ancestral"])
@pytest.mark.parametrize("n_steps", [1, 5, 25])
def test_oracle_noise_predictor_recovers_target(kind: str, n_steps: int) -> None:
    sched = default_schedule(1000)
    x0 = torch.rand(1, 3, 3, 8, 8, dtype=torch.float64)
    cond = torch.zeros_like(x0)

    out = sample(_oracle(x0, sched.alpha_bars), cond, SamplerSpec(kind, n_steps, seed=2), sched)
    assert torch.allclose(out, x0, atol=1e-4)


def test_sampling_is_seeded(tiny_model_config: MVUNetConfig) -> None:
    model = MVUNet(tiny_model_config).eval()
    sched = default_schedule(100)
    cond = torch.rand(2, 3, 8, 8)

    a = sample(model, cond, SamplerSpec("ancestral", 4, seed=1), sched)
    b = sample(model, cond, SamplerSpec("ancestral", 4, seed=1), sched)
    c = sample(model, cond, SamplerSpec("ancestral", 4, seed=2), sched)
    assert a.shape == cond.shape
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_single_frame_restore_matches_one_view_sets(
    tiny_model_config: MVUNetConfig, random_image: Callable[..., Image]
) -> None:
    model = MVUNet(tiny_model_config).eval()
    sched = default_schedule(100)
    spec = SamplerSpec(n_steps=3, seed=7)
    degraded = ViewSet("s", [4, 9], [random_image(8, 8), random_image(8, 8)])

    independent = restore(model, IdentityCodec(), degraded, spec, sched, single_frame=True)
    alone = restore(model, IdentityCodec(), ViewSet("s", [9], [degraded[1]]), spec, sched)

    assert independent.view_indices == [4, 9]
    assert np.array_equal(independent[1].pixels, alone[0].pixels)
    for image in restore(model, IdentityCodec(), degraded, spec, sched):
        assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0
