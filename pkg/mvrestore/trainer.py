# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import csv
import json
import logging
import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import IdentityCodec, make_codec
from .dataio import DepthMap, Image, Scene, ViewSet
from .degradations import (
    BlurParams,
    DeblurTask,
    DegradationTask,
    SRTask,
    degrade_viewset,
)
from .diffusion import NoiseSchedule, make_schedule, training_step_loss
from .exceptions import CheckpointError, ConfigError, ContractError, TrainingError
from .mv_unet import MVUNet, MVUNetConfig, init_params

logger = logging.getLogger(__name__)

ViewSets = Dict[str, Dict[int, List[int]]]

TASK_KINDS = ("deblur", "sr", "depth")
DEGENERATE_DEPTH_RANGE = 1e-6
LOSS_FILE = "loss.csv"
CHECKPOINT_DIR = "checkpoints"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "deblur"
    blur: BlurParams = field(default_factory=lambda: BlurParams.preset("desk"))
    sr_factor: int = 4

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"Unknown task '{self.kind}', expected one of {list(TASK_KINDS)}")
        if self.sr_factor < 2:
            raise ConfigError(f"sr_factor must be >= 2, got {self.sr_factor}")

    @property
    def degradation(self) -> DegradationTask:
        if self.kind == "deblur":
            return DeblurTask(self.blur)
        if self.kind == "sr":
            return SRTask(self.sr_factor)
        raise ContractError("The depth task has no image degradation")

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "blur": asdict(self.blur), "sr_factor": self.sr_factor}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSpec":
        return cls(
            kind=data["kind"], blur=BlurParams(**data["blur"]), sr_factor=data["sr_factor"]
        )


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_sets: int = 2
    views_per_set: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 500
    codec: str = "identity"
    log_every: int = 50
    loss_history: int = 1000
    max_resample: int = 32
    progress: bool = True

    def __post_init__(self) -> None:
        if self.views_per_set < 1:
            raise ConfigError(f"views_per_set must be >= 1, got {self.views_per_set}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 0 or self.batch_sets < 1:
            raise ConfigError(
                f"Need iterations >= 0 and batch_sets >= 1, got {self.iterations} and {self.batch_sets}"
            )
        if self.checkpoint_every < 0 or self.log_every < 1 or self.max_resample < 1:
            raise ConfigError("checkpoint_every must be >= 0, log_every and max_resample >= 1")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError(
                f"Adam betas must be in [0, 1), got ({self.adam_beta1}, {self.adam_beta2})"
            )


@dataclass(frozen=True)
class DepthNormalization:
    """Maps metric depth to [0, 1] via the 2nd and 98th percentile."""

    lo: float
    hi: float

    @property
    def degenerate(self) -> bool:
        return self.hi - self.lo < DEGENERATE_DEPTH_RANGE

    @classmethod
    def from_depths(cls, depths: Sequence[DepthMap]) -> "DepthNormalization":
        values = np.concatenate([d.depth[d.mask] for d in depths])
        if values.size == 0:
            raise ContractError("Cannot normalize depth: no valid pixels")
        lo, hi = np.percentile(values, [2.0, 98.0])
        return cls(float(lo), float(hi))

    def to_dict(self) -> Dict[str, float]:
        return {"lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DepthNormalization":
        return cls(float(data["lo"]), float(data["hi"]))


def depth_task_encode(
    depth: DepthMap, normalization: Optional[DepthNormalization] = None
) -> Image:
    """Normalized depth replicated to 3 channels; invalid pixels become 0."""
    normalization = normalization or DepthNormalization.from_depths([depth])
    if normalization.degenerate:
        values = np.full(depth.depth.shape, 0.5)
    else:
        values = (depth.depth - normalization.lo) / (normalization.hi - normalization.lo)
    values = np.where(depth.mask, np.clip(values, 0.0, 1.0), 0.0)
    return Image(np.repeat(values[:, :, None], 3, axis=2))


def depth_task_decode(
    image: Image,
    normalization: DepthNormalization,
    valid: Optional[np.ndarray] = None,
) -> DepthMap:
    values = image.pixels.mean(axis=2)
    if normalization.degenerate:
        depth = np.full(values.shape, (normalization.lo + normalization.hi) / 2.0)
    else:
        depth = normalization.lo + values * (normalization.hi - normalization.lo)
    return DepthMap(depth, valid=valid)


def save_viewsets(viewsets: ViewSets, path: Union[str, Path]) -> None:
    # JSON object keys are strings
    data = {
        scene_id: {str(anchor): list(candidates) for anchor, candidates in lists.items()}
        for scene_id, lists in viewsets.items()
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def load_viewsets(path: Union[str, Path]) -> ViewSets:
    try:
        data = json.loads(Path(path).read_text())
        return {
            scene_id: {int(anchor): [int(i) for i in candidates] for anchor, candidates in lists.items()}
            for scene_id, lists in data.items()
        }
    except OSError as e:
        raise ConfigError(f"Could not read view sets '{path}': {e}") from e
    except (AttributeError, TypeError, ValueError) as e:
        raise ConfigError(f"View sets file '{path}' is malformed: {e}") from e


def step_generators(seed: int, step: int) -> Tuple[np.random.Generator, torch.Generator]:
    """Random streams of one training step, derived from (seed, step) only."""
    sequence = np.random.SeedSequence([seed, step])
    torch_seed = int(sequence.generate_state(1, dtype=np.uint64)[0] % (2**63))
    return np.random.default_rng(sequence), torch.Generator().manual_seed(torch_seed)


def draw_view_indices(
    scenes: Sequence[Scene],
    viewsets: ViewSets,
    n_views: int,
    rng: np.random.Generator,
    max_resample: int = 32,
) -> Tuple[int, List[int], int]:
    """Pick (scene position, shuffled view indices, anchor) for one training set.

    Anchors whose candidate list is shorter than n_views - 1 are skipped with
    a warning and the draw is repeated.
    """
    for _ in range(max_resample):
        scene_position = int(rng.integers(len(scenes)))
        scene = scenes[scene_position]
        lists = viewsets.get(scene.scene_id, {})
        anchors = sorted(lists) if lists else list(range(len(scene)))
        anchor = int(anchors[int(rng.integers(len(anchors)))])
        if n_views == 1:
            return scene_position, [anchor], anchor
        candidates = lists.get(anchor, [])
        if len(candidates) < n_views - 1:
            warnings.warn(
                f"Anchor {anchor} of scene '{scene.scene_id}' has {len(candidates)} candidates, need {n_views - 1}; resampling",
                RuntimeWarning,
            )
            continue
        picked = rng.choice(np.asarray(candidates), size=n_views - 1, replace=False)
        indices = [anchor] + [int(i) for i in picked]
        order = rng.permutation(n_views)
        return scene_position, [indices[i] for i in order], anchor
    raise TrainingError(
        f"No anchor with {n_views - 1} candidates found after {max_resample} draws"
    )


def sample_training_set(
    scenes: Sequence[Scene],
    viewsets: ViewSets,
    cfg: TrainConfig,
    task: TaskSpec,
    rng: np.random.Generator,
) -> Tuple[ViewSet, ViewSet]:
    """(clean, degraded) view sets; the depth task conditions on clean RGB."""
    if not scenes:
        raise TrainingError("Training needs at least one scene")
    position, indices, _ = draw_view_indices(
        scenes, viewsets, cfg.views_per_set, rng, cfg.max_resample
    )
    clean = scenes[position].view_set(indices)
    if task.kind == "depth":
        return clean, clean
    degradation_seed = int(rng.integers(2**32))
    return clean, degrade_viewset(clean, task.degradation, degradation_seed)


@dataclass
class TrainState:
    step: int
    model: MVUNet
    optimizer: torch.optim.Adam
    loss_history: Deque[float]

    def parameters_copy(self) -> Dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.model.named_parameters()}


def make_optimizer(model: MVUNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )


def new_train_state(model_config: MVUNetConfig, cfg: TrainConfig) -> TrainState:
    model = init_params(model_config, cfg.seed)
    return TrainState(
        step=0,
        model=model,
        optimizer=make_optimizer(model, cfg),
        loss_history=deque(maxlen=cfg.loss_history),
    )


def _schedule_metadata(sched: NoiseSchedule) -> Dict[str, Any]:
    return {
        "T": sched.T,
        "beta_start": float(sched.betas[0]),
        "beta_end": float(sched.betas[-1]),
    }


def state_to_checkpoint(
    state: TrainState,
    cfg: TrainConfig,
    task: TaskSpec,
    sched: NoiseSchedule,
    depth_normalization: Optional[DepthNormalization] = None,
) -> Checkpoint:
    tensors: Dict[str, torch.Tensor] = {
        f"model/{name}": p for name, p in state.model.named_parameters()
    }
    optimizer_steps: Dict[str, float] = {}
    names = [name for name, _ in state.model.named_parameters()]
    for index, moments in state.optimizer.state_dict()["state"].items():
        name = names[index]
        tensors[f"optim/{name}/exp_avg"] = moments["exp_avg"]
        tensors[f"optim/{name}/exp_avg_sq"] = moments["exp_avg_sq"]
        optimizer_steps[name] = float(moments["step"])
    metadata: Dict[str, Any] = {
        "step": state.step,
        "model_config": asdict(state.model.config),
        "schedule": _schedule_metadata(sched),
        "task": task.to_dict(),
        "train": asdict(cfg),
        "loss_history": list(state.loss_history),
        "optimizer_steps": optimizer_steps,
    }
    if depth_normalization is not None:
        metadata["depth_normalization"] = depth_normalization.to_dict()
    return Checkpoint(metadata=metadata, tensors=tensors)


def model_from_checkpoint(checkpoint: Checkpoint) -> MVUNet:
    try:
        config = MVUNetConfig(**checkpoint.metadata["model_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint has no usable model config: {e}") from e
    model = init_params(config, seed=0)
    weights = {
        name[len("model/") :]: tensor
        for name, tensor in checkpoint.tensors.items()
        if name.startswith("model/")
    }
    try:
        model.load_state_dict(weights, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint weights do not match the model config: {e}") from e
    return model


def schedule_from_checkpoint(checkpoint: Checkpoint) -> NoiseSchedule:
    schedule = checkpoint.metadata["schedule"]
    return make_schedule(schedule["T"], schedule["beta_start"], schedule["beta_end"])


def depth_normalization_from_checkpoint(checkpoint: Checkpoint) -> DepthNormalization:
    """Depth range the model was trained against, used to decode depth predictions."""
    try:
        return DepthNormalization.from_dict(checkpoint.metadata["depth_normalization"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint has no usable depth normalization: {e}") from e


def state_from_checkpoint(checkpoint: Checkpoint, cfg: TrainConfig) -> TrainState:
    model = model_from_checkpoint(checkpoint)
    optimizer = make_optimizer(model, cfg)
    names = [name for name, _ in model.named_parameters()]
    steps = checkpoint.metadata.get("optimizer_steps", {})
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for index, name in enumerate(names):
        if name not in steps:
            continue
        state[index] = {
            "step": torch.tensor(steps[name], dtype=torch.float32),
            "exp_avg": checkpoint.tensors[f"optim/{name}/exp_avg"],
            "exp_avg_sq": checkpoint.tensors[f"optim/{name}/exp_avg_sq"],
        }
    optimizer.load_state_dict(
        {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}
    )
    history: Deque[float] = deque(
        checkpoint.metadata.get("loss_history", []), maxlen=cfg.loss_history
    )
    return TrainState(
        step=int(checkpoint.metadata["step"]),
        model=model,
        optimizer=optimizer,
        loss_history=history,
    )


def load_train_state(path: Union[str, Path], cfg: TrainConfig) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path), cfg)


def checkpoint_path(out_dir: Union[str, Path], step: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"step_{step:07d}.ckpt"


def _latent_mask(mask: torch.Tensor, latent_size: Tuple[int, int]) -> torch.Tensor:
    if tuple(mask.shape[-2:]) == latent_size:
        return mask
    pooled = F.adaptive_avg_pool2d(mask, latent_size)
    return (pooled == 1.0).to(mask.dtype)


class _TaskEncoder:
    """Turns sampled view sets into (target, condition, mask) latents."""

    def __init__(self, task: TaskSpec, codec: IdentityCodec, dtype: torch.dtype) -> None:
        self.task = task
        self.codec = codec
        self.dtype = dtype
        self._normalizations: Dict[str, DepthNormalization] = {}

    def normalization(self, scene: Scene) -> DepthNormalization:
        if scene.scene_id not in self._normalizations:
            self._normalizations[scene.scene_id] = DepthNormalization.from_depths(
                [view.depth for view in scene]
            )
        return self._normalizations[scene.scene_id]

    def encode(
        self, scene: Scene, clean: ViewSet, degraded: ViewSet
    ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        cond = self.codec.encode(degraded, self.dtype)
        if self.task.kind != "depth":
            return self.codec.encode(clean, self.dtype), cond, None
        assert clean.depths is not None
        normalization = self.normalization(scene)
        target = clean.with_images(
            [depth_task_encode(depth, normalization) for depth in clean.depths]
        )
        mask = torch.as_tensor(
            np.stack([depth.mask for depth in clean.depths])[:, None], dtype=self.dtype
        )
        latent_size = (cond.shape[-2], cond.shape[-1])
        return self.codec.encode(target, self.dtype), cond, _latent_mask(mask, latent_size)


def _trim_loss_rows(path: Path, last_step: int) -> None:
    """Drop rows written after `last_step` by an earlier, interrupted run."""
    if not path.exists():
        return
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        path.unlink()
        return
    kept = [row for row in rows[1:] if int(row[0]) <= last_step]
    if len(kept) == len(rows) - 1:
        return
    logger.info("Dropping %d loss rows after step %d", len(rows) - 1 - len(kept), last_step)
    with open(path, "w", newline="") as handle:
        csv.writer(handle).writerows(rows[:1] + kept)


def _append_loss_row(path: Path, step: int, loss: float, k: torch.Tensor) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="") as handle:
        writer = csv.writer(handle)
        if new_file:
            writer.writerow(["step", "loss", "k"])
        writer.writerow([step, repr(loss), ";".join(str(int(v)) for v in k)])


def train(
    scenes: Sequence[Scene],
    viewsets: ViewSets,
    cfg: TrainConfig,
    task: TaskSpec,
    model_config: MVUNetConfig,
    sched: NoiseSchedule,
    out_dir: Optional[Union[str, Path]] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Run Adam steps on the noise-prediction loss until cfg.iterations.

    Every step draws its data and noise from generators seeded by
    (cfg.seed, step), so a run resumed from a checkpoint continues exactly
    like an uninterrupted one.

    Raises:
        TrainingError: On a non-finite loss or when no usable set can be drawn.
    """
    if not scenes:
        raise TrainingError("Training needs at least one scene")
    state = state or new_train_state(model_config, cfg)
    codec = make_codec(cfg.codec, channels=model_config.in_channels)
    encoder = _TaskEncoder(task, codec, next(state.model.parameters()).dtype)
    by_id = {scene.scene_id: scene for scene in scenes}
    # restore decodes depth with the range of all training scenes; eval aligns scale and bias
    depth_normalization = (
        DepthNormalization.from_depths([view.depth for scene in scenes for view in scene])
        if task.kind == "depth"
        else None
    )
    loss_path = Path(out_dir) / LOSS_FILE if out_dir is not None else None
    if out_dir is not None:
        (Path(out_dir) / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    if loss_path is not None:
        _trim_loss_rows(loss_path, state.step)

    state.model.train()
    progress = tqdm(
        total=cfg.iterations,
        initial=state.step,
        disable=not cfg.progress,
        desc="train",
    )
    with progress:
        while state.step < cfg.iterations:
            rng, generator = step_generators(cfg.seed, state.step)
            targets: List[torch.Tensor] = []
            conds: List[torch.Tensor] = []
            masks: List[torch.Tensor] = []
            set_ids: List[str] = []
            for _ in range(cfg.batch_sets):
                clean, degraded = sample_training_set(scenes, viewsets, cfg, task, rng)
                target, cond, mask = encoder.encode(by_id[clean.scene_id], clean, degraded)
                targets.append(target)
                conds.append(cond)
                if mask is not None:
                    masks.append(mask)
                set_ids.append(f"{clean.scene_id}:{clean.view_indices}")

            mask_batch = torch.stack(masks) if masks else None
            loss, k = training_step_loss(
                state.model,
                torch.stack(targets),
                torch.stack(conds),
                sched,
                generator,
                mask_batch,
            )
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(
                    f"Non-finite loss {value} at step {state.step + 1} (k={k.tolist()}, sets={set_ids})"
                )
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()

            state.step += 1
            state.loss_history.append(value)
            progress.update(1)
            if loss_path is not None:
                _append_loss_row(loss_path, state.step, value, k)
            if state.step % cfg.log_every == 0:
                logger.info("step %d loss %.6f", state.step, value)
            if (
                out_dir is not None
                and cfg.checkpoint_every
                and state.step % cfg.checkpoint_every == 0
            ):
                save_checkpoint(
                    state_to_checkpoint(state, cfg, task, sched, depth_normalization),
                    checkpoint_path(out_dir, state.step),
                )

    if out_dir is not None and not checkpoint_path(out_dir, state.step).exists():
        save_checkpoint(
            state_to_checkpoint(state, cfg, task, sched, depth_normalization),
            checkpoint_path(out_dir, state.step),
        )
    return state
