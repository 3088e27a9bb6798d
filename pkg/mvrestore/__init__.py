# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import IdentityCodec, IdentityDS2Codec, make_codec
from .config import RunConfig, load_run_config
from .dataio import (
    CameraView,
    DepthMap,
    Image,
    Scene,
    SceneView,
    ViewSet,
    load_scene,
    save_scene,
)
from .degradations import (
    BlurKernel,
    BlurParams,
    DeblurTask,
    SRTask,
    apply_blur,
    degrade_sr,
    degrade_viewset,
    resize_bicubic,
    synth_motion_kernel,
)
from .diffusion import (
    NoiseSchedule,
    SamplerSpec,
    default_schedule,
    make_schedule,
    q_sample,
    restore,
    sample,
    sampling_timesteps,
    training_loss,
)
from .exceptions import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateFitError,
    MVRestoreError,
    SceneLoadError,
    SceneWriteError,
    TrainingError,
    UndefinedMetricError,
)
from .geometry import (
    Affine2D,
    CorrespondenceField,
    compute_correspondences,
    fit_affine,
    overlap_ratio,
    project,
    select_test_views,
    select_view_sets,
    unproject,
    warp_patch_affine,
)
from .matcher import HarrisNCCMatcher
from .metrics import (
    MetricOptions,
    MetricReport,
    RandomProjectionBackend,
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
from .mv_unet import (
    Attention3D,
    MVUNet,
    MVUNetConfig,
    Spatial3DResBlock,
    count_parameters,
    init_params,
)
from .synthetic import SceneSpec, generate_synthetic_scene
from .trainer import TaskSpec, TrainConfig, TrainState, train

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "IdentityCodec",
    "IdentityDS2Codec",
    "make_codec",
    "RunConfig",
    "load_run_config",
    "CameraView",
    "DepthMap",
    "Image",
    "Scene",
    "SceneView",
    "ViewSet",
    "load_scene",
    "save_scene",
    "BlurKernel",
    "BlurParams",
    "DeblurTask",
    "SRTask",
    "apply_blur",
    "degrade_sr",
    "degrade_viewset",
    "resize_bicubic",
    "synth_motion_kernel",
    "NoiseSchedule",
    "SamplerSpec",
    "default_schedule",
    "make_schedule",
    "q_sample",
    "restore",
    "sample",
    "sampling_timesteps",
    "training_loss",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateFitError",
    "MVRestoreError",
    "SceneLoadError",
    "SceneWriteError",
    "TrainingError",
    "UndefinedMetricError",
    "Affine2D",
    "CorrespondenceField",
    "compute_correspondences",
    "fit_affine",
    "overlap_ratio",
    "project",
    "select_test_views",
    "select_view_sets",
    "unproject",
    "warp_patch_affine",
    "HarrisNCCMatcher",
    "MetricOptions",
    "MetricReport",
    "RandomProjectionBackend",
    "absrel_delta1",
    "align_scale_bias",
    "count_correspondences",
    "default_perceptual_backend",
    "evaluate_depths",
    "evaluate_images",
    "geometric_consistency",
    "psnr",
    "ssim",
    "visual_consistency",
    "Attention3D",
    "MVUNet",
    "MVUNetConfig",
    "Spatial3DResBlock",
    "count_parameters",
    "init_params",
    "SceneSpec",
    "generate_synthetic_scene",
    "TaskSpec",
    "TrainConfig",
    "TrainState",
    "train",
]
