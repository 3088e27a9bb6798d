# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""The `mvrestore` command: generate, synth, select-views, train, restore, eval, plot.

Every sub-command exits 0 on success. Failures print one JSON line
``{"error": <class>, "message": <text>}`` to stderr and exit 1 (2 for
usage errors).
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .codec import make_codec
from .config import (
    PROFILES,
    DiffusionConfig,
    RunConfig,
    TaskConfig,
    load_run_config,
)
from .dataio import (
    DEPTH_DIR,
    IMAGES_DIR,
    Scene,
    SceneView,
    list_scene_dirs,
    load_scene,
    read_depth,
    read_image,
    save_scene,
    write_depth,
    write_image,
)
from .degradations import BLUR_PRESETS, degrade_image, view_rng
from .diffusion import SAMPLER_ALIASES, SamplerSpec, restore
from .exceptions import ConfigError, MVRestoreError, SceneLoadError
from .geometry import select_test_views, select_view_sets
from .matcher import HarrisNCCMatcher
from .metrics import MetricOptions, evaluate_depths, evaluate_images
from .plotting import plot_loss_curve, plot_metric_vs_views, read_report, render_metric_table
from .synthetic import SceneSpec, generate_synthetic_scene
from .trainer import (
    TaskSpec,
    TrainConfig,
    ViewSets,
    depth_normalization_from_checkpoint,
    depth_task_decode,
    load_train_state,
    load_viewsets,
    model_from_checkpoint,
    save_viewsets,
    schedule_from_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

VIEWS_FILE = "views.json"
NORMALIZATION_FILE = "normalization.json"
RESTORED_DIR = "restored"
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": message})


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are single JSON lines."""

    def error(self, message: str) -> NoReturn:
        self.exit(EXIT_USAGE, _error_line("UsageError", f"{self.prog}: {message}") + "\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view indices, got '{text}'")


def _scene_seed(seed: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def _resolve_seed(args: argparse.Namespace, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _load_scenes(root: Path) -> List[Scene]:
    if not root.is_dir():
        raise SceneLoadError(f"Scene root '{root}' is not a directory")
    scenes = [load_scene(path) for path in list_scene_dirs(root)]
    if not scenes:
        raise SceneLoadError(f"No scene directories found below '{root}'")
    return scenes


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_generate(args: argparse.Namespace) -> int:
    """Write synthetic scene directories with exact depth and poses."""
    seed = _resolve_seed(args)
    out = Path(args.out)
    written = []
    for offset in range(args.n_scenes):
        spec = SceneSpec(
            n_views=args.n_views,
            resolution=(args.height, args.width),
            seed=seed + offset,
            n_boxes=args.n_boxes,
            target_overlap=args.target_overlap,
        )
        scene = generate_synthetic_scene(spec)
        save_scene(scene, out / spec.name)
        logger.info("Wrote scene '%s' with %d views", spec.name, len(scene))
        written.append(spec.name)
    _emit({"scenes": written, "out": str(out)})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """Degrade every view of every scene; depth and poses are copied."""
    seed = _resolve_seed(args)
    task_config = TaskConfig(
        kind=args.task,
        blur_preset=args.preset,
        size_mean=args.size_mean,
        size_std=args.size_std,
        intensity_min=args.intensity_min,
        intensity_max=args.intensity_max,
        sr_factor=args.factor,
    )
    task = task_config.task_spec()
    if task.kind == "depth":
        raise ConfigError("synth degrades images; use --task deblur or --task sr")
    out = Path(args.out)
    for position, scene in enumerate(_load_scenes(Path(args.scenes))):
        scene_seed = _scene_seed(seed, position)
        views = [
            SceneView(
                image=degrade_image(view.image, task.degradation, view_rng(scene_seed, index)),
                depth=view.depth,
                camera=view.camera,
            )
            for index, view in enumerate(scene)
        ]
        save_scene(Scene(scene_id=scene.scene_id, views=views), out / scene.scene_id)
        logger.info("Degraded scene '%s' (%s)", scene.scene_id, task.kind)
    RunConfig(task=task_config).write(out)
    _emit({"task": task.kind, "out": str(out)})
    return 0


def cmd_select_views(args: argparse.Namespace) -> int:
    """Candidate lists per anchor view whose overlap lies in --range."""
    lo, hi = args.range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"--range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")
    viewsets: ViewSets = {}
    for scene in _load_scenes(Path(args.scenes)):
        viewsets[scene.scene_id] = select_view_sets(scene, (lo, hi), args.list_size)
        non_empty = sum(1 for candidates in viewsets[scene.scene_id].values() if candidates)
        logger.info(
            "Scene '%s': %d of %d anchors have candidates", scene.scene_id, non_empty, len(scene)
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_viewsets(viewsets, out)
    _emit({"scenes": sorted(viewsets), "out": str(out)})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.profile)
    if args.scenes is not None:
        config.paths.scenes = args.scenes
    if args.viewsets is not None:
        config.paths.viewsets = args.viewsets
    if args.iterations is not None:
        config.train.iterations = args.iterations
    config.train.seed = _resolve_seed(args, config.train.seed)
    if args.no_progress:
        config.train.progress = False
    # re-run validation on the overridden values
    config.train = TrainConfig(**vars(config.train))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out)

    scenes = _load_scenes(Path(config.paths.scenes))
    viewsets_path = Path(config.paths.viewsets)
    if viewsets_path.is_file():
        viewsets = load_viewsets(viewsets_path)
    elif config.train.views_per_set == 1:
        viewsets = {}
    else:
        raise ConfigError(f"View sets file '{viewsets_path}' not found; run select-views first")

    state = load_train_state(args.resume, config.train) if args.resume else None
    state = train(
        scenes,
        viewsets,
        config.train,
        config.task.task_spec(),
        config.model,
        config.diffusion.schedule(),
        out_dir=out,
        state=state,
    )
    final_loss = state.loss_history[-1] if state.loss_history else None
    logger.info("Training finished at step %d", state.step)
    _emit({"out": str(out), "step": state.step, "loss": final_loss})
    return 0


def _task_config(task: TaskSpec) -> TaskConfig:
    return TaskConfig(
        kind=task.kind,
        size_mean=task.blur.size_mean,
        size_std=task.blur.size_std,
        intensity_min=task.blur.intensity_min,
        intensity_max=task.blur.intensity_max,
        sr_factor=task.sr_factor,
    )


def cmd_restore(args: argparse.Namespace) -> int:
    """Restore a view set of one scene with a trained checkpoint."""
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    model.eval()
    sched = schedule_from_checkpoint(checkpoint)
    task = TaskSpec.from_dict(checkpoint.metadata["task"])
    if args.task is not None and args.task != task.kind:
        raise ConfigError(
            f"Checkpoint was trained for task '{task.kind}', not '{args.task}'"
        )
    normalization = depth_normalization_from_checkpoint(checkpoint) if task.kind == "depth" else None
    train_config = TrainConfig(**checkpoint.metadata["train"])
    codec = make_codec(train_config.codec, channels=model.config.in_channels)
    seed = _resolve_seed(args)
    sampler = SamplerSpec(kind=args.sampler, n_steps=args.steps, seed=seed)

    scene = load_scene(args.scene)
    if args.views is not None:
        views = args.views
    elif args.reference is not None:
        views = select_test_views(
            len(scene), args.reference, np.random.default_rng(seed), args.n_select, args.window
        )
    else:
        views = list(range(len(scene)))
    degraded = scene.view_set(views)
    with torch.no_grad():
        restored = restore(model, codec, degraded, sampler, sched, single_frame=args.single_frame)

    out = Path(args.out) if args.out is not None else Path(args.scene) / RESTORED_DIR
    out.mkdir(parents=True, exist_ok=True)
    if normalization is not None:
        (out / DEPTH_DIR).mkdir(exist_ok=True)
        for view, image in zip(views, restored.images):
            write_depth(depth_task_decode(image, normalization), out / DEPTH_DIR / f"{view:04d}.fdepth")
        (out / NORMALIZATION_FILE).write_text(
            json.dumps(normalization.to_dict(), indent=2)
        )
    else:
        (out / IMAGES_DIR).mkdir(exist_ok=True)
        for view, image in zip(views, restored.images):
            write_image(image, out / IMAGES_DIR / f"{view:04d}.png")

    (out / VIEWS_FILE).write_text(
        json.dumps(
            {
                "scene_id": scene.scene_id,
                "views": views,
                "task": task.kind,
                "single_frame": args.single_frame,
            },
            indent=2,
        )
    )
    schedule = checkpoint.metadata["schedule"]
    RunConfig(
        model=model.config,
        diffusion=DiffusionConfig(
            T=schedule["T"], beta_start=schedule["beta_start"], beta_end=schedule["beta_end"]
        ),
        train=train_config,
        task=_task_config(task),
        sampler=sampler,
    ).write(out)
    logger.info("Restored views %s of '%s' into '%s'", views, scene.scene_id, out)
    _emit({"out": str(out), "views": views, "task": task.kind})
    return 0


def _prediction_views(pred_dir: Path, subdir: str, suffix: str) -> List[int]:
    views_file = pred_dir / VIEWS_FILE
    if views_file.is_file():
        return [int(view) for view in json.loads(views_file.read_text())["views"]]
    files = sorted((pred_dir / subdir).glob(f"*{suffix}"))
    if not files:
        raise SceneLoadError(f"No predictions found in '{pred_dir / subdir}'")
    try:
        return [int(path.stem) for path in files]
    except ValueError as e:
        raise SceneLoadError(f"Prediction file names in '{pred_dir / subdir}' are not view indices: {e}")


def cmd_eval(args: argparse.Namespace) -> int:
    """Score predictions against a ground-truth scene and write report.json."""
    options = load_run_config(args.config).metrics if args.config else MetricOptions()
    if args.no_matches:
        options = replace(options, count_matches=False)
    gt_scene = load_scene(args.gt_scene)
    pred_dir = Path(args.pred_dir)

    if args.task == "depth":
        views = _prediction_views(pred_dir, DEPTH_DIR, ".fdepth")
        gt = gt_scene.view_set(views)
        depths = [read_depth(pred_dir / DEPTH_DIR / f"{view:04d}.fdepth") for view in views]
        report = evaluate_depths(depths, gt, options)
    else:
        views = _prediction_views(pred_dir, IMAGES_DIR, ".png")
        gt = gt_scene.view_set(views)
        images = [read_image(pred_dir / IMAGES_DIR / f"{view:04d}.png") for view in views]
        matcher = HarrisNCCMatcher() if options.count_matches else None
        report = evaluate_images(gt.with_images(images), gt, args.task, options, matcher=matcher)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    logger.info("Wrote %s report for '%s' to '%s'", args.task, gt.scene_id, out)
    _emit({"out": str(out), "aggregates": report.aggregates})
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    """Plots and a Markdown table from loss.csv and report.json files only."""
    if args.loss is None and not args.reports:
        raise ConfigError("plot needs --loss and/or --reports")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.loss is not None:
        written.append(str(plot_loss_curve(args.loss, out / "loss.svg", window=args.window)))
    if args.reports:
        reports = [read_report(path) for path in args.reports]
        labels = args.labels or [Path(path).stem for path in args.reports]
        if len(labels) != len(reports):
            raise ConfigError(f"Got {len(labels)} labels for {len(reports)} reports")
        written.append(
            str(plot_metric_vs_views(reports, args.metric, out / f"{args.metric}_vs_views.svg"))
        )
        table = out / "metrics.md"
        table.write_text(render_metric_table(reports, labels))
        written.append(str(table))
    _emit({"written": written})
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed",
        type=int,
        default=argparse.SUPPRESS,
        help="Seed for every random draw of the command",
    )
    parser.add_argument(
        "--verbose", action="store_true", default=argparse.SUPPRESS, help="Log at DEBUG level"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="mvrestore", description="Multi-view diffusion restoration at desk scale."
    )
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random draw")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    generate = commands.add_parser("generate", help="Write synthetic scene directories")
    _add_common(generate)
    generate.add_argument("--out", required=True, help="Directory receiving scene directories")
    generate.add_argument("--n-scenes", type=int, default=1, help="Number of scenes")
    generate.add_argument("--n-views", type=int, default=8, help="Views per scene")
    generate.add_argument("--height", type=int, default=48, help="Image height in pixels")
    generate.add_argument("--width", type=int, default=64, help="Image width in pixels")
    generate.add_argument("--n-boxes", type=int, default=2, help="Boxes in front of the wall")
    generate.add_argument(
        "--target-overlap", type=float, default=0.7, help="Consecutive-view overlap to calibrate"
    )
    generate.set_defaults(handler=cmd_generate)

    synth = commands.add_parser("synth", help="Degrade scene images for a task")
    _add_common(synth)
    synth.add_argument("--scenes", required=True, help="Scene directory or root of scenes")
    synth.add_argument("--out", required=True, help="Directory receiving degraded scenes")
    synth.add_argument("--task", choices=["deblur", "sr"], default="deblur")
    synth.add_argument("--preset", choices=sorted(BLUR_PRESETS), default="desk", help="Blur preset")
    synth.add_argument("--size-mean", type=float, default=None, help="Mean kernel size")
    synth.add_argument("--size-std", type=float, default=None, help="Kernel size std")
    synth.add_argument("--intensity-min", type=float, default=None, help="Lowest blur intensity")
    synth.add_argument("--intensity-max", type=float, default=None, help="Highest blur intensity")
    synth.add_argument("--factor", type=int, default=4, help="Super-resolution factor")
    synth.set_defaults(handler=cmd_synth)

    select = commands.add_parser("select-views", help="Build per-anchor candidate view lists")
    _add_common(select)
    select.add_argument("--scenes", required=True, help="Scene directory or root of scenes")
    select.add_argument(
        "--range", type=float, nargs=2, default=[0.6, 0.8], metavar=("LO", "HI"),
        help="Accepted overlap range",
    )
    select.add_argument("--list-size", type=int, default=8, help="Candidates kept per anchor")
    select.add_argument("--out", default="viewsets.json", help="Output JSON file")
    select.set_defaults(handler=cmd_select_views)

    train_parser = commands.add_parser("train", help="Train the multi-view denoiser")
    _add_common(train_parser)
    train_parser.add_argument("--config", default=None, help="TOML run config")
    train_parser.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    train_parser.add_argument("--out", required=True, help="Run directory")
    train_parser.add_argument("--scenes", default=None, help="Overrides paths.scenes")
    train_parser.add_argument("--viewsets", default=None, help="Overrides paths.viewsets")
    train_parser.add_argument("--iterations", type=int, default=None, help="Overrides train.iterations")
    train_parser.add_argument("--resume", default=None, help="Checkpoint to continue from")
    train_parser.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    train_parser.set_defaults(handler=cmd_train)

    restore_parser = commands.add_parser("restore", help="Restore views with a checkpoint")
    _add_common(restore_parser)
    restore_parser.add_argument("--ckpt", required=True, help="Checkpoint file")
    restore_parser.add_argument("--scene", required=True, help="Scene directory to restore")
    view_choice = restore_parser.add_mutually_exclusive_group()
    view_choice.add_argument("--views", type=_int_list, default=None, help="e.g. 0,1,2,3")
    view_choice.add_argument(
        "--reference", type=int, default=None, help="Draw --n-select views near this view"
    )
    restore_parser.add_argument("--n-select", type=int, default=4, help="Views drawn with --reference")
    restore_parser.add_argument("--window", type=int, default=20, help="Nearest views --reference draws from")
    restore_parser.add_argument("--steps", type=int, default=50, help="Sampling steps")
    restore_parser.add_argument(
        "--sampler", choices=sorted(SAMPLER_ALIASES), default="ddim", help="Sampler kind"
    )
    restore_parser.add_argument(
        "--single-frame", action="store_true", help="Restore every view on its own"
    )
    restore_parser.add_argument(
        "--task", choices=["deblur", "sr", "depth"], default=None, help="Must match the checkpoint"
    )
    restore_parser.add_argument("--out", default=None, help="Defaults to <scene>/restored")
    restore_parser.set_defaults(handler=cmd_restore)

    evaluate = commands.add_parser("eval", help="Score predictions against ground truth")
    _add_common(evaluate)
    evaluate.add_argument("--task", choices=["deblur", "sr", "depth"], required=True)
    evaluate.add_argument("--pred-dir", required=True, help="Output directory of restore")
    evaluate.add_argument("--gt-scene", required=True, help="Clean ground-truth scene")
    evaluate.add_argument("--out", default="report.json", help="Report file")
    evaluate.add_argument("--config", default=None, help="TOML file with a [metrics] section")
    evaluate.add_argument(
        "--no-matches", action="store_true", help="Skip correspondence counting"
    )
    evaluate.set_defaults(handler=cmd_eval)

    plot = commands.add_parser("plot", help="SVG plots and a Markdown table from run outputs")
    _add_common(plot)
    plot.add_argument("--loss", default=None, help="loss.csv of a training run")
    plot.add_argument("--reports", nargs="*", default=[], help="report.json files")
    plot.add_argument("--labels", nargs="*", default=None, help="Row labels for the reports")
    plot.add_argument("--metric", default="psnr", help="Metric of the bar chart")
    plot.add_argument("--window", type=int, default=50, help="Loss moving-average window")
    plot.add_argument("--out", required=True, help="Directory receiving plots")
    plot.set_defaults(handler=cmd_plot)
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    logging.captureWarnings(True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return int(args.handler(args))
    except MVRestoreError as e:
        print(_error_line(type(e).__name__, e.message), file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(_error_line(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
