# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Run configuration: one TOML file with a section per concern.

Section values are checked against the type hints of the dataclass that
owns the section; unknown sections and keys are rejected by name.
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import (
    Any,
    Dict,
    Optional,
    Type,
    TypeVar,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

import tomli_w

from .degradations import BlurParams
from .diffusion import NoiseSchedule, SamplerSpec, default_schedule, make_schedule
from .exceptions import ConfigError, ContractError
from .metrics import MetricOptions
from .mv_unet import MVUNetConfig
from .trainer import TaskSpec, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

T = TypeVar("T")

RESOLVED_CONFIG_FILE = "config.toml"


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None

    def schedule(self) -> NoiseSchedule:
        """Explicit betas when both are given, else the rescaled default."""
        try:
            if self.beta_start is None and self.beta_end is None:
                return default_schedule(self.T)
            if self.beta_start is None or self.beta_end is None:
                raise ConfigError("Set both diffusion.beta_start and diffusion.beta_end, or neither")
            return make_schedule(self.T, self.beta_start, self.beta_end)
        except ContractError as e:
            raise ConfigError(f"Invalid diffusion schedule: {e.message}") from e


@dataclass
class TaskConfig:
    kind: str = "deblur"
    blur_preset: str = "desk"
    size_mean: Optional[float] = None
    size_std: Optional[float] = None
    intensity_min: Optional[float] = None
    intensity_max: Optional[float] = None
    sr_factor: int = 4

    def __post_init__(self) -> None:
        self.task_spec()

    def blur_params(self) -> BlurParams:
        try:
            preset = BlurParams.preset(self.blur_preset)
            return BlurParams(
                size_mean=_pick(self.size_mean, preset.size_mean),
                size_std=_pick(self.size_std, preset.size_std),
                intensity_min=_pick(self.intensity_min, preset.intensity_min),
                intensity_max=_pick(self.intensity_max, preset.intensity_max),
            )
        except ContractError as e:
            raise ConfigError(f"Invalid blur parameters: {e.message}") from e

    def task_spec(self) -> TaskSpec:
        return TaskSpec(kind=self.kind, blur=self.blur_params(), sr_factor=self.sr_factor)


def _pick(value: Optional[float], default: float) -> float:
    return default if value is None else value


@dataclass
class PathsConfig:
    scenes: str = "scenes"
    viewsets: str = "viewsets.json"


@dataclass
class RunConfig:
    model: MVUNetConfig = field(default_factory=MVUNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {
            section.name: _drop_none(asdict(getattr(self, section.name)))
            for section in fields(self)
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], profile: str = "desk") -> "RunConfig":
        base = PROFILES.get(profile)
        if base is None:
            raise ConfigError(f"Unknown profile '{profile}', expected one of {sorted(PROFILES)}")
        merged = base.to_dict()
        section_names = [section.name for section in fields(cls)]
        for name, values in data.items():
            if name not in section_names:
                raise ConfigError(f"Unknown config section '{name}'")
            if not isinstance(values, dict):
                raise ConfigError(f"Config section '{name}' must be a table")
            merged[name].update(values)
        hints = get_type_hints(cls)
        return cls(
            **{
                name: section_from_dict(hints[name], merged[name], name)
                for name in section_names
            }
        )

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write the resolved config next to a run's outputs."""
        path = Path(out_dir) / RESOLVED_CONFIG_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomli_w.dumps(self.to_dict()))
        return path


def _drop_none(values: Dict[str, Any]) -> Dict[str, Any]:
    # TOML has no null; absent keys fall back to defaults
    return {key: value for key, value in values.items() if value is not None}


def coerce_value(value: Any, py_type: Any, key: str) -> Any:
    """Check a TOML value against a type hint, widening int to float."""
    if get_origin(py_type) is Union:
        args = [arg for arg in get_args(py_type) if arg is not type(None)]
        if len(args) == 1:
            return coerce_value(value, args[0], key)
        raise ConfigError(f"Unsupported union type for '{key}'")
    if py_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be a boolean, got {value!r}")
        return value
    if py_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if py_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if py_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string, got {value!r}")
        return value
    if py_type is list or get_origin(py_type) is list:
        if not isinstance(value, list):
            raise ConfigError(f"'{key}' must be an array, got {value!r}")
        args = get_args(py_type)
        if not args:
            return list(value)
        return [coerce_value(item, args[0], f"{key}[{i}]") for i, item in enumerate(value)]
    raise ConfigError(f"Unsupported config type {py_type} for '{key}'")


def section_from_dict(cls: Type[T], values: Dict[str, Any], section: str) -> T:
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    kwargs: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{section}.{key}'")
        kwargs[key] = coerce_value(value, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ContractError as e:
        raise ConfigError(f"Invalid [{section}] section: {e.message}") from e


def _full_profile() -> RunConfig:
    return RunConfig(
        diffusion=DiffusionConfig(T=1000),
        train=TrainConfig(
            iterations=30000,
            batch_sets=8,
            views_per_set=4,
            learning_rate=3e-5,
            checkpoint_every=5000,
        ),
        task=TaskConfig(blur_preset="full_scale"),
    )


PROFILES: Dict[str, RunConfig] = {"desk": RunConfig(), "full": _full_profile()}


def load_run_config(path: Optional[Union[str, Path]] = None, profile: str = "desk") -> RunConfig:
    """Read a TOML run config on top of a profile; no path means the profile."""
    if path is None:
        return RunConfig.from_dict({}, profile)
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as e:
        raise ConfigError(f"Could not read config '{path}': {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Could not parse config '{path}': {e}") from e
    return RunConfig.from_dict(data, profile)

