"""Run configuration.

Files are YAML mappings keyed by dotted `section.field` names. Nested mappings
are accepted and flattened to the same keys, so both of these set one value:

    trainer.total_steps: 500

    trainer:
      total_steps: 500
"""

import dataclasses
import pathlib
from dataclasses import dataclass, replace
from typing import Any, Iterable, Self

import funcy
import yaml

from .guide import GuideConfig
from .logging import logger
from .noise import NoiseConfig
from .scene import Camera, CameraSampling, RenderSettings
from .targets import TargetsConfig
from .trainer import TrainConfig
from .vgs import VGSConfig

RESOLVED_FILE = "config.resolved.yml"


class ConfigError(ValueError): ...


@dataclass(frozen=True)
class SceneConfig:
    count: int = 4096
    radius: float = 0.5
    opacity: float = 0.1
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class ViewConfig:
    """Single camera used by `render`"""

    azimuth: float = 0.0
    elevation: float = 15.0
    radius: float = 1.0
    fov_y: float = 50.0
    width: int = 64
    height: int = 64

    @property
    def camera(self) -> Camera:
        return Camera(**dataclasses.asdict(self))


@dataclass(frozen=True)
class ConsistencyConfig:
    poses: int = 100
    elevation: float = 30.0
    radius: float = 1.0
    fov_y: float = 50.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.poses < 2:
            raise ValueError("consistency needs at least two poses")


@dataclass(frozen=True)
class NoiseStatsConfig:
    samples: int = 10_000
    correlation_samples: int = 1000
    width: int = 64
    height: int = 64
    azimuth: float = 0.0
    elevation: float = 15.0
    fov_y: float = 50.0
    # azimuth offset of the second view of the correlation pair, degrees
    pair_offset: float = 5.0
    rho: float = 1.0
    batch: int = 64

    def __post_init__(self):
        if self.samples < 2 or self.correlation_samples < 2:
            raise ValueError("noise statistics need at least two samples")


@dataclass(frozen=True)
class GradCheckConfig:
    scenes: int = 20
    gaussians: int = 8
    size: int = 16
    step: float = 1e-4
    tolerance: float = 1e-4
    # vgs pass-through check amplitude
    sigma: float = 0.5

    def __post_init__(self):
        if self.scenes < 1 or self.gaussians < 1 or self.size < 1:
            raise ValueError("gradcheck sizes must be positive")


# section name -> config class
SECTIONS = {
    "scene": SceneConfig,
    "camera": CameraSampling,
    "render": RenderSettings,
    "noise": NoiseConfig,
    "guide": GuideConfig,
    "vgs": VGSConfig,
    "trainer": TrainConfig,
    "targets": TargetsConfig,
    "view": ViewConfig,
    "evaluation": ConsistencyConfig,
    "noise_stats": NoiseStatsConfig,
    "gradcheck": GradCheckConfig,
}


def _is_section(value) -> bool:
    return dataclasses.is_dataclass(value)


def section_fields(cls) -> list[dataclasses.Field]:
    """Fields settable from a file; nested configs are sections of their own"""
    defaults = cls()
    return [f for f in dataclasses.fields(cls) if not _is_section(getattr(defaults, f.name))]


def flatten(mapping: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat |= flatten(value, f"{name}.")
        else:
            flat[name] = value
    return flat


def _coerce(key: str, default, value):
    match default:
        case bool():
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            return value
        case int():
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            return value
        case float():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {value!r}")
            return float(value)
        case str():
            if value is None:
                return ""
            if not isinstance(value, str):
                raise ConfigError(f"{key}: expected a string, got {value!r}")
            return value
        case tuple():
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise ConfigError(f"{key}: expected a list of {len(default)} numbers")
            return tuple(_coerce(key, float(), item) for item in value)
        case None:
            if value is None:
                return None
            return _coerce(key, int(), value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def parse_override(text: str) -> tuple[str, Any]:
    """`key=value`, value read with YAML scalar rules"""
    key, separator, value = text.partition("=")
    if not separator or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        return key.strip(), yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as error:
        raise ConfigError(f"override {text!r}: {error}") from error


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    camera: CameraSampling = dataclasses.field(default_factory=CameraSampling)
    render: RenderSettings = dataclasses.field(default_factory=RenderSettings)
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
    guide: GuideConfig = dataclasses.field(default_factory=GuideConfig)
    vgs: VGSConfig = dataclasses.field(default_factory=VGSConfig)
    trainer: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    targets: TargetsConfig = dataclasses.field(default_factory=TargetsConfig)
    view: ViewConfig = dataclasses.field(default_factory=ViewConfig)
    evaluation: ConsistencyConfig = dataclasses.field(default_factory=ConsistencyConfig)
    noise_stats: NoiseStatsConfig = dataclasses.field(default_factory=NoiseStatsConfig)
    gradcheck: GradCheckConfig = dataclasses.field(default_factory=GradCheckConfig)

    # -------- construction

    @classmethod
    def from_values(cls, values: dict[str, Any]) -> Self:
        """Build from flat dotted keys; unknown keys are rejected"""
        grouped: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
        seed = 0
        for key, value in values.items():
            if key == "seed":
                seed = _coerce(key, int(), value)
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"unknown configuration key: {key}")
            known = {f.name for f in section_fields(SECTIONS[section])}
            if name not in known:
                raise ConfigError(f"unknown configuration key: {key}")
            default = getattr(SECTIONS[section](), name)
            grouped[section][name] = _coerce(key, default, value)
        try:
            sections = {name: SECTIONS[name](**grouped[name]) for name in SECTIONS}
        except ValueError as error:
            raise ConfigError(str(error)) from error
        return cls(seed=seed, **sections)

    @classmethod
    def load(
        cls, path=None, overrides: Iterable[str] = (), seed: int | None = None
    ) -> Self:
        values: dict[str, Any] = {}
        if path is not None:
            logger.debug(f"load configuration from {path}")
            try:
                content = yaml.safe_load(pathlib.Path(path).read_text())
            except yaml.YAMLError as error:
                raise ConfigError(f"{path}: {error}") from error
            if content is not None and not isinstance(content, dict):
                raise ConfigError(f"{path}: expected a mapping at top level")
            values |= flatten(content or {})
        values |= dict(funcy.map(parse_override, overrides))
        if seed is not None:
            values["seed"] = seed
        return cls.from_values(values)

    # -------- views

    def as_flat_dict(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            section = getattr(self, name)
            for f in section_fields(SECTIONS[name]):
                value = getattr(section, f.name)
                flat[f"{name}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return flat

    def write_resolved(self, out_dir) -> pathlib.Path:
        path = pathlib.Path(out_dir) / RESOLVED_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.as_flat_dict(), sort_keys=False))
        logger.debug(f"resolved configuration written to {path}")
        return path

    @property
    def training(self) -> TrainConfig:
        """Trainer section with the sections it depends on plugged in"""
        return replace(
            self.trainer,
            camera=self.camera,
            render=self.render,
            guide=self.guide,
            vgs=self.vgs,
            noise=self.noise,
        )

    def with_values(self, values: dict[str, Any]) -> Self:
        """Copy with some dotted keys changed"""
        return self.from_values(self.as_flat_dict() | values)
