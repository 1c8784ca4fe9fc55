import collections
import dataclasses
import pathlib
from dataclasses import dataclass, replace
from typing import Callable, Self

import numpy as np

from .guide import (
    GuidanceStepReport,
    GuideConfig,
    ScoreProvider,
    distill_step,
    sigma_at,
)
from .io import save_cloud, write_csv
from .logging import logger
from .noise import NoiseConfig, NoiseField, mix_schedule
from .raster import CloudGradients, quaternion_matrix, render
from .scene import (
    Camera,
    CameraSampling,
    GaussianCloud,
    RenderSettings,
    logit,
    sample_camera,
)
from .vgs import VGSConfig, passthrough_gradients, perturb

WHITE = (1.0, 1.0, 1.0)
METRIC_COLUMNS = [
    "step",
    "sigma",
    "rho",
    "score_norm",
    "gaussians",
    "azimuth",
    "elevation",
    "fov_y",
    "heldout_error",
]
METRICS_SCHEMA = "gsplat-distill metrics v1"
REPORT_RING = 1000


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    densify_start: int = 300
    densify_interval: int = 50
    # last step at which densification may run, total_steps when unset
    densify_until: int | None = None
    opacity_reset_interval: int = 400
    opacity_reset_value: float = 0.05
    # mean accumulated positional gradient per view
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    # clone below this fraction of the scene extent, split above
    split_scale_fraction: float = 0.01
    split_children: int = 2
    split_scale_divisor: float = 1.6
    max_gaussians: int = 200_000
    # adam
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.01
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1.25e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    clamp_colors: bool = True
    white_background_prob: float = 1.0
    eval_interval: int = 100
    checkpoint_interval: int = 500
    camera: CameraSampling = dataclasses.field(default_factory=CameraSampling)
    render: RenderSettings = dataclasses.field(default_factory=RenderSettings)
    guide: GuideConfig = dataclasses.field(default_factory=GuideConfig)
    vgs: VGSConfig = dataclasses.field(default_factory=VGSConfig)
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)

    def __post_init__(self):
        for name in (
            "densify_interval",
            "opacity_reset_interval",
            "eval_interval",
            "checkpoint_interval",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps cannot be negative")
        if self.densify_start > self.total_steps:
            raise ValueError("densify_start must not exceed total_steps")
        if not 0 <= self.white_background_prob <= 1:
            raise ValueError("white_background_prob must lie in [0, 1]")
        if self.split_children < 1:
            raise ValueError("split_children must be at least 1")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be at least 1")

    @property
    def last_densify_step(self) -> int:
        return self.total_steps if self.densify_until is None else self.densify_until

    def learning_rates(self, step: int) -> dict[str, float]:
        progress = step / self.total_steps if self.total_steps else 0.0
        return {
            "positions": self.lr_position * self.lr_position_final_ratio**progress,
            "log_scales": self.lr_log_scale,
            "rotations": self.lr_rotation,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_color,
        }


# ------------------------ state ------------------------


@dataclass
class Moments:
    """Adam first and second moments, one array per cloud parameter"""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> Self:
        return cls(
            first={name: np.zeros_like(getattr(cloud, name)) for name in cloud.PARAMETERS},
            second={name: np.zeros_like(getattr(cloud, name)) for name in cloud.PARAMETERS},
        )

    def __len__(self):
        return self.first["positions"].shape[0]

    def copy(self) -> Self:
        return type(self)(
            first={name: value.copy() for name, value in self.first.items()},
            second={name: value.copy() for name, value in self.second.items()},
        )

    def select(self, index) -> Self:
        return type(self)(
            first={name: value[index] for name, value in self.first.items()},
            second={name: value[index] for name, value in self.second.items()},
        )

    def extended(self, count: int) -> Self:
        """Append zero moments for `count` new gaussians"""

        def grow(value):
            return np.concatenate([value, np.zeros((count, *value.shape[1:]))])

        return type(self)(
            first={name: grow(value) for name, value in self.first.items()},
            second={name: grow(value) for name, value in self.second.items()},
        )


@dataclass
class TrainState:
    cloud: GaussianCloud
    moments: Moments
    provider: ScoreProvider
    field: NoiseField | None = None
    step: int = 0
    seed: int = 0
    reports: collections.deque = dataclasses.field(
        default_factory=lambda: collections.deque(maxlen=REPORT_RING)
    )

    @classmethod
    def start(
        cls,
        cloud: GaussianCloud,
        provider: ScoreProvider,
        field: NoiseField | None = None,
        seed: int = 0,
    ) -> Self:
        return cls(
            cloud=cloud,
            moments=Moments.zeros_like(cloud),
            provider=provider,
            field=field,
            seed=seed,
        )

    def copy(self) -> Self:
        return replace(
            self,
            cloud=self.cloud.copy(),
            moments=self.moments.copy(),
            reports=collections.deque(self.reports, maxlen=REPORT_RING),
        )

    def check_bookkeeping(self):
        sizes = {
            "cloud": len(self.cloud),
            "moments": len(self.moments),
            "gradient accumulator": self.cloud.grad_accum.shape[0],
            "view counter": self.cloud.grad_views.shape[0],
        }
        if len(set(sizes.values())) != 1:
            raise RuntimeError(f"size bookkeeping broken: {sizes}")


# ------------------------ optimizer ------------------------


def optimizer_update(
    state: TrainState, grads: CloudGradients, config: TrainConfig
) -> TrainState:
    """One Adam step against `grads`, with bias correction at the global step"""
    if len(grads) != len(state.cloud):
        raise ValueError(f"{len(grads)} gradients for {len(state.cloud)} gaussians")
    new = state.copy()
    t = state.step + 1
    rates = config.learning_rates(state.step)
    for name, grad in grads.items():
        first = new.moments.first[name]
        second = new.moments.second[name]
        first *= config.beta1
        first += (1.0 - config.beta1) * grad
        second *= config.beta2
        second += (1.0 - config.beta2) * grad * grad
        if not (np.isfinite(first).all() and np.isfinite(second).all()):
            raise RuntimeError(f"non-finite optimizer moments for '{name}' at step {state.step}")
        corrected_first = first / (1.0 - config.beta1**t)
        corrected_second = second / (1.0 - config.beta2**t)
        parameter = getattr(new.cloud, name)
        parameter -= rates[name] * corrected_first / (np.sqrt(corrected_second) + config.eps)
    return new


# ------------------------ density control ------------------------


def _split_children(
    cloud: GaussianCloud, parents: np.ndarray, config: TrainConfig, rng: np.random.Generator
) -> GaussianCloud:
    """`split_children` samples from each parent's own gaussian, shrunk scales"""
    count = config.split_children
    parent = cloud.select(np.tile(parents, count))
    scales = parent.scales
    offsets = rng.standard_normal(scales.shape) * scales
    rotations = parent.rotations / np.linalg.norm(parent.rotations, axis=1, keepdims=True)
    for row, q in enumerate(rotations):
        parent.positions[row] += quaternion_matrix(q) @ offsets[row]
    parent.log_scales = np.log(scales / config.split_scale_divisor)
    return parent


def densify(state: TrainState, config: TrainConfig, extent: float | None = None) -> TrainState:
    """Clone small high-gradient gaussians, split large ones, prune faint ones"""
    new = state.copy()
    cloud = new.cloud
    extent = config.camera.radius if extent is None else extent
    initial = len(cloud)
    average = cloud.grad_accum / np.maximum(cloud.grad_views, 1.0)
    selected = average > config.grad_threshold
    small = cloud.scales.max(axis=1) <= config.split_scale_fraction * extent
    clones = np.flatnonzero(selected & small)
    splits = np.flatnonzero(selected & ~small)

    room = max(config.max_gaussians - initial, 0)
    clones = clones[:room]
    # each split adds split_children and removes its parent
    per_split = config.split_children - 1
    if per_split > 0:
        splits = splits[: max(room - clones.size, 0) // per_split]

    rng = np.random.default_rng([state.seed, state.step])
    children = _split_children(cloud, splits, config, rng)
    keep = np.ones(initial, dtype=bool)
    keep[splits] = False
    grown = cloud.select(keep).concat(cloud.select(clones)).concat(children)
    moments = new.moments.select(keep).extended(clones.size + len(children))

    survivors = grown.opacities >= config.prune_opacity
    new.cloud = grown.select(survivors).round_to_storage()
    new.moments = moments.select(survivors)
    new.cloud.reset_accumulators()
    logger.debug(
        f"densify at step {state.step}: {clones.size} cloned, {splits.size} split, "
        f"{int((~survivors).sum())} pruned, {initial} -> {len(new.cloud)} gaussians"
    )
    new.check_bookkeeping()
    return new


def reset_opacity(state: TrainState, value: float = 0.05) -> TrainState:
    """Clamp every opacity down to `value`; the opacity moments restart from zero"""
    new = state.copy()
    new.cloud.opacity_logits = np.minimum(new.cloud.opacity_logits, logit(value))
    new.cloud.round_to_storage()
    new.moments.first["opacity_logits"][:] = 0.0
    new.moments.second["opacity_logits"][:] = 0.0
    logger.debug(f"opacity reset to at most {value} at step {state.step}")
    return new


# ------------------------ step ------------------------


def choose_camera(
    rng: np.random.Generator, sampling: CameraSampling, provider: ScoreProvider
) -> Camera:
    if sampling.mode == "targets":
        cameras = getattr(provider, "cameras", None)
        if not cameras:
            raise ValueError("camera mode 'targets' needs a provider with target cameras")
        camera = cameras[int(rng.integers(len(cameras)))]
        return camera.with_resolution(sampling.width, sampling.height)
    return sample_camera(rng, sampling)


def _due(step: int, interval: int) -> bool:
    return step > 0 and step % interval == 0


def train_step(state: TrainState, config: TrainConfig, rng: np.random.Generator) -> TrainState:
    """One distillation step; the returned state is a new object"""
    step = state.step
    camera = choose_camera(rng, config.camera, state.provider)
    sigma = sigma_at(config.guide.schedule(config.total_steps), step)
    use_noise = config.noise.enabled and state.field is not None
    rho = (
        mix_schedule(step, config.total_steps, config.noise.rho_start, config.noise.rho_end)
        if use_noise
        else 0.0
    )
    vgs_seed = int(rng.integers(0, 2**63 - 1))
    settings = config.render
    if rng.random() < config.white_background_prob:
        settings = replace(settings, background=WHITE)

    perturbed, _ = perturb(state.cloud, sigma, config.vgs, vgs_seed)
    grads, report = distill_step(
        perturbed,
        camera,
        state.field if use_noise else None,
        state.provider,
        sigma,
        rho,
        settings,
        rng,
        samples=config.guide.samples,
        perturb_input=config.guide.perturb_input,
    )
    descent = -passthrough_gradients(grads, state.cloud)
    if not descent.is_finite():
        logger.error(f"non-finite gradient at step {step}, camera {camera}")
        raise RuntimeError(f"non-finite gradient at step {step}")

    new = optimizer_update(state, descent, config)
    new.cloud.normalize_rotations()
    if config.clamp_colors:
        np.clip(new.cloud.colors, 0.0, 1.0, out=new.cloud.colors)
    new.cloud.round_to_storage()

    visible = report.visible
    magnitude = np.linalg.norm(grads.positions[visible], axis=1)
    new.cloud.grad_accum[visible] += magnitude * sigma**2 / (camera.width * camera.height)
    new.cloud.grad_views[visible] += 1
    new.reports.append(report)
    new.step = step + 1
    new.cloud.step = new.step

    if config.densify_start < new.step <= config.last_densify_step and _due(
        new.step, config.densify_interval
    ):
        new = densify(new, config)
    if new.step < config.total_steps and _due(new.step, config.opacity_reset_interval):
        new = reset_opacity(new, config.opacity_reset_value)
    new.check_bookkeeping()
    return new


# ------------------------ loop ------------------------


def heldout_error(
    cloud: GaussianCloud, views: list[tuple[Camera, np.ndarray]], settings: RenderSettings
) -> float:
    """Mean squared photometric error over held-out views"""
    errors = [
        float(np.mean((render(cloud, camera, settings).color - image) ** 2))
        for camera, image in views
    ]
    return float(np.mean(errors))


def metric_row(report: GuidanceStepReport, state: TrainState) -> dict:
    return {
        "step": state.step,
        "sigma": report.sigma,
        "rho": report.rho,
        "score_norm": report.score_norm,
        "gaussians": len(state.cloud),
        "azimuth": report.camera.azimuth,
        "elevation": report.camera.elevation,
        "fov_y": report.camera.fov_y,
        "heldout_error": None,
    }


def write_metrics(rows: list[dict], path):
    write_csv(rows, path, METRICS_SCHEMA, METRIC_COLUMNS)


def train(
    state: TrainState,
    config: TrainConfig,
    rng: np.random.Generator,
    heldout: list[tuple[Camera, np.ndarray]] | None = None,
    out_dir=None,
    on_step: Callable[[TrainState, dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run until total_steps, writing checkpoints and metrics when `out_dir` is set"""
    rows = []
    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    heldout_settings = config.render
    logger.info(
        f"training {len(state.cloud)} gaussians for {config.total_steps - state.step} steps"
    )
    while state.step < config.total_steps:
        state = train_step(state, config, rng)
        row = metric_row(state.reports[-1], state)
        if heldout and (
            _due(state.step, config.eval_interval) or state.step == config.total_steps
        ):
            row["heldout_error"] = heldout_error(state.cloud, heldout, heldout_settings)
        rows.append(row)
        if out_dir is not None and _due(state.step, config.checkpoint_interval):
            save_cloud(state.cloud, out_dir / f"checkpoint_{state.step:05d}.ply")
            write_metrics(rows, out_dir / "metrics.csv")
            logger.debug(f"checkpoint at step {state.step}")
        if on_step is not None:
            on_step(state, row)
    if out_dir is not None:
        save_cloud(state.cloud, out_dir / "final.ply")
        write_metrics(rows, out_dir / "metrics.csv")
    logger.info(f"training done: {len(state.cloud)} gaussians")
    return state, rows
