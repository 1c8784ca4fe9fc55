"""Evaluation harness: gradient checks, noise statistics, view consistency and
the structured-noise x VGS ablation matrix"""

import concurrent.futures
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .config import (
    ConfigError,
    ConsistencyConfig,
    GradCheckConfig,
    NoiseStatsConfig,
    RunConfig,
)
from .logging import logger
from .noise import (
    NoiseConfig,
    NoiseMoments,
    init_from_config,
    monte_carlo_moments,
    view_correlation,
)
from .raster import CloudGradients, render, render_backward
from .scene import Camera, GaussianCloud, RenderSettings, init_sphere_cloud, logit, turntable
from .targets import build_provider, load_target_views
from .trainer import TrainState, train
from .vgs import VGSConfig, passthrough_gradients, perturb, replay

# ------------------------ gradient checks ------------------------

# |analytic - numeric| is divided by max(max |numeric|, ERROR_FLOOR)
ERROR_FLOOR = 1e-6
MIN_DEPTH_GAP = 1e-2


def smooth_settings() -> RenderSettings:
    """Settings under which the image is a smooth function of the parameters:
    no alpha clamp reached, negligible cutoffs, no early termination"""
    return RenderSettings(
        background=(0.2, 0.5, 0.8),
        alpha_min=1e-12,
        extent_sigma=12.0,
        tile_size=8,
        transmittance_min=0.0,
    )


def _depths(cloud: GaussianCloud, camera: Camera) -> np.ndarray:
    return (cloud.positions @ camera.rotation.T + camera.translation)[:, 2]


def depth_gap(cloud: GaussianCloud, camera: Camera) -> float:
    depths = np.sort(_depths(cloud, camera))
    return float(np.diff(depths).min()) if depths.size > 1 else np.inf


def random_scene(rng: np.random.Generator, count: int) -> GaussianCloud:
    directions = rng.standard_normal((count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    rotations = rng.standard_normal((count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return GaussianCloud(
        positions=directions * 0.25 * np.cbrt(rng.random(count))[:, None],
        log_scales=np.log(rng.uniform(0.05, 0.15, (count, 3))),
        rotations=rotations,
        opacity_logits=logit(rng.uniform(0.2, 0.8, count)),
        colors=rng.random((count, 3)),
    )


def random_camera(rng: np.random.Generator, size: int) -> Camera:
    return Camera(
        azimuth=float(rng.uniform(-180, 180)),
        elevation=float(rng.uniform(-45, 45)),
        radius=1.0,
        fov_y=50.0,
        width=size,
        height=size,
    )


def finite_difference(loss, cloud: GaussianCloud, name: str, step: float) -> np.ndarray:
    """Central differences of `loss(cloud)` for every entry of one parameter"""
    values = getattr(cloud, name)
    numeric = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        shifted = cloud.copy()
        getattr(shifted, name)[index] += step
        plus = loss(shifted)
        getattr(shifted, name)[index] -= 2 * step
        minus = loss(shifted)
        numeric[index] = (plus - minus) / (2 * step)
    return numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)), ERROR_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def image_loss(camera: Camera, settings: RenderSettings, cotangent: np.ndarray):
    def loss(cloud: GaussianCloud) -> float:
        return float(np.sum(cotangent * render(cloud, camera, settings).color))

    return loss


def gradient_errors(
    analytic: CloudGradients, loss, cloud: GaussianCloud, step: float
) -> dict[str, float]:
    return {
        name: relative_error(value, finite_difference(loss, cloud, name, step))
        for name, value in analytic.items()
    }


@dataclass
class GradCheckReport:
    tolerance: float
    scenes: int
    # parameter class -> worst relative error over all scenes
    errors: dict[str, float] = field(default_factory=dict)
    vgs_errors: dict[str, float] = field(default_factory=dict)
    # largest gradient entry for a zero cotangent
    zero_cotangent: float = 0.0

    @property
    def passed(self) -> bool:
        worst = max([*self.errors.values(), *self.vgs_errors.values()], default=0.0)
        return worst < self.tolerance and self.zero_cotangent == 0.0

    def merge(self, errors: dict[str, float], vgs_errors: dict[str, float]):
        for name, value in errors.items():
            self.errors[name] = max(self.errors.get(name, 0.0), value)
        for name, value in vgs_errors.items():
            self.vgs_errors[name] = max(self.vgs_errors.get(name, 0.0), value)


def _scene_and_camera(rng, config: GradCheckConfig, vgs_record_seed: int | None = None):
    """Draw scenes until no two gaussians sit at nearly the same depth"""
    while True:
        camera = random_camera(rng, config.size)
        cloud = random_scene(rng, config.gaussians)
        if depth_gap(cloud, camera) < MIN_DEPTH_GAP:
            continue
        if vgs_record_seed is None:
            return cloud, camera, None
        perturbed, record = perturb(cloud, config.sigma, VGSConfig(), vgs_record_seed)
        if depth_gap(perturbed, camera) >= MIN_DEPTH_GAP:
            return cloud, camera, record


def run_gradcheck(config: GradCheckConfig, seed: int = 0) -> GradCheckReport:
    """Rasterizer and VGS pass-through gradients against central differences"""
    rng = np.random.default_rng(seed)
    settings = smooth_settings()
    report = GradCheckReport(tolerance=config.tolerance, scenes=config.scenes)
    for scene in range(config.scenes):
        cloud, camera, record = _scene_and_camera(rng, config, vgs_record_seed=seed + scene)
        cotangent = rng.standard_normal((camera.height, camera.width, 3))
        loss = image_loss(camera, settings, cotangent)

        analytic = render_backward(cloud, camera, settings, cotangent)
        errors = gradient_errors(analytic, loss, cloud, config.step)

        perturbed = replay(cloud, record)
        at_perturbed = passthrough_gradients(
            render_backward(perturbed, camera, settings, cotangent), cloud
        )
        vgs_errors = gradient_errors(
            at_perturbed, lambda c: loss(replay(c, record)), cloud, config.step
        )
        report.merge(errors, vgs_errors)

        zero = render_backward(cloud, camera, settings, np.zeros_like(cotangent))
        report.zero_cotangent = max(
            report.zero_cotangent,
            max(float(np.abs(value).max(initial=0.0)) for _, value in zero.items()),
        )
        logger.debug(f"gradcheck scene {scene}: {errors}")
    return report


# ------------------------ noise statistics ------------------------


@dataclass
class NoiseStatsReport:
    moments: NoiseMoments
    # covered pixel-channels with standardized variance in [0.95, 1.05]
    variance_fraction: float
    # covered pixel-channels with standardized mean in [-0.05, 0.05]
    mean_fraction: float
    # worst relative gap between empirical and closed-form variance where Var > 0.05
    closed_form_error: float
    coverage: float
    correlation_pair: float
    correlation_iid: float
    correlation_same: float
    rho: float

    def summary(self) -> dict:
        return {
            "samples": self.moments.samples,
            "coverage": self.coverage,
            "variance_fraction": self.variance_fraction,
            "mean_fraction": self.mean_fraction,
            "closed_form_error": self.closed_form_error,
            "rho": self.rho,
            "correlation_pair": self.correlation_pair,
            "correlation_iid": self.correlation_iid,
            "correlation_same": self.correlation_same,
        }


PIXEL_COLUMNS = [
    "row",
    "column",
    "covered",
    "expected_variance",
    "mean_r",
    "mean_g",
    "mean_b",
    "variance_r",
    "variance_g",
    "variance_b",
]
PIXEL_SCHEMA = "gsplat-distill noise-stats v1"


def closed_form_error(moments: NoiseMoments, threshold: float = 0.05) -> float:
    """Channel-averaged empirical variance against Var(C), on pixels above `threshold`"""
    where = moments.expected_variance > threshold
    if not where.any():
        return 0.0
    empirical = moments.variance.mean(axis=-1)[where]
    expected = moments.expected_variance[where]
    return float(np.abs(empirical / expected - 1.0).max())


def run_noise_stats(
    config: NoiseStatsConfig,
    noise: NoiseConfig,
    settings: RenderSettings,
    seed: int = 0,
) -> NoiseStatsReport:
    field_ = init_from_config(noise, seed)
    camera = Camera(
        azimuth=config.azimuth,
        elevation=config.elevation,
        fov_y=config.fov_y,
        width=config.width,
        height=config.height,
    )
    neighbour = Camera(
        azimuth=config.azimuth + config.pair_offset,
        elevation=config.elevation,
        fov_y=config.fov_y,
        width=config.width,
        height=config.height,
    )
    moments = monte_carlo_moments(
        field_, camera, settings, config.samples, seed=seed, batch=config.batch
    )
    covered = moments.mask
    standardized_variance = moments.standardized_variance[covered]
    standardized_mean = moments.standardized_mean[covered]

    def correlation(other: Camera, rho: float) -> float:
        return view_correlation(
            field_,
            camera,
            other,
            settings,
            rho,
            config.correlation_samples,
            seed=seed + 1,
            batch=config.batch,
        )

    def fraction(values, low, high) -> float:
        return float(((values >= low) & (values <= high)).mean()) if values.size else 0.0

    return NoiseStatsReport(
        moments=moments,
        variance_fraction=fraction(standardized_variance, 0.95, 1.05),
        mean_fraction=fraction(standardized_mean, -0.05, 0.05),
        closed_form_error=closed_form_error(moments),
        coverage=float(covered.mean()),
        correlation_pair=correlation(neighbour, config.rho),
        correlation_iid=correlation(neighbour, 0.0),
        correlation_same=correlation(camera, 1.0),
        rho=config.rho,
    )


def pixel_rows(moments: NoiseMoments) -> list[dict]:
    rows = []
    height, width = moments.mask.shape
    for row, column in np.ndindex(height, width):
        mean = moments.mean[row, column]
        variance = moments.variance[row, column]
        rows.append(
            {
                "row": row,
                "column": column,
                "covered": bool(moments.mask[row, column]),
                "expected_variance": float(moments.expected_variance[row, column]),
                "mean_r": float(mean[0]),
                "mean_g": float(mean[1]),
                "mean_b": float(mean[2]),
                "variance_r": float(variance[0]),
                "variance_g": float(variance[1]),
                "variance_b": float(variance[2]),
            }
        )
    return rows


# ------------------------ view consistency ------------------------


@dataclass
class ConsistencyReport:
    """Photometric error between renders of neighbouring poses on a circle"""

    poses: int
    elevation: float
    radius: float
    pairing: str
    # error of pair (i, i + 1 mod poses)
    errors: np.ndarray

    def __post_init__(self):
        if (self.errors < 0).any():
            raise ValueError("photometric errors cannot be negative")

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def variance(self) -> float:
        return float(self.errors.var())

    def rows(self) -> list[dict]:
        return [
            {"pair": index, "first": index, "second": (index + 1) % self.poses, "error": error}
            for index, error in enumerate(self.errors.tolist())
        ]


CONSISTENCY_SCHEMA = "gsplat-distill consistency v1"


def consistency_report(
    cloud: GaussianCloud, config: ConsistencyConfig, settings: RenderSettings
) -> ConsistencyReport:
    cameras = turntable(
        config.poses, config.elevation, config.radius, config.fov_y, config.width, config.height
    )
    images = [render(cloud, camera, settings).color for camera in cameras]
    errors = np.array(
        [np.mean((images[i] - images[(i + 1) % len(images)]) ** 2) for i in range(len(images))]
    )
    return ConsistencyReport(
        poses=config.poses,
        elevation=config.elevation,
        radius=config.radius,
        pairing="adjacent azimuths, circular",
        errors=errors,
    )


# ------------------------ training runs ------------------------


def training_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2])


def setup_training(run: RunConfig) -> tuple[TrainState, list]:
    """Initial state and held-out views; fails before any training on missing targets"""
    needs_targets = run.guide.provider == "targets" or run.camera.mode == "targets"
    has_targets = run.targets.synthetic or bool(run.targets.manifest)
    if needs_targets and not has_targets:
        raise ConfigError(
            "the selected provider or camera mode needs target views: "
            "set targets.manifest or targets.synthetic"
        )
    for manifest in (run.targets.manifest, run.targets.heldout):
        if manifest and not run.targets.synthetic and not pathlib.Path(manifest).is_file():
            raise ConfigError(f"target manifest not found: {manifest}")
    views, heldout = [], []
    if has_targets:
        views, heldout = load_target_views(
            run.targets, run.camera.width, run.camera.height, run.render
        )
    cloud = init_sphere_cloud(
        run.scene.count,
        radius=run.scene.radius,
        opacity=run.scene.opacity,
        color=run.scene.color,
        seed=run.seed,
    )
    field_ = init_from_config(run.noise, run.seed + 1) if run.noise.enabled else None
    provider = build_provider(run.guide.provider, views, run.guide.constant_value)
    return TrainState.start(cloud, provider, field_, seed=run.seed), heldout


def run_training(run: RunConfig, out_dir=None, on_step=None) -> tuple[TrainState, list[dict]]:
    state, heldout = setup_training(run)
    return train(
        state, run.training, training_rng(run.seed), heldout, out_dir=out_dir, on_step=on_step
    )


# ------------------------ ablation ------------------------

# (structured noise, vgs), full method first
ABLATION_CELLS = [(True, True), (False, True), (True, False), (False, False)]
ABLATION_COLUMNS = [
    "cell",
    "structured_noise",
    "vgs",
    "steps",
    "gaussians",
    "heldout_error",
    "consistency_mean",
    "consistency_variance",
]
ABLATION_SCHEMA = "gsplat-distill ablation v1"


def cell_name(structured: bool, vgs: bool) -> str:
    return f"noise-{'on' if structured else 'off'}_vgs-{'on' if vgs else 'off'}"


def cell_config(run: RunConfig, structured: bool, vgs: bool) -> RunConfig:
    return run.with_values({"noise.enabled": structured, "vgs.enabled": vgs})


def run_cell(run: RunConfig, structured: bool, vgs: bool, out_dir=None) -> dict:
    config = cell_config(run, structured, vgs)
    name = cell_name(structured, vgs)
    cell_dir = pathlib.Path(out_dir) / name if out_dir is not None else None
    if cell_dir is not None:
        config.write_resolved(cell_dir)
    logger.info(f"ablation cell {name}")
    state, rows = run_training(config, out_dir=cell_dir)
    errors = [row["heldout_error"] for row in rows if row["heldout_error"] is not None]
    consistency = consistency_report(state.cloud, config.evaluation, config.render)
    return {
        "cell": name,
        "structured_noise": structured,
        "vgs": vgs,
        "steps": state.step,
        "gaussians": len(state.cloud),
        "heldout_error": errors[-1] if errors else None,
        "consistency_mean": consistency.mean,
        "consistency_variance": consistency.variance,
    }


def run_ablation(run: RunConfig, out_dir=None, jobs: int = 1) -> list[dict]:
    """All four cells with shared seeds, rows in fixed cell order"""
    if jobs <= 1:
        return [run_cell(run, structured, vgs, out_dir) for structured, vgs in ABLATION_CELLS]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(run_cell, run, structured, vgs, out_dir)
            for structured, vgs in ABLATION_CELLS
        ]
        return [future.result() for future in futures]
