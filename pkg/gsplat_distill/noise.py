"""View-consistent noise: a frozen random gaussian cloud with normally
distributed colors, splatted into any view and standardized per pixel.

With colors drawn i.i.d. from N(0, 1), a rendered pixel over a black background
is a weighted sum of independent normals, with zero mean and variance equal to
the sum of squared compositing weights. Dividing by the square root of that
variance gives unit-variance noise that all views share through the same 3D
source.
"""

import math
from dataclasses import dataclass, replace
from typing import Self

import numpy as np

from .logging import logger
from .raster import contribution_matrix, render
from .scene import Camera, GaussianCloud, RenderSettings, nearest_neighbor_scales

BLACK = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class NoiseConfig:
    enabled: bool = True
    count: int = 16384
    opacity: float = 0.6
    # isotropic scale, in multiples of the mean 3-nearest-neighbour distance
    scale_factor: float = 2.0
    variance_floor: float = 1e-4
    rho_start: float = 0.3
    rho_end: float = 0.05
    resample_colors: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("noise cloud count must be at least 1")
        if not 0 < self.opacity < 1:
            raise ValueError("noise cloud opacity must lie in (0, 1)")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        for name in ("rho_start", "rho_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseField:
    """Frozen noise cloud. Colors are a function of `color_seed` only."""

    cloud: GaussianCloud
    color_seed: int
    variance_floor: float = 1e-4
    resample_colors: bool = True

    def __post_init__(self):
        for name in GaussianCloud.PARAMETERS:
            getattr(self.cloud, name).setflags(write=False)

    @property
    def frozen(self) -> bool:
        return True

    def __len__(self):
        return len(self.cloud)

    def colors_for(self, color_seed: int) -> np.ndarray:
        return np.random.default_rng(color_seed).standard_normal((len(self), 3))

    def resample_colors_with(self, color_seed: int) -> Self:
        """Same geometry, colors redrawn from `color_seed`"""
        cloud = replace(self.cloud, colors=self.colors_for(color_seed))
        return replace(self, cloud=cloud, color_seed=color_seed)


@dataclass(frozen=True)
class NoiseImage:
    noise: np.ndarray
    # true where the noise cloud covers the pixel
    mask: np.ndarray
    # structured share of `noise`, 1 before any mixing
    rho: float = 1.0

    @property
    def coverage(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def init_noise_cloud(
    count: int = 16384,
    seed: int = 0,
    opacity: float = 0.6,
    scale_factor: float = 2.0,
    variance_floor: float = 1e-4,
    resample_colors: bool = True,
) -> NoiseField:
    """Noise cloud in spherical coordinates: signed radius in [-0.5, 0.5],
    azimuth in [-180, 180] and elevation in [-45, 45] degrees"""
    if count < 1:
        raise ValueError("noise cloud count must be at least 1")
    rng = np.random.default_rng([seed, 0])
    radius = rng.uniform(-0.5, 0.5, count)
    azimuth = np.radians(rng.uniform(-180.0, 180.0, count))
    elevation = np.radians(rng.uniform(-45.0, 45.0, count))
    positions = radius[:, None] * np.stack(
        [
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
            np.cos(elevation) * np.cos(azimuth),
        ],
        axis=1,
    )
    scales = nearest_neighbor_scales(positions)
    scales = np.full(count, 0.5) if scales is None else scale_factor * scales
    cloud = GaussianCloud.from_activated(
        positions=positions,
        scales=np.repeat(scales[:, None], 3, axis=1),
        rotations=(1.0, 0.0, 0.0, 0.0),
        opacities=opacity,
        colors=np.zeros(3),
    )
    field = NoiseField(
        cloud=cloud,
        color_seed=seed,
        variance_floor=variance_floor,
        resample_colors=resample_colors,
    )
    logger.debug(f"noise cloud: {count} gaussians, seed {seed}")
    return field.resample_colors_with(seed)


def init_from_config(config: NoiseConfig, seed: int) -> NoiseField:
    return init_noise_cloud(
        count=config.count,
        seed=seed,
        opacity=config.opacity,
        scale_factor=config.scale_factor,
        variance_floor=config.variance_floor,
        resample_colors=config.resample_colors,
    )


def _black(settings: RenderSettings) -> RenderSettings:
    return replace(settings, background=BLACK)


def variance_map(field: NoiseField, camera: Camera, settings: RenderSettings) -> np.ndarray:
    """Var(C) per pixel: the sum of squared compositing weights"""
    return render(field.cloud, camera, _black(settings)).variance


def iid_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def structured_noise(
    field: NoiseField, camera: Camera, settings: RenderSettings, color_seed: int
) -> NoiseImage:
    """Render the noise cloud with colors drawn from `color_seed` and standardize.

    Pixels with a variance below the floor are filled from a separate i.i.d.
    stream derived from `color_seed` and left out of the mask.
    """
    cloud = field.resample_colors_with(color_seed).cloud
    output = render(cloud, camera, _black(settings))
    mask = output.variance >= field.variance_floor
    noise = iid_noise((camera.height, camera.width, 3), [color_seed, 1])  # type: ignore
    noise[mask] = output.color[mask] / np.sqrt(output.variance[mask])[:, None]
    return NoiseImage(noise=noise, mask=mask)


def mix_noise(structured: NoiseImage, iid_seed: int, rho: float) -> np.ndarray:
    """√ρ n_structured + √(1-ρ) n_iid"""
    if not 0 <= rho <= 1:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {rho}")
    iid = iid_noise(structured.noise.shape, iid_seed)
    return math.sqrt(rho) * structured.noise + math.sqrt(1.0 - rho) * iid


def mix_schedule(
    step: int, total_steps: int, start: float = 0.3, end: float = 0.05
) -> float:
    """Linear decay of the structured share from `start` to `end`"""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return start
    progress = step / total_steps
    return (1.0 - progress) * start + progress * end


def step_noise(
    field: NoiseField | None,
    camera: Camera,
    settings: RenderSettings,
    color_seed: int,
    iid_seed: int,
    rho: float,
) -> NoiseImage:
    """Noise for one guidance step; plain i.i.d. noise when ρ is zero or there is
    no field. The returned image records the structured share actually mixed in."""
    shape = (camera.height, camera.width, 3)
    if field is None or rho == 0:
        return NoiseImage(
            noise=iid_noise(shape, iid_seed), mask=np.zeros(shape[:2], dtype=bool), rho=0.0
        )
    if not field.resample_colors:
        color_seed = field.color_seed
    structured = structured_noise(field, camera, settings, color_seed)
    return replace(structured, noise=mix_noise(structured, iid_seed, rho), rho=rho)


# ------------------------ Monte-Carlo statistics ------------------------


@dataclass
class NoiseMoments:
    """Per-pixel empirical moments over color reseeds"""

    samples: int
    # raw rendered value C
    mean: np.ndarray
    variance: np.ndarray
    # closed-form Var(C)
    expected_variance: np.ndarray
    mask: np.ndarray

    @property
    def standardized_mean(self) -> np.ndarray:
        scale = np.sqrt(np.where(self.mask, self.expected_variance, 1.0))
        return self.mean / scale[..., None]

    @property
    def standardized_variance(self) -> np.ndarray:
        scale = np.where(self.mask, self.expected_variance, 1.0)
        return self.variance / scale[..., None]


def _color_batches(count: int, samples: int, batch: int, rng: np.random.Generator):
    done = 0
    while done < samples:
        size = min(batch, samples - done)
        yield size, rng.standard_normal((count, 3 * size))
        done += size


def monte_carlo_moments(
    field: NoiseField,
    camera: Camera,
    settings: RenderSettings,
    samples: int,
    seed: int = 0,
    batch: int = 64,
) -> NoiseMoments:
    """Empirical per-pixel mean and variance of the rendered noise cloud.

    Every reseed renders as `weights @ colors`, with the compositing weights
    computed once.
    """
    if samples < 2:
        raise ValueError("at least two samples are needed for a variance")
    weights = contribution_matrix(field.cloud, camera, _black(settings))
    expected = np.asarray(weights.multiply(weights).sum(axis=1)).reshape(
        camera.height, camera.width
    )
    total = np.zeros((weights.shape[0], 3))
    total_squared = np.zeros((weights.shape[0], 3))
    rng = np.random.default_rng(seed)
    for size, colors in _color_batches(len(field), samples, batch, rng):
        values = (weights @ colors).reshape(-1, size, 3)
        total += values.sum(axis=1)
        total_squared += (values**2).sum(axis=1)
    mean = total / samples
    variance = (total_squared - samples * mean**2) / (samples - 1)
    shape = (camera.height, camera.width, 3)
    logger.debug(f"noise moments over {samples} samples at {camera.width}x{camera.height}")
    return NoiseMoments(
        samples=samples,
        mean=mean.reshape(shape),
        variance=variance.reshape(shape),
        expected_variance=expected,
        mask=expected >= field.variance_floor,
    )


def view_correlation(
    field: NoiseField,
    camera_a: Camera,
    camera_b: Camera,
    settings: RenderSettings,
    rho: float,
    samples: int,
    seed: int = 0,
    batch: int = 64,
) -> float:
    """Mean per-pixel correlation between the mixed noise of two views.

    Both views share the noise cloud colors of every reseed and draw their own
    i.i.d. share. Only pixels covered in both views are averaged.
    """
    if not 0 <= rho <= 1:
        raise ValueError(f"mixing ratio must lie in [0, 1], got {rho}")
    if (camera_a.width, camera_a.height) != (camera_b.width, camera_b.height):
        raise ValueError("both views must share a resolution")
    black = _black(settings)
    weights = [contribution_matrix(field.cloud, camera, black) for camera in (camera_a, camera_b)]
    scales = [np.sqrt(np.asarray(w.multiply(w).sum(axis=1)).ravel()) for w in weights]
    covered = (scales[0] ** 2 >= field.variance_floor) & (scales[1] ** 2 >= field.variance_floor)
    pixels = weights[0].shape[0]
    sums = np.zeros((5, pixels, 3))
    rng = np.random.default_rng(seed)
    for size, colors in _color_batches(len(field), samples, batch, rng):
        views = []
        for w, scale in zip(weights, scales):
            structured = (w @ colors).reshape(pixels, size, 3)
            structured /= np.where(scale > 0, scale, 1.0)[:, None, None]
            iid = rng.standard_normal(structured.shape)
            views.append(math.sqrt(rho) * structured + math.sqrt(1.0 - rho) * iid)
        a, b = views
        for index, value in enumerate((a, b, a * a, b * b, a * b)):
            sums[index] += value.sum(axis=1)
    mean_a, mean_b, square_a, square_b, product = sums / samples
    covariance = product - mean_a * mean_b
    deviation = np.sqrt((square_a - mean_a**2) * (square_b - mean_b**2))
    correlation = covariance[covered] / deviation[covered]
    return float(correlation.mean()) if correlation.size else 0.0
