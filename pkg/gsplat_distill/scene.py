import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Self

import funcy
import numpy as np
from scipy.spatial import cKDTree

from .logging import logger

type Vec3 = tuple[float, float, float]

GREY: Vec3 = (0.5, 0.5, 0.5)
# on-disk precision of cloud parameters
STORAGE_DTYPE = np.float32


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


# ------------------------ gaussians ------------------------


@dataclass(frozen=True)
class Gaussian3D:
    """One splat, in stored (unconstrained) parameterization"""

    position: np.ndarray
    log_scale: np.ndarray
    # (w, x, y, z)
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianCloud:
    """The optimizable scene, stored as parallel arrays (one row per Gaussian).

    Scales are stored as log-scale and opacities as logits, so any unconstrained
    update keeps the activated values valid. The gradient accumulators feed
    densification: `grad_accum` sums positional gradient magnitudes and
    `grad_views` counts the views in which each Gaussian was visible.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    step: int = 0
    grad_accum: np.ndarray = field(default=None)  # type: ignore
    grad_views: np.ndarray = field(default=None)  # type: ignore

    def __post_init__(self):
        count = self.positions.shape[0]
        if self.grad_accum is None:
            self.grad_accum = np.zeros(count)
        if self.grad_views is None:
            self.grad_views = np.zeros(count)
        for name, width in self.PARAMETERS.items():
            array = getattr(self, name)
            expected = (count,) if width is None else (count, width)
            if array.shape != expected:
                raise ValueError(f"{name} has shape {array.shape}, expected {expected}")
        if self.grad_accum.shape != (count,) or self.grad_views.shape != (count,):
            raise ValueError("gradient accumulators must have one entry per gaussian")
        if self.step < 0:
            raise ValueError("step counter cannot be negative")

    # parameter name -> row width (None for scalars)
    PARAMETERS = {
        "positions": 3,
        "log_scales": 3,
        "rotations": 4,
        "opacity_logits": None,
        "colors": 3,
    }

    def __repr__(self):
        return f"{self.__class__.__name__}(<{len(self)} gaussians, step {self.step}>)"

    def __len__(self):
        return self.positions.shape[0]

    def __getitem__(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[index],
            log_scale=self.log_scales[index],
            rotation=self.rotations[index],
            opacity_logit=float(self.opacity_logits[index]),
            color=self.colors[index],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    # -------- construction

    @classmethod
    def empty(cls) -> Self:
        return cls(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            colors=np.zeros((0, 3)),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> Self:
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            positions=np.array([g.position for g in gaussians], dtype=np.float64),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=np.float64),
            rotations=np.array([g.rotation for g in gaussians], dtype=np.float64),
            opacity_logits=np.array(
                [g.opacity_logit for g in gaussians], dtype=np.float64
            ),
            colors=np.array([g.color for g in gaussians], dtype=np.float64),
        )

    @classmethod
    def from_activated(cls, positions, scales, rotations, opacities, colors) -> Self:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        count = positions.shape[0]
        return cls(
            positions=positions,
            log_scales=np.log(np.broadcast_to(scales, (count, 3)).astype(np.float64)),
            rotations=np.broadcast_to(rotations, (count, 4)).astype(np.float64),
            opacity_logits=logit(np.broadcast_to(opacities, (count,)).astype(np.float64)),
            colors=np.broadcast_to(colors, (count, 3)).astype(np.float64),
        )

    # -------- activated values

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    # -------- copies and selections

    def copy(self) -> Self:
        return replace(
            self,
            **{name: getattr(self, name).copy() for name in self.PARAMETERS},
            grad_accum=self.grad_accum.copy(),
            grad_views=self.grad_views.copy(),
        )

    def select(self, index) -> Self:
        """Rows selected by a boolean mask or an index array, accumulators included"""
        return replace(
            self,
            **{name: getattr(self, name)[index] for name in self.PARAMETERS},
            grad_accum=self.grad_accum[index],
            grad_views=self.grad_views[index],
        )

    def concat(self, other: Self) -> Self:
        return replace(
            self,
            **{
                name: np.concatenate([getattr(self, name), getattr(other, name)])
                for name in self.PARAMETERS
            },
            grad_accum=np.concatenate([self.grad_accum, other.grad_accum]),
            grad_views=np.concatenate([self.grad_views, other.grad_views]),
        )

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def reset_accumulators(self):
        self.grad_accum = np.zeros(len(self))
        self.grad_views = np.zeros(len(self))

    def round_to_storage(self) -> Self:
        """Round every parameter to STORAGE_DTYPE, the precision clouds are saved at.

        Clouds kept at that precision survive a save/load round trip bitwise."""
        for name in self.PARAMETERS:
            setattr(self, name, getattr(self, name).astype(STORAGE_DTYPE).astype(np.float64))
        return self


def nearest_neighbor_scales(positions: np.ndarray, neighbors: int = 3) -> np.ndarray:
    """Mean distance of every point to its nearest neighbours.

    Returns None when there is no neighbour to measure against."""
    count = positions.shape[0]
    k = min(neighbors, count - 1)
    if k < 1:
        return None  # type: ignore
    distances, _ = cKDTree(positions).query(positions, k=k + 1)
    # first column is the point itself
    return np.maximum(distances[:, 1:].mean(axis=1), 1e-7)


def init_sphere_cloud(
    count: int,
    radius: float = 0.5,
    opacity: float = 0.1,
    color: Vec3 = GREY,
    seed: int = 0,
) -> GaussianCloud:
    """Gaussians uniformly distributed inside a ball, with isotropic scales set
    to the mean distance to their 3 nearest neighbours"""
    if count < 1:
        raise ValueError("count must be at least 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0 < opacity < 1:
        raise ValueError("opacity must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * np.cbrt(rng.random(count))
    positions = directions * radii[:, None]
    scales = nearest_neighbor_scales(positions)
    if scales is None:
        scales = np.full(count, radius)
    logger.debug(f"sphere cloud: {count} gaussians, radius {radius}")
    return GaussianCloud.from_activated(
        positions=positions,
        scales=np.repeat(scales[:, None], 3, axis=1),
        rotations=(1.0, 0.0, 0.0, 0.0),
        opacities=opacity,
        colors=color,
    ).round_to_storage()


# ------------------------ cameras ------------------------


def look_at_rotation(position: np.ndarray) -> np.ndarray:
    """World-to-view rotation of a camera at `position` looking at the origin.

    View axes: x right, y down, z forward (right-handed); world is y-up.
    """
    forward = -position / np.linalg.norm(position)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera on a sphere around the origin, looking at the origin"""

    azimuth: float
    elevation: float
    radius: float = 1.0
    fov_y: float = 50.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not -90 < self.elevation < 90:
            raise ValueError("elevation must lie strictly between -90 and 90 degrees")
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")
        if not 0 < self.fov_y < 180:
            raise ValueError("fov_y must lie in (0, 180) degrees")
        if self.width < 0 or self.height < 0:
            raise ValueError("resolution cannot be negative")

    @cached_property
    def position(self) -> np.ndarray:
        azimuth, elevation = math.radians(self.azimuth), math.radians(self.elevation)
        return self.radius * np.array(
            [
                math.cos(elevation) * math.sin(azimuth),
                math.sin(elevation),
                math.cos(elevation) * math.cos(azimuth),
            ]
        )

    @cached_property
    def rotation(self) -> np.ndarray:
        return look_at_rotation(self.position)

    @cached_property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.position

    @cached_property
    def view_matrix(self) -> np.ndarray:
        """W: world to view rigid transform"""
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    @property
    def focal(self) -> float:
        """Focal length in pixels; pixels are square so fx = fy"""
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def to_view(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ point + self.translation

    def jacobian(self, view_point: np.ndarray) -> np.ndarray:
        """J: Jacobian of the perspective projection at a view-space point (2x3)"""
        tx, ty, tz = view_point
        f = self.focal
        return np.array(
            [
                [f / tz, 0.0, -f * tx / tz**2],
                [0.0, f / tz, -f * ty / tz**2],
            ]
        )

    def project_point(self, view_point: np.ndarray) -> np.ndarray:
        tx, ty, tz = view_point
        cx, cy = self.principal_point
        return np.array([self.focal * tx / tz + cx, self.focal * ty / tz + cy])

    def with_resolution(self, width: int, height: int) -> Self:
        return replace(self, width=width, height=height)

    def unit_direction(self) -> np.ndarray:
        return self.position / self.radius


def great_circle_distance(a: Camera, b: Camera) -> float:
    """Angle in radians between the viewing directions of two cameras"""
    cosine = float(np.clip(a.unit_direction() @ b.unit_direction(), -1.0, 1.0))
    return math.acos(cosine)


@dataclass(frozen=True)
class CameraSampling:
    radius: float = 1.0
    fov_min: float = 40.0
    fov_max: float = 70.0
    azimuth_min: float = -180.0
    azimuth_max: float = 180.0
    elevation_min: float = -45.0
    elevation_max: float = 45.0
    width: int = 64
    height: int = 64
    # uniform: random poses; targets: draw among the provider's target cameras
    mode: str = "uniform"

    def __post_init__(self):
        for low, high in (
            ("fov_min", "fov_max"),
            ("azimuth_min", "azimuth_max"),
            ("elevation_min", "elevation_max"),
        ):
            if getattr(self, low) > getattr(self, high):
                raise ValueError(f"{low} must not exceed {high}")
        if self.mode not in ("uniform", "targets"):
            raise ValueError(f"unknown camera sampling mode: {self.mode!r}")


def sample_camera(rng: np.random.Generator, config: CameraSampling) -> Camera:
    fov_y = rng.uniform(config.fov_min, config.fov_max)
    azimuth = rng.uniform(config.azimuth_min, config.azimuth_max)
    elevation = rng.uniform(config.elevation_min, config.elevation_max)
    return Camera(
        azimuth=float(azimuth),
        elevation=float(elevation),
        radius=config.radius,
        fov_y=float(fov_y),
        width=config.width,
        height=config.height,
    )


def turntable(
    count: int, elevation: float, radius: float, fov_y: float, width: int, height: int
) -> list[Camera]:
    """Cameras evenly spaced in azimuth, starting at -180 degrees"""
    return funcy.lmap(
        lambda i: Camera(
            azimuth=-180.0 + 360.0 * i / count,
            elevation=elevation,
            radius=radius,
            fov_y=fov_y,
            width=width,
            height=height,
        ),
        range(count),
    )


# ------------------------ render settings ------------------------


@dataclass(frozen=True)
class RenderSettings:
    background: Vec3 = (1.0, 1.0, 1.0)
    # contributions with a smaller pixel alpha are skipped
    alpha_min: float = 1.0 / 255.0
    # half-width of the per-gaussian bounding square, in standard deviations
    extent_sigma: float = 3.0
    tile_size: int = 16
    # added to the diagonal of every projected covariance, pixel^2
    blur: float = 0.3
    alpha_max: float = 0.99
    # compositing stops once transmittance falls below this
    transmittance_min: float = 1e-4
    near: float = 0.01
    # numba threads, 0 keeps numba's default
    threads: int = 0

    def __post_init__(self):
        if not 0 < self.alpha_min < 1:
            raise ValueError("alpha_min must lie in (0, 1)")
        if self.extent_sigma <= 0:
            raise ValueError("extent_sigma must be positive")
        if self.tile_size < 1:
            raise ValueError("tile_size must be at least 1")
        if self.blur < 0:
            raise ValueError("blur cannot be negative")
        if not 0 < self.alpha_max < 1:
            raise ValueError("alpha_max must lie in (0, 1)")
        if not 0 <= self.transmittance_min < 1:
            raise ValueError("transmittance_min must lie in [0, 1)")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    @property
    def background_array(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)
