import contextlib
from dataclasses import dataclass, fields
from typing import Iterable, Self

import numba
import numpy as np
import scipy.sparse

from . import kernels
from .logging import logger
from .scene import Camera, GaussianCloud, RenderSettings, sigmoid

QUATERNION_TOLERANCE = 1e-6


# ------------------------ types ------------------------


@dataclass(frozen=True)
class Projected2D:
    """One gaussian seen from a camera.

    `covariance` is J W Σ Wᵀ Jᵀ before regularization; the renderer adds
    `RenderSettings.blur` to its diagonal before inverting it.
    """

    mean: np.ndarray
    covariance: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    index: int = 0
    culled: bool = False

    def regularized(self, blur: float) -> np.ndarray:
        return self.covariance + blur * np.eye(2)

    def extent(self, settings: RenderSettings) -> float:
        """Half-width of the bounding square, in pixels"""
        largest = np.linalg.eigvalsh(self.regularized(settings.blur))[-1]
        return settings.extent_sigma * float(np.sqrt(max(largest, 0.0)))


@dataclass
class RasterContext:
    """What the forward pass leaves behind for the backward pass"""

    means2d: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray
    offsets: np.ndarray
    ids: np.ndarray
    # number of tile-list entries walked by every pixel
    last: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    variance: np.ndarray
    # gaussians with at least one tile-list entry
    visible: np.ndarray
    contributors: RasterContext | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass
class CloudGradients:
    """Gradients with the shapes of the stored cloud parameters"""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return self.positions.shape[0]

    def __neg__(self) -> Self:
        return type(self)(**{name: -value for name, value in self.items()})

    def __add__(self, other: Self) -> Self:
        return type(self)(
            **{name: value + getattr(other, name) for name, value in self.items()}
        )

    def scaled(self, factor: float) -> Self:
        return type(self)(**{name: factor * value for name, value in self.items()})

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return ((f.name, getattr(self, f.name)) for f in fields(self))

    def is_finite(self) -> bool:
        return all(np.isfinite(value).all() for _, value in self.items())

    @classmethod
    def zeros(cls, count: int) -> Self:
        return cls(
            positions=np.zeros((count, 3)),
            log_scales=np.zeros((count, 3)),
            rotations=np.zeros((count, 4)),
            opacity_logits=np.zeros(count),
            colors=np.zeros((count, 3)),
        )


# ------------------------ per-gaussian math ------------------------


def quaternion_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def build_covariance(scale, rotation) -> np.ndarray:
    """Σ = R diag(s)² Rᵀ from activated scales and a unit quaternion"""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(rotation) - 1.0) > QUATERNION_TOLERANCE:
        raise ValueError(f"quaternion {rotation} is not unit-norm")
    if (scale <= 0).any():
        raise ValueError(f"scales must be positive, got {scale}")
    m = quaternion_matrix(rotation) * scale
    return m @ m.T


def project_covariance(
    covariance: np.ndarray, view_rotation: np.ndarray, jacobian: np.ndarray
) -> np.ndarray:
    """Σ' = J W Σ Wᵀ Jᵀ, using only the rotation block of W"""
    transform = jacobian @ view_rotation
    return transform @ covariance @ transform.T


def project_gaussian(
    covariance: np.ndarray,
    position,
    camera: Camera,
    near: float = 0.01,
    opacity: float = 1.0,
    color=(0.0, 0.0, 0.0),
    index: int = 0,
) -> Projected2D:
    view_point = camera.to_view(np.asarray(position, dtype=np.float64))
    depth = float(view_point[2])
    color = np.asarray(color, dtype=np.float64)
    if depth <= near:
        return Projected2D(
            mean=np.zeros(2),
            covariance=np.zeros((2, 2)),
            depth=depth,
            opacity=opacity,
            color=color,
            index=index,
            culled=True,
        )
    projected = project_covariance(
        covariance, camera.rotation, camera.jacobian(view_point)
    )
    return Projected2D(
        mean=camera.project_point(view_point),
        covariance=projected,
        depth=depth,
        opacity=opacity,
        color=color,
        index=index,
    )


def pixel_alpha(
    projected: Projected2D, pixel, settings: RenderSettings = RenderSettings()
) -> float:
    """α' = α exp(-½ dᵀ Σ'⁻¹ d), d = mean - pixel, clamped to alpha_max.

    Zero outside the bounding square of the gaussian and below alpha_min.
    """
    if projected.culled:
        return 0.0
    d = projected.mean - np.asarray(pixel, dtype=np.float64)
    extent = projected.extent(settings)
    if abs(d[0]) > extent or abs(d[1]) > extent:
        return 0.0
    covariance = projected.regularized(settings.blur)
    det = covariance[0, 0] * covariance[1, 1] - covariance[0, 1] * covariance[1, 0]
    if det <= 0:
        raise ValueError("projected covariance is singular after regularization")
    inverse = np.array(
        [[covariance[1, 1], -covariance[0, 1]], [-covariance[1, 0], covariance[0, 0]]]
    ) / det
    alpha = min(settings.alpha_max, projected.opacity * float(np.exp(-0.5 * d @ inverse @ d)))
    return 0.0 if alpha < settings.alpha_min else alpha


def composite(
    contributions: Iterable[tuple[float, np.ndarray]],
    background,
    transmittance_min: float = 1e-4,
) -> np.ndarray:
    """Front-to-back alpha compositing over a background"""
    color = np.zeros(3)
    transmittance = 1.0
    for alpha, c in contributions:
        color = color + alpha * transmittance * np.asarray(c, dtype=np.float64)
        transmittance *= 1.0 - alpha
        if transmittance < transmittance_min:
            break
    return color + transmittance * np.asarray(background, dtype=np.float64)


# ------------------------ tiled renderer ------------------------


@contextlib.contextmanager
def _threads(count: int):
    if count <= 0:
        yield
        return
    previous = numba.get_num_threads()
    numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def _check_camera(camera: Camera):
    if camera.width < 1 or camera.height < 1:
        raise ValueError(f"cannot render at {camera.width}x{camera.height}")


def depth_order(depths: np.ndarray) -> np.ndarray:
    """Front to back, ties broken by storage index"""
    return np.lexsort((np.arange(depths.shape[0]), depths))


def _as_arrays(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    return {
        name: np.ascontiguousarray(getattr(cloud, name), dtype=np.float64)
        for name in GaussianCloud.PARAMETERS
    }


def _rasterize(cloud: GaussianCloud, camera: Camera, settings: RenderSettings):
    arrays = _as_arrays(cloud)
    cx, cy = camera.principal_point
    means2d, _, conics, depths, radii, opacities = kernels.project_gaussians(
        arrays["positions"],
        arrays["log_scales"],
        arrays["rotations"],
        arrays["opacity_logits"],
        np.ascontiguousarray(camera.rotation),
        np.ascontiguousarray(camera.translation),
        camera.focal,
        cx,
        cy,
        settings.near,
        settings.blur,
        settings.extent_sigma,
    )
    offsets, ids = kernels.bin_tiles(
        depth_order(depths), means2d, radii, camera.width, camera.height, settings.tile_size
    )
    context = RasterContext(
        means2d=means2d,
        conics=conics,
        radii=radii,
        opacities=opacities,
        offsets=offsets,
        ids=ids,
        last=np.zeros((camera.height, camera.width), dtype=np.int64),
    )
    return arrays, context


def render(
    cloud: GaussianCloud,
    camera: Camera,
    settings: RenderSettings = RenderSettings(),
    keep_contributors: bool = False,
) -> RenderOutput:
    _check_camera(camera)
    with _threads(settings.threads):
        arrays, context = _rasterize(cloud, camera, settings)
        image, alpha, variance, context.last = kernels.rasterize_forward(
            context.means2d,
            context.conics,
            context.radii,
            context.opacities,
            arrays["colors"],
            context.offsets,
            context.ids,
            camera.width,
            camera.height,
            settings.tile_size,
            settings.background_array,
            settings.alpha_min,
            settings.alpha_max,
            settings.transmittance_min,
        )
    visible = np.bincount(context.ids, minlength=len(cloud)) > 0
    logger.debug(
        f"rendered {len(cloud)} gaussians at {camera.width}x{camera.height}, "
        f"{context.ids.shape[0]} tile entries"
    )
    return RenderOutput(
        color=image,
        alpha=alpha,
        variance=variance,
        visible=visible,
        contributors=context if keep_contributors else None,
    )


def render_backward(
    cloud: GaussianCloud,
    camera: Camera,
    settings: RenderSettings,
    grad_image: np.ndarray,
    output: RenderOutput | None = None,
) -> CloudGradients:
    """Vector-Jacobian product of the rendered color with `grad_image`.

    Reuses the contributor lists of `output` when given, otherwise runs the
    forward pass again.
    """
    _check_camera(camera)
    if grad_image.shape != (camera.height, camera.width, 3):
        raise ValueError(
            f"grad_image has shape {grad_image.shape}, "
            f"expected {(camera.height, camera.width, 3)}"
        )
    if output is None or output.contributors is None:
        output = render(cloud, camera, settings, keep_contributors=True)
    context = output.contributors
    arrays = _as_arrays(cloud)
    with _threads(settings.threads):
        partial = kernels.rasterize_backward(
            context.means2d,
            context.conics,
            context.radii,
            context.opacities,
            arrays["colors"],
            context.offsets,
            context.ids,
            context.last,
            camera.width,
            camera.height,
            settings.tile_size,
            settings.background_array,
            settings.alpha_min,
            settings.alpha_max,
            np.ascontiguousarray(grad_image, dtype=np.float64),
        )
        screen = kernels.reduce_partials(partial, context.ids, len(cloud))
        positions, log_scales, rotations, logits = kernels.project_backward(
            arrays["positions"],
            arrays["log_scales"],
            arrays["rotations"],
            arrays["opacity_logits"],
            context.radii,
            np.ascontiguousarray(camera.rotation),
            np.ascontiguousarray(camera.translation),
            camera.focal,
            settings.blur,
            np.ascontiguousarray(screen[:, 0:2]),
            np.ascontiguousarray(screen[:, 2:5]),
            np.ascontiguousarray(screen[:, 5]),
        )
    return CloudGradients(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=logits,
        colors=screen[:, 6:9].copy(),
    )


def contribution_matrix(
    cloud: GaussianCloud, camera: Camera, settings: RenderSettings = RenderSettings()
) -> scipy.sparse.csr_matrix:
    """Compositing weights α'ᵢTᵢ as a (pixels, gaussians) sparse matrix.

    With a black background the rendered image is `matrix @ colors`,
    pixels in row-major order.
    """
    output = render(cloud, camera, settings, keep_contributors=True)
    context = output.contributors
    rows, cols, weights = kernels.contribution_weights(
        context.means2d,
        context.conics,
        context.radii,
        context.opacities,
        context.offsets,
        context.ids,
        context.last,
        camera.width,
        camera.height,
        settings.tile_size,
        settings.alpha_min,
        settings.alpha_max,
    )
    return scipy.sparse.csr_matrix(
        (weights, (rows, cols)), shape=(camera.width * camera.height, len(cloud))
    )


# ------------------------ reference renderer ------------------------


def project_cloud(
    cloud: GaussianCloud, camera: Camera, settings: RenderSettings = RenderSettings()
) -> list[Projected2D]:
    opacities = sigmoid(cloud.opacity_logits)
    projected = []
    for index, gaussian in enumerate(cloud):
        rotation = gaussian.rotation / np.linalg.norm(gaussian.rotation)
        projected.append(
            project_gaussian(
                build_covariance(gaussian.scale, rotation),
                gaussian.position,
                camera,
                near=settings.near,
                opacity=float(opacities[index]),
                color=gaussian.color,
                index=index,
            )
        )
    return projected


def render_reference(
    cloud: GaussianCloud, camera: Camera, settings: RenderSettings = RenderSettings()
) -> RenderOutput:
    """Pixel-by-pixel renderer: no tiles, every gaussian tested at every pixel"""
    _check_camera(camera)
    projected = [p for p in project_cloud(cloud, camera, settings) if not p.culled]
    projected.sort(key=lambda p: (p.depth, p.index))
    background = settings.background_array
    image = np.zeros((camera.height, camera.width, 3))
    alpha = np.zeros((camera.height, camera.width))
    variance = np.zeros((camera.height, camera.width))
    visible = np.zeros(len(cloud), dtype=bool)
    for row in range(camera.height):
        for column in range(camera.width):
            pixel = (column + 0.5, row + 0.5)
            contributions = []
            for p in projected:
                value = pixel_alpha(p, pixel, settings)
                if value > 0:
                    contributions.append((value, p.color))
                    visible[p.index] = True
            image[row, column] = composite(
                contributions, background, settings.transmittance_min
            )
            transmittance = 1.0
            for value, _ in contributions:
                variance[row, column] += (value * transmittance) ** 2
                transmittance *= 1.0 - value
                if transmittance < settings.transmittance_min:
                    break
            alpha[row, column] = 1.0 - transmittance
    return RenderOutput(color=image, alpha=alpha, variance=variance, visible=visible)
