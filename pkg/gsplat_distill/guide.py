"""Score providers and the score-distillation step.

A provider is a denoiser D(x; σ). Its score estimate (D(x) - x) / σ² is pulled
back through the renderer to give an ascent direction on the log density of
the rendered view.
"""

import math
import time
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .logging import logger
from .noise import NoiseField, step_noise
from .raster import CloudGradients, render, render_backward
from .scene import Camera, GaussianCloud, RenderSettings, great_circle_distance

# ------------------------ schedule ------------------------


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_max: float = 1.0
    sigma_min: float = 0.02
    total_steps: int = 2000
    mode: str = "geometric"

    def __post_init__(self):
        if not self.sigma_max >= self.sigma_min > 0:
            raise ValueError("sigma levels must satisfy sigma_max >= sigma_min > 0")
        if self.total_steps < 0:
            raise ValueError("total_steps cannot be negative")
        if self.mode != "geometric":
            raise ValueError(f"unknown sigma schedule: {self.mode!r}")


def sigma_at(schedule: SigmaSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.sigma_max
    ratio = schedule.sigma_min / schedule.sigma_max
    return schedule.sigma_max * ratio ** (step / schedule.total_steps)


# ------------------------ providers ------------------------


@runtime_checkable
class ScoreProvider(Protocol):
    def denoise(
        self, x: np.ndarray, sigma: float, camera: Camera, rng: np.random.Generator
    ) -> np.ndarray: ...


class IdentityDenoiser:
    """D(x) = x: zero score everywhere"""

    def denoise(self, x, sigma, camera=None, rng=None):
        return x


class ConstantDenoiser:
    """Returns the same image whatever the input"""

    def __init__(self, target: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)

    def denoise(self, x, sigma, camera=None, rng=None):
        return np.broadcast_to(self.target, x.shape)


class TargetViewDenoiser:
    """Returns the stored target of the camera closest to the query camera.

    Closeness is the angle between viewing directions; ties go to the first
    stored view.
    """

    def __init__(self, views: list[tuple[Camera, np.ndarray]]):
        if not views:
            raise ValueError("at least one target view is required")
        self.views = [(camera, np.asarray(image, dtype=np.float64)) for camera, image in views]

    def __repr__(self):
        return f"{self.__class__.__name__}(<{len(self.views)} views>)"

    @property
    def cameras(self) -> list[Camera]:
        return [camera for camera, _ in self.views]

    def nearest(self, camera: Camera) -> int:
        distances = [great_circle_distance(camera, stored) for stored in self.cameras]
        return int(np.argmin(distances))

    def denoise(self, x, sigma, camera, rng=None):
        if camera is None:
            raise ValueError("TargetViewDenoiser needs the query camera")
        target = self.views[self.nearest(camera)][1]
        if target.shape != x.shape:
            raise ValueError(
                f"target view has shape {target.shape}, render has shape {x.shape}"
            )
        return target


def score_from_denoiser(
    x: np.ndarray,
    sigma: float,
    provider: ScoreProvider,
    camera: Camera | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """(D(x; σ) - x) / σ²"""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    denoised = provider.denoise(x, sigma, camera, rng)
    if denoised.shape != x.shape:
        raise ValueError(f"denoiser returned shape {denoised.shape} for input {x.shape}")
    return (denoised - x) / sigma**2


def perturb_render(x: np.ndarray, noise: np.ndarray, sigma: float) -> np.ndarray:
    if x.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match render {x.shape}")
    return x + sigma * noise


# ------------------------ distillation ------------------------


@dataclass(frozen=True)
class GuideConfig:
    sigma_max: float = 1.0
    sigma_min: float = 0.02
    # score estimates averaged per step, each with its own noise draw
    samples: int = 1
    # evaluate the denoiser on x + σn rather than on the clean render
    perturb_input: bool = True
    # identity | constant | targets
    provider: str = "targets"
    constant_value: float = 0.5

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.provider not in ("identity", "constant", "targets"):
            raise ValueError(f"unknown provider: {self.provider!r}")

    def schedule(self, total_steps: int) -> SigmaSchedule:
        return SigmaSchedule(self.sigma_max, self.sigma_min, total_steps)


@dataclass(frozen=True)
class GuidanceStepReport:
    sigma: float
    rho: float
    score_norm: float
    camera: Camera
    elapsed: float
    samples: int = 1
    # gaussians with at least one tile entry in the rendered view
    visible: np.ndarray | None = None

    def __post_init__(self):
        if self.score_norm < 0 or self.elapsed < 0:
            raise ValueError("norms and durations cannot be negative")


def distill_step(
    cloud: GaussianCloud,
    camera: Camera,
    field: NoiseField | None,
    provider: ScoreProvider,
    sigma: float,
    rho: float,
    settings: RenderSettings,
    rng: np.random.Generator,
    samples: int = 1,
    perturb_input: bool = True,
) -> tuple[CloudGradients, GuidanceStepReport]:
    """Single-view estimate of the 3D score.

    Two seeds are drawn from `rng` per sample whether or not structured noise
    is used, so runs with and without it consume the generator identically.
    """
    start = time.perf_counter()
    output = render(cloud, camera, settings, keep_contributors=True)
    x = output.color
    score = np.zeros_like(x)
    used_rho = 0.0
    for _ in range(samples):
        color_seed, iid_seed = (int(seed) for seed in rng.integers(0, 2**63 - 1, size=2))
        drawn = step_noise(field, camera, settings, color_seed, iid_seed, rho)
        used_rho = drawn.rho
        noisy = perturb_render(x, drawn.noise, sigma) if perturb_input else x
        score += score_from_denoiser(noisy, sigma, provider, camera, rng)
    if samples > 1:
        score /= samples
    grads = render_backward(cloud, camera, settings, score, output)
    report = GuidanceStepReport(
        sigma=sigma,
        rho=used_rho,
        score_norm=float(np.linalg.norm(score)) / math.sqrt(score.size),
        camera=camera,
        elapsed=time.perf_counter() - start,
        samples=samples,
        visible=output.visible,
    )
    logger.debug(
        f"distill: sigma {sigma:.4f} rho {used_rho:.3f} score rms {report.score_norm:.4g}"
    )
    return grads, report
