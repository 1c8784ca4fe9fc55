"""Variational gaussian splatting.

Positions and log-scales are jittered by σγε before rendering, and the
gradients found at the jittered parameters are applied to the unjittered ones.
"""

from dataclasses import dataclass

import numpy as np

from .logging import logger
from .raster import CloudGradients
from .scene import GaussianCloud

PERTURBED_FIELDS = ("positions", "log_scales")


@dataclass(frozen=True)
class VGSConfig:
    gamma: float = 0.15
    enabled: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma cannot be negative")


@dataclass(frozen=True)
class PerturbationRecord:
    position_offsets: np.ndarray
    # applied to the stored log-scales
    scale_offsets: np.ndarray
    sigma: float
    gamma: float
    seed: int

    @property
    def is_zero(self) -> bool:
        return not (self.position_offsets.any() or self.scale_offsets.any())

    @property
    def offsets(self) -> dict[str, np.ndarray]:
        """Offsets keyed by the cloud parameter they apply to"""
        return dict(zip(PERTURBED_FIELDS, (self.position_offsets, self.scale_offsets)))


def perturb(
    cloud: GaussianCloud, sigma: float, config: VGSConfig, seed: int
) -> tuple[GaussianCloud, PerturbationRecord]:
    """θ' = θ + σγε on positions and log-scales; `cloud` is left untouched"""
    if sigma < 0:
        raise ValueError(f"sigma cannot be negative, got {sigma}")
    count = len(cloud)
    gamma = config.gamma if config.enabled else 0.0
    amplitude = sigma * gamma
    if amplitude == 0:
        record = PerturbationRecord(
            position_offsets=np.zeros((count, 3)),
            scale_offsets=np.zeros((count, 3)),
            sigma=sigma,
            gamma=gamma,
            seed=seed,
        )
        return cloud.copy(), record
    rng = np.random.default_rng(seed)
    record = PerturbationRecord(
        position_offsets=amplitude * rng.standard_normal((count, 3)),
        scale_offsets=amplitude * rng.standard_normal((count, 3)),
        sigma=sigma,
        gamma=gamma,
        seed=seed,
    )
    logger.debug(f"vgs: jitter amplitude {amplitude:.4g} on {count} gaussians")
    return replay(cloud, record), record


def replay(cloud: GaussianCloud, record: PerturbationRecord) -> GaussianCloud:
    """Apply recorded offsets to a cloud of the same size"""
    if record.position_offsets.shape[0] != len(cloud):
        raise ValueError("perturbation record does not match the cloud size")
    perturbed = cloud.copy()
    for name, offsets in record.offsets.items():
        setattr(perturbed, name, getattr(perturbed, name) + offsets)
    return perturbed


def passthrough_gradients(
    grads: CloudGradients, cloud: GaussianCloud | None = None
) -> CloudGradients:
    """∂θ'/∂θ is the identity: gradients at θ' are gradients at θ"""
    if cloud is not None and len(grads) != len(cloud):
        raise ValueError(f"{len(grads)} gradients for a cloud of {len(cloud)} gaussians")
    for name, value in grads.items():
        if value.shape[0] != len(grads):
            raise ValueError(f"gradient '{name}' has {value.shape[0]} rows, expected {len(grads)}")
    return grads
