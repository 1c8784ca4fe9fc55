"""Bundled synthetic scene and the target views a reconstruction run chases"""

import pathlib
from dataclasses import dataclass

import numpy as np

from .guide import ConstantDenoiser, IdentityDenoiser, ScoreProvider, TargetViewDenoiser
from .io import ManifestEntry, load_views, write_manifest, write_ppm
from .logging import logger
from .raster import render
from .scene import Camera, GaussianCloud, RenderSettings, logit, turntable

SCENE_SIZE = 16

type Views = list[tuple[Camera, np.ndarray]]


@dataclass(frozen=True)
class TargetsConfig:
    # manifest of target views; empty to use `synthetic`
    manifest: str = ""
    # manifest of held-out views, optional
    heldout: str = ""
    # render targets from the bundled scene instead of reading a manifest
    synthetic: bool = False
    scene_seed: int = 0
    views: int = 8
    heldout_views: int = 8
    elevation: float = 15.0
    heldout_elevation: float = 25.0
    radius: float = 1.0
    fov_y: float = 50.0

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("at least one target view is required")
        if self.heldout_views < 0:
            raise ValueError("heldout_views cannot be negative")


def synthetic_scene(seed: int = 0, count: int = SCENE_SIZE) -> GaussianCloud:
    """A few saturated, anisotropic blobs packed around the origin"""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    positions = directions * 0.3 * np.cbrt(rng.random(count))[:, None]
    rotations = rng.standard_normal((count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    colors = rng.random((count, 3))
    # push one channel down so blobs are told apart by hue
    colors[np.arange(count), rng.integers(0, 3, count)] *= 0.2
    return GaussianCloud(
        positions=positions,
        log_scales=np.log(rng.uniform(0.04, 0.12, (count, 3))),
        rotations=rotations,
        opacity_logits=logit(rng.uniform(0.7, 0.95, count)),
        colors=colors,
    ).round_to_storage()


def view_cameras(
    count: int,
    elevation: float,
    radius: float,
    fov_y: float,
    width: int,
    height: int,
    offset: float = 0.0,
) -> list[Camera]:
    return [
        Camera(
            azimuth=camera.azimuth + offset,
            elevation=camera.elevation,
            radius=radius,
            fov_y=fov_y,
            width=width,
            height=height,
        )
        for camera in turntable(count, elevation, radius, fov_y, width, height)
    ]


def synthetic_views(
    config: TargetsConfig, width: int, height: int, settings: RenderSettings
) -> tuple[Views, Views]:
    """Target views evenly spaced in azimuth, held-out views half a step off"""
    scene = synthetic_scene(config.scene_seed)
    spacing = 360.0 / config.views

    def shoot(cameras):
        return [(camera, render(scene, camera, settings).color) for camera in cameras]

    targets = shoot(
        view_cameras(config.views, config.elevation, config.radius, config.fov_y, width, height)
    )
    heldout = shoot(
        view_cameras(
            config.heldout_views,
            config.heldout_elevation,
            config.radius,
            config.fov_y,
            width,
            height,
            offset=spacing / 2,
        )
    )
    return targets, heldout


def write_views(views: Views, out_dir, prefix: str) -> pathlib.Path:
    """PPM files plus a manifest; returns the manifest path"""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (camera, image) in enumerate(views):
        name = f"{prefix}_{index:03d}.ppm"
        write_ppm(image, out_dir / name)
        entries.append(
            ManifestEntry(
                pathlib.Path(name), camera.azimuth, camera.elevation, camera.radius, camera.fov_y
            )
        )
    manifest = out_dir / f"{prefix}.txt"
    write_manifest(entries, manifest)
    logger.debug(f"wrote {len(views)} views to {manifest}")
    return manifest


def load_target_views(
    config: TargetsConfig, width: int, height: int, settings: RenderSettings
) -> tuple[Views, Views]:
    if config.synthetic:
        return synthetic_views(config, width, height, settings)
    if not config.manifest:
        raise ValueError("no target views: set targets.manifest or targets.synthetic")
    targets = load_views(config.manifest, width, height)
    heldout = load_views(config.heldout, width, height) if config.heldout else []
    return targets, heldout


def build_provider(name: str, views: Views, constant_value: float = 0.5) -> ScoreProvider:
    match name:
        case "identity":
            return IdentityDenoiser()
        case "constant":
            return ConstantDenoiser(np.full(3, constant_value))
        case "targets":
            return TargetViewDenoiser(views)
        case _:
            raise ValueError(f"unknown provider: {name!r}")
