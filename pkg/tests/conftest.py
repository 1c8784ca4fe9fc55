import pathlib

import numpy as np
import yaml
from pytest import fixture

from gsplat_distill.scene import Camera, GaussianCloud, RenderSettings, logit

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@fixture
def baseline():
    """Committed convergence thresholds of the demo reconstruction"""
    return yaml.safe_load((FIXTURES / "baseline.yml").read_text())["reconstruction"]


@fixture
def camera():
    return Camera(azimuth=30.0, elevation=15.0, radius=1.0, fov_y=50.0, width=16, height=16)


@fixture
def settings():
    return RenderSettings(background=(0.2, 0.5, 0.8), tile_size=8)


@fixture
def cloud():
    """Five small gaussians around the origin, distinct depths from any view"""
    rng = np.random.default_rng(7)
    rotations = rng.standard_normal((5, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return GaussianCloud(
        positions=np.array(
            [
                [0.0, 0.0, 0.0],
                [0.12, -0.05, 0.08],
                [-0.1, 0.09, -0.04],
                [0.05, 0.14, 0.11],
                [-0.07, -0.11, 0.15],
            ]
        ),
        log_scales=np.log(rng.uniform(0.04, 0.1, (5, 3))),
        rotations=rotations,
        opacity_logits=logit(rng.uniform(0.3, 0.8, 5)),
        colors=rng.random((5, 3)),
    )


@fixture
def single():
    """One isotropic gaussian at the origin"""
    return GaussianCloud.from_activated(
        positions=[0.0, 0.0, 0.0],
        scales=0.05,
        rotations=(1.0, 0.0, 0.0, 0.0),
        opacities=0.5,
        colors=(1.0, 0.0, 0.0),
    )
