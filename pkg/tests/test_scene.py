import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from gsplat_distill.scene import (
    Camera,
    CameraSampling,
    Gaussian3D,
    GaussianCloud,
    RenderSettings,
    great_circle_distance,
    init_sphere_cloud,
    sample_camera,
    turntable,
)

# -------- gaussians


def test__Gaussian3D__activated_values():
    gaussian = Gaussian3D(
        position=np.zeros(3),
        log_scale=np.log([0.1, 0.2, 0.3]),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        opacity_logit=0.0,
        color=np.full(3, 0.5),
    )
    assert np.allclose(gaussian.scale, [0.1, 0.2, 0.3])
    assert gaussian.opacity == 0.5


def test__GaussianCloud__rejects_mismatched_shapes():
    with pytest.raises(ValueError, match="rotations"):
        GaussianCloud(
            positions=np.zeros((2, 3)),
            log_scales=np.zeros((2, 3)),
            rotations=np.zeros((3, 4)),
            opacity_logits=np.zeros(2),
            colors=np.zeros((2, 3)),
        )


def test__GaussianCloud__rejects_negative_step():
    with pytest.raises(ValueError):
        GaussianCloud(**{**_arrays(1), "step": -1})


def test__GaussianCloud__accumulators_follow_the_gaussians(cloud):
    cloud.grad_accum[:] = np.arange(5)
    selected = cloud.select(np.array([4, 1]))
    assert len(selected) == 2
    assert selected.grad_accum.tolist() == [4.0, 1.0]
    joined = cloud.concat(selected)
    assert len(joined) == 7
    assert joined.grad_views.shape == (7,)


def test__GaussianCloud__copy_is_independent(cloud):
    copy = cloud.copy()
    copy.positions += 1.0
    copy.grad_accum += 1.0
    assert not np.allclose(copy.positions, cloud.positions)
    assert (cloud.grad_accum == 0).all()


def test__GaussianCloud__iterate(cloud):
    gaussians = list(cloud)
    assert len(gaussians) == 5
    assert np.array_equal(gaussians[2].position, cloud.positions[2])
    rebuilt = GaussianCloud.from_gaussians(gaussians)
    assert np.array_equal(rebuilt.colors, cloud.colors)


def test__GaussianCloud__empty():
    assert len(GaussianCloud.empty()) == 0
    assert len(GaussianCloud.from_gaussians([])) == 0


def test__GaussianCloud__normalize_rotations(cloud):
    cloud.rotations *= 3.0
    cloud.normalize_rotations()
    assert np.allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0)


def test__GaussianCloud__round_to_storage(cloud):
    original = cloud.copy()
    assert cloud.round_to_storage() is cloud
    for name in GaussianCloud.PARAMETERS:
        value = getattr(cloud, name)
        assert value.dtype == np.float64
        assert np.array_equal(value, value.astype(np.float32))
        assert np.allclose(value, getattr(original, name), rtol=1e-6, atol=1e-7)
    rounded = cloud.copy()
    cloud.round_to_storage()
    assert all(np.array_equal(getattr(cloud, n), getattr(rounded, n)) for n in cloud.PARAMETERS)


def _arrays(count):
    return {
        "positions": np.zeros((count, 3)),
        "log_scales": np.zeros((count, 3)),
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        "opacity_logits": np.zeros(count),
        "colors": np.zeros((count, 3)),
    }


# -------- init_sphere_cloud


def test__init_sphere_cloud__defaults():
    cloud = init_sphere_cloud(256, radius=0.5, opacity=0.1, color=(0.5, 0.5, 0.5), seed=3)
    assert len(cloud) == 256
    assert (np.linalg.norm(cloud.positions, axis=1) <= 0.5 + 1e-6).all()
    assert np.allclose(cloud.opacities, 0.1)
    assert np.allclose(cloud.colors, 0.5)
    assert np.array_equal(cloud.rotations, np.tile([1.0, 0.0, 0.0, 0.0], (256, 1)))
    assert cloud.step == 0
    assert (cloud.grad_accum == 0).all()


def test__init_sphere_cloud__scales_from_neighbours():
    cloud = init_sphere_cloud(64, seed=1)
    distances, _ = cKDTree(cloud.positions).query(cloud.positions, k=4)
    expected = distances[:, 1:].mean(axis=1)
    assert np.allclose(cloud.scales, expected[:, None])


def test__init_sphere_cloud__single_gaussian_gets_the_radius():
    cloud = init_sphere_cloud(1, radius=0.3)
    assert np.allclose(cloud.scales, 0.3)


def test__init_sphere_cloud__deterministic():
    a = init_sphere_cloud(32, seed=5)
    b = init_sphere_cloud(32, seed=5)
    c = init_sphere_cloud(32, seed=6)
    assert np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


@pytest.mark.parametrize(
    "arguments",
    [{"count": 0}, {"count": 4, "radius": 0.0}, {"count": 4, "opacity": 1.0}],
)
def test__init_sphere_cloud__invalid(arguments):
    with pytest.raises(ValueError):
        init_sphere_cloud(**arguments)


# -------- cameras


@pytest.mark.parametrize("azimuth,elevation", [(0, 0), (30, 15), (-120, -40), (179, 80)])
def test__Camera__view_matrix_is_rigid(azimuth, elevation):
    camera = Camera(azimuth=azimuth, elevation=elevation, radius=2.0)
    rotation = camera.view_matrix[:3, :3]
    assert np.allclose(rotation @ rotation.T, np.eye(3))
    assert np.isclose(np.linalg.det(rotation), 1.0)
    assert np.array_equal(camera.view_matrix[3], [0.0, 0.0, 0.0, 1.0])


@pytest.mark.parametrize("azimuth,elevation", [(0, 0), (45, 30), (-90, -20)])
def test__Camera__looks_at_the_origin(azimuth, elevation):
    camera = Camera(azimuth=azimuth, elevation=elevation, radius=1.5)
    assert np.allclose(camera.to_view(np.zeros(3)), [0.0, 0.0, 1.5])
    assert np.allclose(camera.to_view(camera.position), 0.0)


def test__Camera__front_pose():
    camera = Camera(azimuth=0.0, elevation=0.0, radius=1.0)
    assert np.allclose(camera.position, [0.0, 0.0, 1.0])
    # world up maps to view up, which is -y in view space
    assert np.allclose(camera.rotation @ [0.0, 1.0, 0.0], [0.0, -1.0, 0.0])


def test__Camera__focal_and_principal_point():
    camera = Camera(azimuth=0.0, elevation=0.0, fov_y=90.0, width=32, height=16)
    assert math.isclose(camera.focal, 8.0)
    assert camera.principal_point == (16.0, 8.0)


def test__Camera__jacobian_matches_projection():
    camera = Camera(azimuth=10.0, elevation=5.0)
    point = np.array([0.05, -0.02, 0.9])
    step = 1e-6
    numeric = np.stack(
        [
            (camera.project_point(point + step * e) - camera.project_point(point - step * e))
            / (2 * step)
            for e in np.eye(3)
        ],
        axis=1,
    )
    assert np.allclose(camera.jacobian(point), numeric, atol=1e-5)


@pytest.mark.parametrize(
    "arguments",
    [{"elevation": 90.0}, {"radius": 0.0}, {"fov_y": 180.0}, {"width": -1}],
)
def test__Camera__invalid(arguments):
    with pytest.raises(ValueError):
        Camera(**({"azimuth": 0.0, "elevation": 0.0} | arguments))


def test__great_circle_distance():
    a = Camera(azimuth=0.0, elevation=0.0)
    b = Camera(azimuth=90.0, elevation=0.0, radius=3.0)
    assert math.isclose(great_circle_distance(a, b), math.pi / 2)
    assert great_circle_distance(a, a) == 0.0


def test__sample_camera__inside_ranges():
    sampling = CameraSampling(
        fov_min=40, fov_max=70, elevation_min=-45, elevation_max=45, width=8, height=4
    )
    rng = np.random.default_rng(0)
    cameras = [sample_camera(rng, sampling) for _ in range(200)]
    assert all(40 <= c.fov_y <= 70 for c in cameras)
    assert all(-45 <= c.elevation <= 45 for c in cameras)
    assert all(-180 <= c.azimuth <= 180 for c in cameras)
    assert all((c.width, c.height) == (8, 4) for c in cameras)


def test__sample_camera__deterministic():
    sampling = CameraSampling()
    a = sample_camera(np.random.default_rng(4), sampling)
    b = sample_camera(np.random.default_rng(4), sampling)
    assert a == b


def test__CameraSampling__invalid():
    with pytest.raises(ValueError):
        CameraSampling(fov_min=80, fov_max=70)
    with pytest.raises(ValueError):
        CameraSampling(mode="orbit")


def test__turntable():
    cameras = turntable(36, 15.0, 1.0, 50.0, 8, 8)
    assert len(cameras) == 36
    assert cameras[0].azimuth == -180.0
    assert np.allclose(np.diff([c.azimuth for c in cameras]), 10.0)


# -------- render settings


@pytest.mark.parametrize(
    "arguments",
    [
        {"alpha_min": 0.0},
        {"alpha_min": 1.0},
        {"extent_sigma": 0.0},
        {"tile_size": 0},
        {"blur": -0.1},
        {"transmittance_min": 1.0},
    ],
)
def test__RenderSettings__invalid(arguments):
    with pytest.raises(ValueError):
        RenderSettings(**arguments)
