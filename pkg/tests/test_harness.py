import numpy as np
import pytest
from pytest import fixture

from gsplat_distill.config import (
    RESOLVED_FILE,
    ConfigError,
    ConsistencyConfig,
    GradCheckConfig,
    NoiseStatsConfig,
    RunConfig,
)
from gsplat_distill.guide import ConstantDenoiser, IdentityDenoiser, TargetViewDenoiser
from gsplat_distill.harness import (
    ABLATION_CELLS,
    ABLATION_COLUMNS,
    PIXEL_COLUMNS,
    ConsistencyReport,
    GradCheckReport,
    cell_config,
    cell_name,
    closed_form_error,
    consistency_report,
    depth_gap,
    finite_difference,
    pixel_rows,
    relative_error,
    run_ablation,
    run_cell,
    run_gradcheck,
    run_noise_stats,
    run_training,
    setup_training,
    training_rng,
)
from gsplat_distill.io import load_cloud
from gsplat_distill.noise import NoiseConfig
from gsplat_distill.scene import GaussianCloud, RenderSettings

SMALL = {
    "scene.count": 64,
    "noise.count": 256,
    "camera.width": 8,
    "camera.height": 8,
    "trainer.total_steps": 3,
    "trainer.densify_start": 3,
    "evaluation.poses": 4,
    "evaluation.width": 8,
    "evaluation.height": 8,
}


@fixture
def small():
    return RunConfig.from_values(SMALL | {"guide.provider": "identity"})


# -------- gradient checks


def test__relative_error():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.2)
    # tiny numeric gradients are measured against the floor
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)


def test__finite_difference__linear_loss(cloud):
    numeric = finite_difference(lambda c: float(c.colors.sum()), cloud, "colors", 1e-4)
    assert np.allclose(numeric, 1.0)


def test__depth_gap(cloud, camera, single):
    assert depth_gap(single, camera) == np.inf
    assert depth_gap(cloud, camera) > 0


def test__GradCheckReport__keeps_the_worst_error():
    report = GradCheckReport(tolerance=1e-4, scenes=2)
    report.merge({"colors": 1e-6}, {"positions": 2e-6})
    report.merge({"colors": 3e-6}, {"positions": 1e-6})
    assert report.errors == {"colors": 3e-6}
    assert report.vgs_errors == {"positions": 2e-6}
    assert report.passed
    report.merge({"colors": 1e-3}, {})
    assert not report.passed


def test__GradCheckReport__zero_cotangent_must_give_zero():
    report = GradCheckReport(tolerance=1e-4, scenes=1, zero_cotangent=1e-20)
    assert not report.passed


def test__run_gradcheck():
    report = run_gradcheck(GradCheckConfig(scenes=2, gaussians=4, size=10), seed=1)
    assert report.passed, (report.errors, report.vgs_errors)
    assert set(report.errors) == {"positions", "log_scales", "rotations", "opacity_logits", "colors"}
    assert set(report.vgs_errors) == set(report.errors)
    assert report.zero_cotangent == 0.0


# -------- noise statistics


@fixture(scope="module")
def noise_report():
    config = NoiseStatsConfig(samples=400, correlation_samples=200, width=12, height=12)
    return run_noise_stats(config, NoiseConfig(count=512), RenderSettings(), seed=2)


def test__run_noise_stats__summary(noise_report):
    summary = noise_report.summary()
    assert summary["samples"] == 400
    assert 0.0 < summary["coverage"] <= 1.0
    assert 0.0 <= summary["variance_fraction"] <= 1.0
    assert 0.0 <= summary["mean_fraction"] <= 1.0
    assert summary["rho"] == 1.0
    assert summary["correlation_same"] == pytest.approx(1.0)
    assert abs(summary["correlation_iid"]) < 0.1


def test__run_noise_stats__closed_form_error(noise_report):
    assert noise_report.closed_form_error == closed_form_error(noise_report.moments)
    assert noise_report.closed_form_error >= 0.0
    assert closed_form_error(noise_report.moments, threshold=np.inf) == 0.0


def test__pixel_rows(noise_report):
    rows = pixel_rows(noise_report.moments)
    assert len(rows) == 144
    assert list(rows[0]) == PIXEL_COLUMNS
    assert (rows[13]["row"], rows[13]["column"]) == (1, 1)
    assert sum(row["covered"] for row in rows) == noise_report.moments.mask.sum()


@pytest.mark.slow
def test__run_noise_stats__standardization_at_full_resolution():
    report = run_noise_stats(NoiseStatsConfig(), NoiseConfig(), RenderSettings(), seed=0)
    assert report.coverage > 0.5
    assert report.variance_fraction >= 0.99
    assert report.mean_fraction >= 0.99
    assert report.correlation_same == pytest.approx(1.0)
    assert abs(report.correlation_iid) < 0.05
    assert report.correlation_pair > max(report.correlation_iid, 0.1)


# -------- view consistency


def test__consistency_report__pairs_neighbouring_poses(cloud):
    config = ConsistencyConfig(poses=6, width=12, height=12)
    report = consistency_report(cloud, config, RenderSettings())
    assert report.errors.shape == (6,)
    assert report.mean > 0.0
    assert report.variance >= 0.0
    rows = report.rows()
    assert [(row["first"], row["second"]) for row in rows][-1] == (5, 0)
    assert rows[2]["error"] == report.errors[2]


def test__consistency_report__empty_scene_is_consistent():
    config = ConsistencyConfig(poses=3, width=4, height=4)
    report = consistency_report(GaussianCloud.empty(), config, RenderSettings())
    assert report.mean == 0.0


def test__consistency_report__centred_isotropic_gaussian(single):
    config = ConsistencyConfig(poses=8, width=16, height=16)
    report = consistency_report(single, config, RenderSettings())
    assert report.variance < 1e-8
    assert report.mean < 1e-8


def test__ConsistencyReport__negative_errors():
    with pytest.raises(ValueError):
        ConsistencyReport(
            poses=2, elevation=0.0, radius=1.0, pairing="", errors=np.array([-1.0, 0.0])
        )


# -------- training runs


def test__setup_training__identity(small):
    state, heldout = setup_training(small)
    assert isinstance(state.provider, IdentityDenoiser)
    assert len(state.cloud) == 64
    assert len(state.field) == 256
    assert heldout == []
    assert state.step == 0


def test__setup_training__constant_provider_without_noise():
    run = RunConfig.from_values(
        SMALL | {"guide.provider": "constant", "guide.constant_value": 0.2, "noise.enabled": False}
    )
    state, _ = setup_training(run)
    assert isinstance(state.provider, ConstantDenoiser)
    assert state.field is None


def test__setup_training__synthetic_targets():
    run = RunConfig.from_values(
        SMALL | {"targets.synthetic": True, "targets.views": 3, "targets.heldout_views": 2}
    )
    state, heldout = setup_training(run)
    assert isinstance(state.provider, TargetViewDenoiser)
    assert len(state.provider.cameras) == 3
    assert len(heldout) == 2
    assert heldout[0][1].shape == (8, 8, 3)


def test__setup_training__targets_needed():
    with pytest.raises(ConfigError, match="target views"):
        setup_training(RunConfig.from_values(SMALL))
    with pytest.raises(ConfigError, match="target views"):
        setup_training(
            RunConfig.from_values(SMALL | {"guide.provider": "identity", "camera.mode": "targets"})
        )


def test__setup_training__missing_manifest(tmp_path):
    run = RunConfig.from_values(SMALL | {"targets.manifest": str(tmp_path / "missing.txt")})
    with pytest.raises(ConfigError, match="not found"):
        setup_training(run)


def test__training_rng__seeded():
    assert training_rng(3).integers(2**32) == training_rng(3).integers(2**32)
    assert training_rng(3).integers(2**32) != training_rng(4).integers(2**32)


def test__run_training(small, tmp_path):
    state, rows = run_training(small, out_dir=tmp_path)
    assert state.step == 3
    assert len(rows) == 3
    assert (tmp_path / "final.ply").exists()


# -------- ablation


def test__cell_name():
    assert [cell_name(*cell) for cell in ABLATION_CELLS] == [
        "noise-on_vgs-on",
        "noise-off_vgs-on",
        "noise-on_vgs-off",
        "noise-off_vgs-off",
    ]


def test__cell_config(small):
    config = cell_config(small, False, True)
    assert not config.noise.enabled
    assert config.vgs.enabled
    assert config.seed == small.seed
    assert config.trainer == small.trainer


def test__ablation__both_off_is_zero_mixing_and_zero_jitter():
    run = RunConfig.from_values(SMALL | {"guide.provider": "constant", "guide.constant_value": 0.8})
    off, _ = run_training(cell_config(run, False, False))
    zero, _ = run_training(
        run.with_values({"noise.rho_start": 0.0, "noise.rho_end": 0.0, "vgs.gamma": 0.0})
    )
    for name in off.cloud.PARAMETERS:
        assert np.array_equal(getattr(off.cloud, name), getattr(zero.cloud, name))


def test__run_cell__writes_its_directory(small, tmp_path):
    row = run_cell(small, True, False, out_dir=tmp_path)
    assert list(row) == ABLATION_COLUMNS
    assert row["cell"] == "noise-on_vgs-off"
    assert row["steps"] == 3
    assert row["heldout_error"] is None
    cell_dir = tmp_path / "noise-on_vgs-off"
    assert (cell_dir / RESOLVED_FILE).exists()
    assert (cell_dir / "final.ply").exists()
    assert not RunConfig.load(cell_dir / RESOLVED_FILE).vgs.enabled


def test__run_cell__consistency_matches_the_saved_cloud(small, tmp_path):
    moving = small.with_values({"guide.provider": "constant", "guide.constant_value": 0.8})
    row = run_cell(moving, False, True, out_dir=tmp_path)
    saved = load_cloud(tmp_path / "noise-off_vgs-on" / "final.ply")
    report = consistency_report(saved, moving.evaluation, moving.render)
    assert row["consistency_mean"] == report.mean
    assert row["consistency_variance"] == report.variance


def test__run_ablation__cell_order(small):
    rows = run_ablation(small)
    assert [row["cell"] for row in rows] == [cell_name(*cell) for cell in ABLATION_CELLS]
    # the identity provider leaves every cell at its starting point
    assert len({row["consistency_mean"] for row in rows}) == 1
