import pathlib

import pytest
import yaml

from gsplat_distill.config import (
    RESOLVED_FILE,
    ConfigError,
    RunConfig,
    flatten,
    parse_override,
)
from gsplat_distill.scene import CameraSampling, RenderSettings

DEMO = pathlib.Path(__file__).parent.parent / "demo"


def test__RunConfig__defaults():
    run = RunConfig()
    assert run.seed == 0
    assert run.trainer.total_steps == 2000
    assert run.noise.count == 16384
    assert run.camera == CameraSampling()


def test__flatten():
    assert flatten({"trainer": {"total_steps": 5}, "seed": 1}) == {
        "trainer.total_steps": 5,
        "seed": 1,
    }


def test__RunConfig__flat_and_nested_keys_agree(tmp_path):
    flat = tmp_path / "flat.yml"
    nested = tmp_path / "nested.yml"
    flat.write_text("trainer.total_steps: 500\nvgs.gamma: 0.2\n")
    nested.write_text("trainer:\n  total_steps: 500\nvgs:\n  gamma: 0.2\n")
    assert RunConfig.load(flat) == RunConfig.load(nested)
    assert RunConfig.load(flat).trainer.total_steps == 500


def test__RunConfig__empty_file(tmp_path):
    path = tmp_path / "empty.yml"
    path.write_text("")
    assert RunConfig.load(path) == RunConfig()


@pytest.mark.parametrize(
    "text,expected",
    [
        ("trainer.total_steps=500", ("trainer.total_steps", 500)),
        ("vgs.gamma=0.25", ("vgs.gamma", 0.25)),
        ("noise.enabled=false", ("noise.enabled", False)),
        ("render.background=[0, 0, 0]", ("render.background", [0, 0, 0])),
        ("targets.manifest=views/manifest.txt", ("targets.manifest", "views/manifest.txt")),
        ("targets.manifest=", ("targets.manifest", None)),
    ],
)
def test__parse_override(text, expected):
    assert parse_override(text) == expected


@pytest.mark.parametrize("text", ["trainer.total_steps", "=3", "vgs.gamma=[1"])
def test__parse_override__invalid(text):
    with pytest.raises(ConfigError):
        parse_override(text)


def test__RunConfig__overrides_win_over_the_file(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text("seed: 3\ntrainer.total_steps: 500\n")
    run = RunConfig.load(path, ["trainer.total_steps=20", "render.background=[0, 0, 0]"])
    assert run.seed == 3
    assert run.trainer.total_steps == 20
    assert run.render.background == (0.0, 0.0, 0.0)
    assert RunConfig.load(path, seed=9).seed == 9


@pytest.mark.parametrize(
    "values",
    [
        {"trainer.total_step": 5},
        {"optimizer.lr": 0.1},
        {"trainer.camera": {}},
    ],
)
def test__RunConfig__unknown_keys(values):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_values(values)


@pytest.mark.parametrize(
    "values",
    [
        {"trainer.total_steps": "many"},
        {"trainer.total_steps": 2.5},
        {"trainer.total_steps": True},
        {"noise.enabled": 1},
        {"vgs.gamma": "0.1"},
        {"render.background": [1.0, 1.0]},
        {"seed": "zero"},
    ],
)
def test__RunConfig__bad_types(values):
    with pytest.raises(ConfigError):
        RunConfig.from_values(values)


def test__RunConfig__integers_are_accepted_for_floats():
    run = RunConfig.from_values({"vgs.gamma": 1, "render.background": [0, 1, 0]})
    assert run.vgs.gamma == 1.0 and isinstance(run.vgs.gamma, float)
    assert run.render.background == (0.0, 1.0, 0.0)


def test__RunConfig__optional_integer():
    assert RunConfig().trainer.densify_until is None
    assert RunConfig.from_values({"trainer.densify_until": 1500}).trainer.last_densify_step == 1500


def test__RunConfig__invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="tile_size"):
        RunConfig.from_values({"render.tile_size": 0})
    # still a ValueError for callers that only know about those
    with pytest.raises(ValueError):
        RunConfig.from_values({"noise.rho_start": 2.0})


def test__RunConfig__top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / "list.yml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.load(path)


def test__RunConfig__broken_yaml(tmp_path):
    path = tmp_path / "broken.yml"
    path.write_text("trainer: [1\n")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test__RunConfig__resolved_file_reloads_to_the_same_config(tmp_path):
    run = RunConfig.from_values(
        {"seed": 4, "render.background": [0.1, 0.2, 0.3], "targets.synthetic": True}
    )
    path = run.write_resolved(tmp_path / "out")
    assert path == tmp_path / "out" / RESOLVED_FILE
    flat = yaml.safe_load(path.read_text())
    assert flat["seed"] == 4
    assert flat["render.background"] == [0.1, 0.2, 0.3]
    assert flat["trainer.densify_until"] is None
    assert RunConfig.load(path) == run


def test__RunConfig__with_values():
    run = RunConfig.from_values({"seed": 2, "vgs.gamma": 0.3})
    other = run.with_values({"vgs.enabled": False})
    assert other.seed == 2
    assert other.vgs.gamma == 0.3
    assert not other.vgs.enabled
    assert run.vgs.enabled


def test__RunConfig__training_plugs_in_the_sections():
    run = RunConfig.from_values(
        {"camera.width": 32, "render.tile_size": 8, "vgs.gamma": 0.2, "noise.rho_end": 0.1}
    )
    training = run.training
    assert training.camera.width == 32
    assert training.render == RenderSettings(tile_size=8)
    assert training.vgs.gamma == 0.2
    assert training.noise.rho_end == 0.1
    assert training.guide == run.guide
    assert training.total_steps == run.trainer.total_steps


@pytest.mark.parametrize("name", ["identity.yml", "noise_stats.yml", "reconstruction.yml"])
def test__RunConfig__demo_files_load(name):
    run = RunConfig.load(DEMO / name)
    assert isinstance(run, RunConfig)


def test__RunConfig__reconstruction_demo():
    run = RunConfig.load(DEMO / "reconstruction.yml")
    assert run.seed == 7
    assert run.camera.mode == "targets"
    assert run.targets.synthetic
    assert run.vgs.gamma == 0.15
