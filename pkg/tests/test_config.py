import json

import pytest
import yaml

from zonetrain.config import ConfigError, RunConfig
from zonetrain.desk import DESK


def test_defaults_follow_paper_profile():
    cfg = RunConfig()
    hp = cfg.with_overrides(n_train_images=25).resolved_hyperparams()
    assert (hp.epochs, hp.learning_rate) == (2000, 5e-6)
    assert cfg.patch_grid().patch_shape == (200, 26)
    assert cfg.network_config().width_scale == 1.0


def test_desk_profile():
    cfg = RunConfig(profile="desk")
    assert cfg.frame_geometry() == DESK.geometry
    assert cfg.network_config() == DESK.network()
    assert cfg.network_config().init_scheme == "he"
    assert RunConfig().network_config().init_scheme == "alexnet"
    assert cfg.resolved_hyperparams().epochs == 150
    assert cfg.with_overrides(strategy="depth_aware").network_config().input_channels == 2


def test_yaml_and_json_load(tmp_path):
    raw = {"profile": "desk", "n_train_images": 25, "zones": [{"name": "deep", "center_cm": 2.6, "width": 3}],
           "hyperparams": {"epochs": 5}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(raw))
    (tmp_path / "c.json").write_text(json.dumps(raw))
    a, b = RunConfig.load(tmp_path / "c.yaml"), RunConfig.load(tmp_path / "c.json")
    assert a == b
    assert a.zone_specs()[0].name == "deep"
    assert a.resolved_hyperparams().epochs == 5 and a.resolved_hyperparams().learning_rate == 3e-4


def test_overrides_take_precedence():
    cfg = RunConfig(hyperparams={"epochs": 5}).with_overrides(**{"hyperparams.epochs": 9, "seed": None})
    assert cfg.hyperparams["epochs"] == 9 and cfg.seed == 0


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"profile": "gpu"},
    {"strategy": "mixed"},
    {"n_repetitions": 0},
    {"n_train_images": 37},
    {"grid": {"axial_skip_px": 1900}},
    {"network": {"depth": 3}},
    {"zones": [{"name": "a", "lines": [0, 2]}]},
    {"zones": [{"name": "a", "lines": [0]}, {"name": "a", "lines": [1]}]},
    {"data": {"source": "container", "path": "/nonexistent/frames.ztrf"}},
    {"data": {"source": "synthetic", "frames_per_class": 2}},
])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(raw)
