"""Tests for settings module."""

import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest

from normlab.config.settings import (
    SEED_ENV,
    Settings,
    load_experiment_config,
    parse_experiment_config,
    render_experiment_config,
    write_experiment_config,
)
from normlab.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[2] / "configs"

BASIC = """
[run]
seed = 7
epochs = 3
batch_size = 16
precision = half-wide

[data]
samples = 64
features = 4

[model]
input_shape = 4
num_classes = 3
layer.0.out_features = 8
layer.0.norm = topk
layer.0.norm.k = 4
layer.1.out_features = 5
layer.1.weight_mode = bwn
layer.1.weight_p = inf

[optimizer]
eta = 0.05
weight_decay = 0.0005   # lambda
schedule = 100:0.1, 200:0.5
"""


def test_parse_basic_config():
    config = parse_experiment_config(BASIC, env={})
    assert config.seed == 7
    assert config.epochs == 3
    assert config.precision == "half-wide"
    assert config.model.input_shape == (4,)
    assert config.data.features == 4


def test_layers_and_norm_options():
    layers = parse_experiment_config(BASIC, env={}).model.layers
    assert layers[0].out_features == 8
    assert layers[0].norm.metric == "topk"
    assert layers[0].norm.k == 4
    assert layers[1].norm is None
    assert layers[1].weight_mode == "bwn"
    assert layers[1].weight_p == float("inf")


def test_norm_axis_parses_from_text():
    text = "[model]\ninput_shape = 4\nlayer.0.out_features = 3\nlayer.0.norm = l1\nlayer.0.norm.axis = 1\n"
    norm = parse_experiment_config(text, env={}).model.layers[0].norm
    assert norm.axis == 1
    assert norm.metric == "l1"


def test_layer_norm_config_round_trips():
    text = BASIC.replace("layer.0.norm.k = 4", "layer.0.norm.k = 4\nlayer.0.norm.axis = 1")
    config = parse_experiment_config(text, env={})
    assert config.model.layers[0].norm.axis == 1
    assert parse_experiment_config(render_experiment_config(config), env={}) == config


def test_projection_flag():
    text = "[optimizer]\nproject_after_step = true\n"
    assert parse_experiment_config(text, env={}).optimizer.project_after_step
    assert not parse_experiment_config("[model]\ninput_shape = 2\n", env={}).optimizer.project_after_step


def test_schedule_and_inline_comment():
    opt = parse_experiment_config(BASIC, env={}).optimizer
    assert opt.weight_decay == 0.0005
    assert [(e.step, e.multiplier) for e in opt.schedule] == [(100, 0.1), (200, 0.5)]


def test_defaults_for_missing_sections():
    config = parse_experiment_config("[model]\ninput_shape = 2\n", env={})
    assert config.optimizer.eta == 0.1
    assert config.data.format == "synthetic"
    assert config.model.layers == []


class TestRejected:
    @pytest.mark.parametrize(
        "text,fragment",
        [
            ("[training]\nepochs = 1\n", "unknown section"),
            ("[run]\nepoch = 1\n", "unknown key 'epoch'"),
            ("[model]\nlayer.0.width = 3\n", "unknown key"),
            ("[model]\nlayer.1.out_features = 3\n", "without gaps"),
            ("[model]\nlayer.0.out_features = 3\nlayer.0.norm.k = 2\n", "norm options"),
            ("[model]\ninput_shape = 1, x\n", "comma-separated"),
            ("[optimizer]\nschedule = 100\n", "step:multiplier"),
            ("[run]\nbatch_size = 1\n", "batch_size"),
            ("[run]\nprecision = bf16\n", "invalid config"),
            ("[run]\nmc_trials = 10\n", "mc_trials"),
            ("[data]\nformat = csv\n", "requires a path"),
            ("[model]\nlayer.0.out_features = 3\nlayer.0.norm = topk\n", "requires k"),
            ("[model]\nlayer.0.out_features = 3\nlayer.0.norm = l1\nlayer.0.norm.axis = 2\n", "axis must be 0 or 1"),
            ("no section header\n", "syntax"),
        ],
    )
    def test_invalid(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            parse_experiment_config(text, env={})


class TestSeedOverride:
    def test_env_mapping(self):
        assert parse_experiment_config(BASIC, env={SEED_ENV: "99"}).seed == 99

    def test_process_environment(self):
        with patch.dict(os.environ, {SEED_ENV: "123"}):
            assert parse_experiment_config(BASIC).seed == 123

    def test_blank_value_is_ignored(self):
        assert parse_experiment_config(BASIC, env={SEED_ENV: " "}).seed == 7

    def test_bad_seed(self):
        with pytest.raises(ConfigError, match=SEED_ENV):
            parse_experiment_config(BASIC, env={SEED_ENV: "-4"})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[data]\nformat = csv\npath = data/train.csv\n\n[optimizer]\ntrajectory = /abs/traj.csv\n")
    config = load_experiment_config(path, env={})
    assert config.data.path == tmp_path.resolve() / "data" / "train.csv"
    assert config.optimizer.trajectory == Path("/abs/traj.csv")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_experiment_config(tmp_path / "absent.ini")


def test_render_parses_back(tmp_path):
    config = parse_experiment_config(BASIC, env={})
    assert parse_experiment_config(render_experiment_config(config), env={}) == config
    path = write_experiment_config(config, tmp_path / "config.ini")
    assert load_experiment_config(path, env={}) == config


@pytest.mark.parametrize("name", ["desk-mlp.ini", "desk-cnn.ini", "idx-digits.ini"])
def test_sample_configs_parse(name):
    config = load_experiment_config(CONFIGS / name, env={})
    assert config.model.layers


def test_idx_sample_paths_are_relative_to_file():
    config = load_experiment_config(CONFIGS / "idx-digits.ini", env={})
    assert config.data.path == CONFIGS / "data" / "train-images-idx3-ubyte"
    assert config.data.scale == pytest.approx(1 / 255)


class TestSettings:
    def test_defaults_when_missing(self, tmp_path):
        settings = Settings.load(tmp_path / "absent.json")
        assert settings.log_level == "INFO"
        assert settings.workers == 1

    def test_save_and_load(self, tmp_path):
        path = tmp_path / "settings.json"
        Settings(log_level="DEBUG", workers=4, mc_trials=5000).save(path)
        loaded = Settings.load(path)
        assert loaded.log_level == "DEBUG"
        assert loaded.workers == 4
        assert loaded.mc_trials == 5000

    def test_unknown_keys_and_bad_workers(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text(json.dumps({"workers": 0, "theme": "dark"}))
        settings = Settings.load(path)
        assert settings.workers == 1
        assert not hasattr(settings, "theme")

    def test_unreadable_file_gives_defaults(self, tmp_path):
        path = tmp_path / "settings.json"
        path.write_text("{not json")
        assert Settings.load(path).mc_seed == Settings().mc_seed

    def test_saved_file_has_no_lock(self, tmp_path):
        path = Settings().save(tmp_path / "s.json")
        assert "_lock" not in json.loads(path.read_text())
