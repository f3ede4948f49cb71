"""Tests for configuration loading, validation and the logging setup."""

import json
import logging

import pytest

from binorm.config import (
    MODEL_PRESETS,
    TRAIN_PRESETS,
    ModelConfig,
    RunConfig,
    TrainConfig,
    default_threads,
    load_model_config,
    load_train_config,
    save_model_config,
    save_train_config,
)
from binorm.errors import ConfigurationError
from binorm.log import resolve_level, setup_logging


class TestModelConfig:
    @pytest.mark.parametrize("name", sorted(MODEL_PRESETS))
    def test_presets_validate(self, name):
        assert load_model_config(name).kind in ("bcvnn", "blm")

    def test_preset_is_a_copy(self):
        config = load_model_config("tiny-bcvnn")
        config.channels[0] = 99
        assert load_model_config("tiny-bcvnn").channels[0] == 4

    def test_feed_forward_width(self):
        assert ModelConfig(kind="blm", emb_dim=64).ff_units == 128
        assert ModelConfig(kind="blm", emb_dim=64, ff_dim=100).ff_units == 100

    def test_json_roundtrip(self, tmp_path):
        config = load_model_config("tiny-blm")
        save_model_config(config, tmp_path / "m.json")
        assert load_model_config(tmp_path / "m.json") == config

    def test_partial_document_uses_defaults(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"kind": "blm", "emb_dim": 32, "num_heads": 4}))
        config = load_model_config(path)
        assert config.num_blocks == 12 and config.emb_dim == 32

    @pytest.mark.parametrize(
        "doc, message",
        [
            ({"kind": "rnn"}, "Unknown model kind"),
            ({"kind": "bcvnn", "filter_size": 4}, "odd"),
            ({"kind": "bcvnn", "channels": [8, 8]}, "channels"),
            ({"kind": "bcvnn", "num_classes": 1}, "num_classes"),
            ({"kind": "bcvnn", "image_size": 20}, "divisible by 16"),
            ({"kind": "blm", "emb_dim": 30, "num_heads": 4}, "divisible"),
            ({"kind": "blm", "width": 3}, "unknown keys width"),
        ],
    )
    def test_invalid_documents(self, tmp_path, doc, message):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigurationError, match=message):
            load_model_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{kind: blm")
        with pytest.raises(ConfigurationError, match="invalid JSON"):
            load_model_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            load_model_config(tmp_path / "none.json")


class TestTrainConfig:
    def test_presets_follow_training_protocols(self):
        bcvnn, blm = TRAIN_PRESETS["bcvnn"], TRAIN_PRESETS["blm"]
        assert (bcvnn.optimizer, bcvnn.max_lr, bcvnn.warmup_steps, bcvnn.decay_steps) == ("adam", 1e-4, 20, 1100)
        assert (blm.optimizer, blm.max_lr, blm.batch_size) == ("adamw", 1e-5, 64)

    def test_schedule_floor_defaults_to_hundredth(self):
        assert TrainConfig(max_lr=1e-3).schedule().floor == pytest.approx(1e-5)
        assert TrainConfig(floor_lr=0.0).schedule().floor == 0.0

    def test_roundtrip(self, tmp_path):
        config = TrainConfig(epochs=3, optimizer="adamw")
        save_train_config(config, tmp_path / "t.json")
        assert load_train_config(tmp_path / "t.json") == config

    @pytest.mark.parametrize(
        "overrides",
        [{"optimizer": "sgd"}, {"epochs": -1}, {"batch_size": 0}, {"train_fraction": 0.0}, {"decay_steps": 0}, {"warmup_steps": -1}],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides).validate()


class TestRunConfig:
    def test_train_needs_seed(self):
        with pytest.raises(ConfigurationError, match="--seed"):
            RunConfig(command="train", model_config="tiny-blm").validate()

    def test_paths_checked_before_work(self, tmp_path):
        with pytest.raises(ConfigurationError, match="Data file"):
            RunConfig(command="eval", data=str(tmp_path / "none.bnd")).validate()
        with pytest.raises(ConfigurationError, match="Config file"):
            RunConfig(command="count-params", model_config=str(tmp_path / "none.json")).validate()

    def test_out_dir_must_be_directory(self, tmp_path):
        target = tmp_path / "file"
        target.write_text("")
        with pytest.raises(ConfigurationError, match="not a directory"):
            RunConfig(command="train", seed=0, out_dir=target).validate()

    def test_synthetic_data_is_not_a_path(self):
        RunConfig(command="train", seed=1, data="synthetic:tokens").validate()


class TestEnvironment:
    def test_threads(self, monkeypatch):
        monkeypatch.delenv("BINORM_THREADS", raising=False)
        assert default_threads() == 1
        monkeypatch.setenv("BINORM_THREADS", "4")
        assert default_threads() == 4
        monkeypatch.setenv("BINORM_THREADS", "0")
        assert default_threads() == 1
        monkeypatch.setenv("BINORM_THREADS", "many")
        with pytest.raises(ConfigurationError):
            default_threads()

    def test_log_levels(self, monkeypatch):
        monkeypatch.setenv("BINORM_LOG", "DEBUG")
        assert resolve_level() == logging.DEBUG
        assert resolve_level("error") == logging.ERROR
        monkeypatch.delenv("BINORM_LOG")
        assert resolve_level() == logging.INFO
        with pytest.raises(ConfigurationError, match="BINORM_LOG"):
            resolve_level("verbose")

    def test_setup_logging(self):
        setup_logging("error")
        assert logging.getLogger("binorm.train").getEffectiveLevel() == logging.ERROR
