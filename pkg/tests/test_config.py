import json

import pytest

from config import (RunConfig, apply_overrides, config_from_dict, load_config, save_config, with_model,
                    with_train)
from model.errors import ArityMismatch, ConfigError, IoFailure


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg.model.K == 2
        assert cfg.loss.margin == 0.2
        assert cfg.train.effective_decay_epoch == cfg.train.epochs // 2

    def test_save_then_load(self, tmp_path):
        cfg = with_train(RunConfig(), epochs=12, seed=9)
        save_config(cfg, tmp_path / "run.json")
        assert load_config(tmp_path / "run.json") == cfg

    def test_partial_file_keeps_other_defaults(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"epochs": 4}}))
        cfg = load_config(path)
        assert cfg.train.epochs == 4
        assert cfg.train.batch_size == RunConfig().train.batch_size

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize("raw", [{"colour": 1}, {"model": {"depth": 2}}])
    def test_unknown_keys(self, raw):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict(raw)


class TestValidate:
    def test_k_three_is_arity_error(self):
        with pytest.raises(ArityMismatch):
            with_model(RunConfig(), K=3).validate()

    def test_jsr_needs_both_paths(self):
        with pytest.raises(ConfigError):
            with_model(RunConfig(), use_global_path=False).validate()

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            with_model(RunConfig(), embed_dim=10, heads=4).validate()

    @pytest.mark.parametrize("changes", [
        dict(batch_size=1),
        dict(learning_rate=-0.1),
        dict(decay_epoch=0),
        dict(warmup_fraction=1.0),
    ])
    def test_bad_training_settings(self, changes):
        with pytest.raises(ConfigError):
            with_train(RunConfig(), **changes).validate()


class TestOverrides:
    def test_dotted_keys(self):
        cfg = apply_overrides(RunConfig(), {"train.seed": 3, "model.K": 4, "dataset": "data"})
        assert (cfg.train.seed, cfg.model.K, cfg.dataset) == (3, 4, "data")

    def test_none_leaves_value(self):
        assert apply_overrides(RunConfig(), {"train.seed": None}).train.seed == RunConfig().train.seed

    def test_unknown_dotted_key(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"train.sed": 3})

    def test_override_is_validated(self):
        with pytest.raises(ArityMismatch):
            apply_overrides(RunConfig(), {"model.K": 3})
