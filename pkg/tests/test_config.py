import pytest

from mglab.config import (
    Config,
    ConfigError,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    env_overrides,
    load_config,
    save_config,
)


class TestRoundTrip:
    def test_default_round_trip(self, tmp_path):
        cfg = Config()
        path = tmp_path / "config.yaml"
        save_config(cfg, path)
        loaded = load_config(path, use_env=False)
        assert config_to_dict(loaded) == config_to_dict(cfg)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        cfg = load_config(path, use_env=False)
        assert cfg.generator.grid == 64
        assert cfg.frame.cell_size == 0.005


class TestValidation:
    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config_from_dict({"nonsense": {}})

    def test_unknown_field_named_in_error(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"train": {"lrx": 1}})
        assert "train.lrx" in str(exc.value)

    def test_bad_velocity_range(self):
        with pytest.raises(ConfigError):
            config_from_dict({"train": {"v_train_range": [0.01, 0.2]}})

    def test_scene_must_fit_frame(self):
        with pytest.raises(ConfigError):
            config_from_dict({"scene": {"x_range": [-5, 5]}})

    def test_grid_consistency(self):
        with pytest.raises(ConfigError):
            config_from_dict({"generator": {"grid": 32}})


class TestOverrides:
    def test_dotted_override_parses_yaml_scalars(self):
        data = apply_overrides({}, {"train.lr": "0.01", "generator.rotations": "16"})
        assert data["train"]["lr"] == 0.01
        assert data["generator"]["rotations"] == 16

    def test_env_collection(self):
        env = {"MGLAB_TRAIN__LR": "0.5", "OTHER": "x", "MGLAB_EVAL__TRIALS_PER_VELOCITY": "7"}
        got = env_overrides(env)
        assert got == {"train.lr": "0.5", "eval.trials_per_velocity": "7"}

    def test_bad_override_path(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, {"lr": "0.1"})

    def test_tuple_fields_from_lists(self):
        cfg = config_from_dict({"train": {"v_train_range": [0.12, 0.18]}})
        assert cfg.train.v_train_range == (0.12, 0.18)
