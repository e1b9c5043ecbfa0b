import pytest

from core.config import ExperimentConfig, load_experiment_config, parse_config_file, require_paths
from core.errors import ConfigError


class TestExperimentConfig:
    def test_defaults(self):
        config = load_experiment_config()
        assert config.token_list == ["sil", "a", "b", "c", "d", "e"]
        adapt = config.adapt_config()
        assert (adapt.epochs, adapt.learning_rate, adapt.mc_samples, adapt.selection_rate) == (7, 0.1, 1, 0.8)
        assert (adapt.objective.gamma1, adapt.objective.gamma2) == (0.0, 0.1)
        assert adapt.objective.gamma3 == pytest.approx(0.1)
        assert adapt.hooked_layers is None
        assert config.train_config().sat_layers == [0]

    def test_corpus_spec_respects_topology(self):
        config = ExperimentConfig(states_per_unit=3, min_duration=1, max_duration=2)
        spec = config.corpus_spec("test")
        assert spec.min_duration == 3 and spec.max_duration == 3
        assert spec.silence_frames == (3, 5)
        assert spec.n_speakers == config.test_speakers

    def test_paths(self, tmp_path):
        config = ExperimentConfig(work_dir=str(tmp_path))
        assert config.paths["model"] == tmp_path / "model"
        assert config.paths["corpus_test"] == tmp_path / "corpus" / "test"


class TestLoadExperimentConfig:
    def test_file_values(self, tiny_config_file):
        config = load_experiment_config(tiny_config_file)
        assert config.token_list == ["sil", "a", "b", "c"]
        assert config.hidden_width == 8
        assert config.sweep_list == [1, 2]

    def test_flag_overrides_file(self, tiny_config_file):
        assert load_experiment_config(tiny_config_file, {"seed": 99, "beam": None}).seed == 99

    def test_environment_below_file(self, tiny_config_file, monkeypatch):
        monkeypatch.setenv("LFMMI_SEED", "7")
        monkeypatch.setenv("LFMMI_HIDDEN_LAYERS", "2")
        config = load_experiment_config(tiny_config_file)
        assert config.seed == 3
        assert load_experiment_config().hidden_layers == 2

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("seed = 1\nlearning_rat = 0.1\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            load_experiment_config(path)
        assert info.value.fields == ["learning_rat"]
        assert info.value.exit_code == 2

    def test_every_violation_listed(self):
        with pytest.raises(ConfigError) as info:
            load_experiment_config(overrides={"seed": "abc", "method": "nope", "hidden_width": "x"})
        assert {"seed", "method", "hidden_width"} <= set(info.value.fields)

    def test_range_violations(self):
        with pytest.raises(ConfigError) as info:
            load_experiment_config(overrides={"selection_rate": 1.5, "mc_samples": 0})
        assert {"selection_rate", "mc_samples"} <= set(info.value.fields)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.conf")


class TestParseConfigFile:
    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "c.conf"
        path.write_text("# header\n\nseed = 4  # trailing\ntokens=sil,x\n", encoding="utf-8")
        assert parse_config_file(path) == {"seed": "4", "tokens": "sil,x"}

    def test_malformed_lines(self, tmp_path):
        path = tmp_path / "c.conf"
        path.write_text("seed 4\n= 3\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            parse_config_file(path)
        assert len(info.value.fields) == 2


def test_require_paths(tmp_path):
    require_paths(tmp_path)
    with pytest.raises(ConfigError) as info:
        require_paths(tmp_path, tmp_path / "missing")
    assert info.value.fields == [str(tmp_path / "missing")]
