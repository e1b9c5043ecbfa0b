import json

import pytest
from typer.testing import CliRunner

from cli.commands import app


@pytest.fixture
def runner():
    try:
        return CliRunner(mix_stderr=False)
    except TypeError:  # click >= 8.2 always keeps stderr separate
        return CliRunner()


def _invoke(runner, *args):
    return runner.invoke(app, [str(a) for a in args])


def _error(result):
    return json.loads(result.stderr.strip().splitlines()[-1])


class TestPipeline:
    def test_train_adapt_decode_score(self, runner, tiny_config_file, tmp_path):
        work = tmp_path / "work"
        conf = ("--config", tiny_config_file)

        result = _invoke(runner, "corpus", *conf)
        assert result.exit_code == 0, result.stderr
        assert (work / "corpus" / "train" / "feats.lfx").exists()
        assert (work / "corpus" / "test" / "manifest.tsv").exists()

        result = _invoke(runner, "train", *conf)
        assert result.exit_code == 0, result.stderr
        for name in ("net.lfn", "lm.json", "den.lfg", "decode.lfg", "model.json"):
            assert (work / "model" / "si" / name).exists()

        assert _invoke(runner, "decode", *conf).exit_code == 0
        baseline = (work / "decode" / "si.hyp").read_text(encoding="utf-8")
        assert len(baseline.splitlines()) == 6

        result = _invoke(runner, "adapt", *conf, "--method", "blhuc", "--epochs", "0", "--name", "idle")
        assert result.exit_code == 0, result.stderr
        assert len(list((work / "adapters" / "idle").glob("*.lfa"))) == 2
        assert _invoke(runner, "decode", *conf, "--adapters", "idle").exit_code == 0
        assert (work / "decode" / "idle.hyp").read_text(encoding="utf-8") == baseline

        result = _invoke(runner, "adapt", *conf, "--method", "lhuc", "--criterion", "mmi+ce",
                         "--select-rate", "0.8", "--name", "lhuc")
        assert result.exit_code == 0, result.stderr
        assert _invoke(runner, "decode", *conf, "--adapters", "lhuc").exit_code == 0

        assert _invoke(runner, "score", work / "decode" / "si.hyp", *conf, "--condition", "SI").exit_code == 0
        result = _invoke(runner, "score", work / "decode" / "lhuc.hyp", *conf, "--baseline", "SI")
        assert result.exit_code == 0, result.stderr
        metrics = json.loads((work / "reports" / "metrics.json").read_text(encoding="utf-8"))
        assert [c["condition"] for c in metrics["conditions"]] == ["SI", "lhuc"]
        assert metrics["baseline"] == "SI"

        result = _invoke(runner, "report", *conf, "--formats", "csv,plotdata")
        assert result.exit_code == 0, result.stderr
        assert (work / "reports" / "metrics.csv").exists()

        result = _invoke(runner, "inspect", "graph", work / "model" / "si" / "den.lfg")
        assert result.exit_code == 0
        assert result.stdout.startswith("# states=")
        result = _invoke(runner, "inspect", "adapter", work / "adapters" / "idle" / "test-spk000.lfa")
        assert "mode=bayesian" in result.stdout


class TestErrors:
    def test_unknown_config_key(self, runner, tmp_path):
        path = tmp_path / "bad.conf"
        path.write_text("seeed = 1\n", encoding="utf-8")
        result = _invoke(runner, "corpus", "--config", path)
        assert result.exit_code == 2
        body = _error(result)
        assert body["error"] == "ConfigError"
        assert body["fields"] == ["seeed"]

    def test_invalid_values_listed(self, runner, tiny_config_file):
        result = _invoke(runner, "adapt", "--config", tiny_config_file, "--method", "magic", "--select-rate", "2")
        assert result.exit_code == 2
        assert {"method", "selection_rate"} <= set(_error(result)["fields"])

    def test_missing_model(self, runner, tiny_config_file):
        result = _invoke(runner, "decode", "--config", tiny_config_file)
        assert result.exit_code == 2
        assert _error(result)["error"] == "ConfigError"

    def test_unknown_split(self, runner, tiny_config_file):
        result = _invoke(runner, "corpus", "--config", tiny_config_file, "--split", "dev")
        assert result.exit_code == 2
        assert _error(result)["error"] == "InvalidArgumentError"

    def test_corrupt_archive(self, runner, tiny_config_file, tmp_path):
        assert _invoke(runner, "corpus", "--config", tiny_config_file).exit_code == 0
        archive = tmp_path / "work" / "corpus" / "train" / "feats.lfx"
        archive.write_bytes(archive.read_bytes()[:-20])
        result = _invoke(runner, "train", "--config", tiny_config_file)
        assert result.exit_code == 3
        assert _error(result)["error"] == "CorruptArchiveError"


class TestExperiment:
    def test_reproducible_report(self, runner, tiny_config_file, tmp_path):
        reports = []
        for run in ("one", "two"):
            work = tmp_path / run
            result = _invoke(runner, "experiment", "--config", tiny_config_file, "--work-dir", work,
                             "--conditions", "LHUC,BLHUC", "--criteria", "ce")
            assert result.exit_code == 0, result.stderr
            metrics = json.loads((work / "reports" / "metrics.json").read_text(encoding="utf-8"))
            metrics.pop("wall_clock_seconds")
            reports.append(metrics)
            assert (work / "reports" / "plotdata.tsv").exists()
        assert reports[0] == reports[1]
        names = [c["condition"] for c in reports[0]["conditions"]]
        assert names == ["SI", "LHUC[ce]", "BLHUC[ce]"]
        assert len(reports[0]["sweep"]) == 4

    def test_unknown_condition(self, runner, tiny_config_file):
        result = _invoke(runner, "experiment", "--config", tiny_config_file, "--conditions", "NOPE")
        assert result.exit_code == 2
