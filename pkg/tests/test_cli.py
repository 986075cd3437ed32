"""Command-line surface: argument handling, config-file precedence, and the
end-to-end generate/preprocess/train/evaluate/suite flows on tiny data."""

import numpy as np
import pytest

from pcehr import cli
from pcehr.config import ConfigError, build_train_config, merge_settings, read_config_file

TINY_CONFIG = """\
# tiny model for fast tests
epochs = 1
batch_size = 8
tse_filters = 4
tse_out = 8
pce_filters = 4
pce_out = 6
lstm_hidden = 6
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture()
def synth_data(tmp_path):
    out = tmp_path / "data"
    rc = cli.main(["synth-gen", "--out", str(out), "--subjects", "3", "--duration", "120", "--seed", "3"])
    assert rc == 0
    return str(out)


PREP_FLAGS = ["--tau", "2", "--n-snippets", "10", "--init-snippets", "3"]


class TestConfigFile:
    def test_parse_types_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 40  # short\nlearning_rate=1e-3\nwith_ppg_fft = true\n\n")
        values = read_config_file(path)
        assert values == {"epochs": 40, "learning_rate": 1e-3, "with_ppg_fft": True}

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learnig_rate = 1e-3\n")
        with pytest.raises(ConfigError, match="unknown key"):
            read_config_file(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = soon\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            read_config_file(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs 12\n")
        with pytest.raises(ConfigError, match="key = value"):
            read_config_file(path)

    def test_flags_override_file(self):
        merged = merge_settings({"epochs": 5, "batch_size": 16}, {"epochs": 2, "learning_rate": None})
        assert merged == {"epochs": 2, "batch_size": 16}

    def test_build_train_config_maps_fields(self):
        settings = {"learning_rate": 1e-3, "disc_weight": 0.0, "lstm_hidden": 8}
        config = build_train_config(settings, "pce-lstm")
        assert config.learning_rate == 1e-3
        assert config.disc_weight == 0.0
        assert config.model.lstm_hidden == 8
        assert config.model.kind == "pce-lstm"


class TestArgumentErrors:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gradcheck", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_model_name(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["count-params", "--model", "transformer", "--channels", "6"])
        assert exc.value.code == 2

    def test_missing_dataset_hint(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("PCEHR_DATA_DIR", raising=False)
        rc = cli.main(["suite", "--data", str(tmp_path / "missing")])
        assert rc == 1
        assert "synth-gen" in capsys.readouterr().err

    def test_env_var_supplies_dataset(self, synth_data, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("PCEHR_DATA_DIR", synth_data)
        rc = cli.main(["preprocess", "--out", str(tmp_path / "cache")] + PREP_FLAGS)
        assert rc == 0
        assert "cached" in capsys.readouterr().out


class TestCountParams:
    def test_documented_totals(self, capsys):
        assert cli.main(["count-params", "--model", "pce-lstm", "--channels", "6"]) == 0
        out = capsys.readouterr().out
        assert out.strip().splitlines()[-1].split()[-1] == "119137"
        assert cli.main(["count-params", "--model", "deepconvlstm", "--channels", "6", "--ts-len", "90"]) == 0
        out = capsys.readouterr().out
        assert out.strip().splitlines()[-1].split()[-1] == "490177"

    def test_breakdown_lists_every_layer(self, capsys):
        cli.main(["count-params", "--model", "pce-lstm", "--channels", "6"])
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) > 10
        total = int(lines[-1].split()[-1])
        assert total == sum(int(line.split()[-1]) for line in lines[:-1])


class TestEndToEndFlows:
    def test_suite_writes_reports_and_is_deterministic(self, synth_data, tiny_cfg, tmp_path, capsys):
        args = [
            "suite", "--data", synth_data, "--model", "pce-lstm", "--config", tiny_cfg,
            "--runs-per-fold", "1", "--seed", "5", "--disc-weight", "0",
        ] + PREP_FLAGS
        rc = cli.main(args + ["--out", str(tmp_path / "rep1")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "all subjects" in out
        report = tmp_path / "rep1" / "report.csv"
        preds = tmp_path / "rep1" / "predictions.csv"
        assert report.exists() and preds.exists()
        assert report.read_text().splitlines()[0] == "subject,model,metric,mean,ensemble"

        rc = cli.main(args + ["--out", str(tmp_path / "rep2")])
        assert rc == 0
        assert report.read_bytes() == (tmp_path / "rep2" / "report.csv").read_bytes()
        assert preds.read_bytes() == (tmp_path / "rep2" / "predictions.csv").read_bytes()

    def test_preprocess_train_evaluate_round_trip(self, synth_data, tiny_cfg, tmp_path, capsys):
        cache = tmp_path / "cache"
        assert cli.main(["preprocess", "--data", synth_data, "--out", str(cache)] + PREP_FLAGS) == 0
        runs = tmp_path / "runs"
        for run in ("1", "2"):
            rc = cli.main([
                "train", "--cache", str(cache), "--model", "pce-lstm", "--fold", "0",
                "--run", run, "--config", tiny_cfg, "--out", str(runs), "--seed", "4",
            ])
            assert rc == 0
        assert (runs / "pce-lstm_s01_run1.ckpt").exists()
        assert (runs / "pce-lstm_s01_run2_preds.csv").exists()
        capsys.readouterr()

        reports = tmp_path / "reports"
        assert cli.main(["evaluate", "--runs", str(runs), "--out", str(reports)]) == 0
        out = capsys.readouterr().out
        assert "s01" in out and "ensemble MAE" in out
        lines = (reports / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 + 2  # subject rows + grand rows

    def test_train_by_subject_id_and_bad_fold(self, synth_data, tiny_cfg, tmp_path, capsys):
        cache = tmp_path / "cache"
        cli.main(["preprocess", "--data", synth_data, "--out", str(cache)] + PREP_FLAGS)
        capsys.readouterr()
        rc = cli.main([
            "train", "--cache", str(cache), "--model", "pce-lstm", "--fold", "s02",
            "--config", tiny_cfg, "--out", str(tmp_path / "runs"),
        ])
        assert rc == 0
        assert "test subject s02" in capsys.readouterr().out
        rc = cli.main([
            "train", "--cache", str(cache), "--model", "pce-lstm", "--fold", "s99",
            "--config", tiny_cfg, "--out", str(tmp_path / "runs"),
        ])
        assert rc == 1
        assert "subjects" in capsys.readouterr().err

    def test_ppg_task_through_cli(self, tiny_cfg, tmp_path, capsys):
        data = tmp_path / "ppg_data"
        assert cli.main([
            "synth-gen", "--out", str(data), "--subjects", "3", "--duration", "120",
            "--seed", "6", "--emit-ppg",
        ]) == 0
        rc = cli.main([
            "suite", "--data", str(data), "--model", "pce-lstm-ppg", "--config", tiny_cfg,
            "--runs-per-fold", "1", "--ppg-fft", "--disc-weight", "0",
            "--out", str(tmp_path / "rep_ppg"),
        ] + PREP_FLAGS)
        assert rc == 0
        assert (tmp_path / "rep_ppg" / "report.csv").exists()

    def test_ablation_command(self, synth_data, tiny_cfg, tmp_path, capsys):
        rc = cli.main([
            "ablation", "--data", synth_data, "--config", tiny_cfg, "--runs-per-fold", "1",
            "--out", str(tmp_path / "abl"),
        ] + PREP_FLAGS)
        assert rc == 0
        out = capsys.readouterr().out
        assert "with-discr" in out and "held-out pair accuracy" in out
        summary = (tmp_path / "abl" / "ablation_summary.csv").read_text().splitlines()
        assert summary[0] == "arm,mean_mae,ensemble_mae,mean_rmse,ensemble_rmse"
        assert len(summary) == 4
