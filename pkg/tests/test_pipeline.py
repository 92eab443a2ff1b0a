"""End-to-end CLI stages: artifacts, idempotence, and report rendering."""

import json
import re
from pathlib import Path

import pytest

from crpaml.config import ConfigError, PipelineConfig
from crpaml.pipeline import (
    MissingArtifactError,
    cmd_evaluate,
    cmd_fit_risk,
    cmd_ingest,
    cmd_profile,
    cmd_report,
    cmd_score,
    cmd_synth,
    cmd_train,
    run_command,
)
from crpaml.reporting import ReportError, aggregate_metrics, format_pct, mean_std


def make_config(tmp_path, **overrides) -> PipelineConfig:
    base = {
        "paths": {"workdir": str(tmp_path / "run")},
        "synth": {
            "n_accounts": 120,
            "n_background_txns": 2500,
            "illicit_ratio": 0.012,
            "seed": 4,
        },
        "network": {"max_epochs": 5, "patience": 5, "batch_size": 256},
        "train": {"seeds": [1, 2]},
    }
    for section, values in overrides.items():
        base.setdefault(section, {}).update(values)
    config_path = tmp_path / "config.yaml"
    import yaml

    config_path.write_text(yaml.safe_dump(base))
    return PipelineConfig.load(config_path, environ={})


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipe")
    config = make_config(tmp_path)
    for command in ("synth", "ingest", "profile", "fit-risk", "train", "evaluate"):
        assert run_command(command, config) == 0
    return tmp_path, config


class TestStages:
    def test_smoke_path_produces_populated_report(self, pipeline_run):
        tmp_path, config = pipeline_run
        assert run_command("report", config) == 0
        report_dirs = sorted((config.workdir / "report").iterdir())
        assert report_dirs
        latest = report_dirs[-1]
        report = json.loads((latest / "report.json").read_text())
        assert report["summary"]["seeds"] == [1, 2]
        assert (latest / "metrics.csv").exists()
        assert (latest / "f1_curves.png").exists()
        assert (latest / "recall_curves.png").exists()

    def test_report_text_formats_mean_pm_std(self, pipeline_run):
        tmp_path, config = pipeline_run
        run_command("report", config)
        latest = sorted((config.workdir / "report").iterdir())[-1]
        text = (latest / "report.txt").read_text()
        assert re.search(r"\d+\.\d{2} ± \d+\.\d{2}", text)

    def test_artifacts_embed_config_hash(self, pipeline_run):
        tmp_path, config = pipeline_run
        for name in ("thresholds", "vocab", "classes", "profiles", "risktables"):
            payload = json.loads((config.workdir / f"{name}.json").read_text())
            assert payload["config_hash"] == config.hash
        from crpaml.txstore import TransactionStore

        store = TransactionStore.load(config.workdir / "store.bin")
        assert store.meta == config.hash
        metrics = json.loads((config.workdir / "metrics" / "seed-1.json").read_text())
        assert metrics["config_hash"] == config.hash

    def test_rerunning_evaluate_is_byte_identical(self, pipeline_run):
        tmp_path, config = pipeline_run
        metrics_path = config.workdir / "metrics" / "seed-1.json"
        predictions_path = config.workdir / "predictions" / "val-seed-1.csv"
        before = (metrics_path.read_bytes(), predictions_path.read_bytes())
        assert run_command("evaluate", config) == 0
        after = (metrics_path.read_bytes(), predictions_path.read_bytes())
        assert before == after

    def test_rerunning_report_contents_identical(self, pipeline_run):
        tmp_path, config = pipeline_run
        run_command("report", config)
        first = sorted((config.workdir / "report").iterdir())[-1]
        run_command("report", config)
        second = sorted((config.workdir / "report").iterdir())[-1]
        for name in ("report.json", "report.txt", "metrics.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_score_emits_contributions(self, pipeline_run):
        tmp_path, config = pipeline_run
        assert run_command("score", config, seed=1) == 0
        out = config.workdir / "predictions" / "all-seed-1.csv"
        lines = out.read_text().splitlines()
        assert lines[0] == f"# config_hash={config.hash}"
        header = lines[1].split(",")
        for name in ("contrib_format", "contrib_currency", "contrib_volume",
                     "contrib_frequency", "contrib_bank_relation"):
            assert name in header

    def test_serve_app_wires_workdir_artifacts(self, pipeline_run):
        from fastapi.testclient import TestClient

        from crpaml.caseservice import build_app_from_workdir

        tmp_path, config = pipeline_run
        run_command("score", config, seed=1)
        client = TestClient(build_app_from_workdir(config, seed=1))
        health = client.get("/health")
        assert health.status_code == 200
        meta = health.json()["meta"]
        assert len(meta["model_checkpoint"]) == 64
        assert len(meta["schema_version"]) == 64
        queue = client.get("/cases")
        assert queue.status_code == 200
        assert isinstance(queue.json()["cases"], list)


class TestStageDependencies:
    def test_train_before_profile_names_missing_artifact(self, tmp_path, capsys):
        config = make_config(tmp_path)
        run_command("synth", config)
        run_command("ingest", config)
        status = run_command("train", config)
        assert status == 1
        err = capsys.readouterr().err
        assert "thresholds.json" in err and "profile" in err

    def test_ingest_without_input_fails(self, tmp_path, capsys):
        config = make_config(tmp_path)
        assert run_command("ingest", config) == 1
        assert "synth" in capsys.readouterr().err

    def test_unknown_command_rejected(self, tmp_path, capsys):
        config = make_config(tmp_path)
        assert run_command("wibble", config) == 1


class TestConfig:
    def test_env_override(self, tmp_path):
        config_path = tmp_path / "c.yaml"
        config_path.write_text("synth:\n  seed: 3\n")
        config = PipelineConfig.load(
            config_path, environ={"CRPAML_SYNTH_SEED": "99", "CRPAML_RISK_SMOOTHING": "2.5"}
        )
        assert config["synth"]["seed"] == 99
        assert config["risk"]["smoothing"] == 2.5

    def test_flag_overrides_beat_env(self, tmp_path):
        config = PipelineConfig.load(
            None,
            environ={"CRPAML_TRAIN_SEEDS": "[7, 8]"},
            flag_overrides={"train": {"seeds": [42]}},
        )
        assert config["train"]["seeds"] == [42]

    def test_unknown_key_rejected(self, tmp_path):
        config_path = tmp_path / "c.yaml"
        config_path.write_text("nonsense:\n  a: 1\n")
        with pytest.raises(ConfigError):
            PipelineConfig.load(config_path, environ={})

    def test_hash_stable_under_key_order(self, tmp_path):
        a = PipelineConfig.load(None, environ={})
        b = PipelineConfig.load(None, environ={})
        assert a.hash == b.hash


class TestReporting:
    def test_mean_std(self):
        mean, std = mean_std([0.80, 0.85])
        assert mean == pytest.approx(0.825)
        assert std == pytest.approx(0.03535533906)
        assert mean_std([0.5]) == (0.5, 0.0)

    def test_format_pct(self):
        assert format_pct(0.8251, 0.0262) == "82.51 ± 2.62"

    def test_refuses_mismatched_schema_hashes(self):
        def metrics(seed, schema_hash):
            block = {
                "f1": 0.5, "precision": 0.5, "recall": 0.5,
                "confusion": {"tp": 1, "fp": 1, "tn": 1, "fn": 1},
            }
            return {
                "seed": seed, "schema_hash": schema_hash, "config_hash": "c",
                "tau": 0.0, "raw": dict(block), "filtered": dict(block),
                "precision_delta": 0.0,
            }

        with pytest.raises(ReportError, match="schema"):
            aggregate_metrics([metrics(1, "aaa"), metrics(2, "bbb")])
        summary = aggregate_metrics([metrics(1, "aaa"), metrics(2, "aaa")])
        assert summary["filtered_f1_pct"] == "50.00 ± 0.00"
