import csv
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import pytest

from mowe.cli import main
from mowe.config import MoweConfig, config_from_dict


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def _stderr_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.mark.integration
class TestCommands:

    def test_show_defaults_parses_back(self, capsys):
        assert main(["config", "show-defaults"]) == 0
        text = capsys.readouterr().out
        assert config_from_dict(tomllib.loads(text)) == MoweConfig()

    def test_gen_data_writes_dataset_and_manifest(self, capsys, toy_config_file, tmp_path):
        out = tmp_path / "data-run"
        assert main(["gen-data", "--config", str(toy_config_file), "--out", str(out)]) == 0
        payload = _stdout_json(capsys)
        assert payload["samples"] == 8
        assert 0.0 <= payload["probe_accuracy"] <= 1.0
        assert (out / "dataset" / "features.bin").is_file()
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        names = {entry["name"] for entry in manifest["files"]}
        assert {"dataset/features.bin", "dataset/manifest.json", "summary.json"} <= names

    def test_train_is_reproducible(self, capsys, toy_config_file, tmp_path):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", str(toy_config_file), "--seed", "3", "--out", str(out)]) == 0
            capsys.readouterr()
            report = json.loads((out / "report.json").read_text(encoding="utf-8"))
            report.pop("wall_clock_seconds")
            runs.append((report, (out / "checkpoint.bin").read_bytes()))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert runs[0][0]["seed"] == 3

    def test_train_outputs(self, capsys, toy_config_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_file), "--epochs", "2", "--out", str(out)]) == 0
        payload = _stdout_json(capsys)
        assert payload["final_train_loss"] is not None
        for name in ("checkpoint.bin", "report.json", "metrics.csv", "proportions.csv", "config.toml"):
            assert (out / name).is_file(), name
        with (out / "metrics.csv").open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2 * 3
        saved = config_from_dict(tomllib.loads((out / "config.toml").read_text(encoding="utf-8")))
        assert saved.trainer.epochs == 2

    def test_train_from_generated_data(self, capsys, toy_config_file, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--config", str(toy_config_file), "--out", str(data)]) == 0
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_file), "--data", str(data), "--out", str(out)]) == 0
        assert (out / "checkpoint.bin").is_file()

    def test_eval_matches_the_training_report(self, capsys, toy_config_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_file), "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out)]) == 0
        evaluated = _stdout_json(capsys)
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert evaluated["loss"] == report["final_eval"]["loss"]
        assert evaluated["routing_proportions"] == report["final_eval"]["routing_proportions"]

    def test_route_report(self, capsys, toy_config_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_file), "--out", str(out)]) == 0
        capsys.readouterr()
        report_dir = tmp_path / "routes"
        assert main(["route-report", "--checkpoint", str(out / "checkpoint.bin"), "--split", "all",
                     "--out", str(report_dir)]) == 0
        payload = _stdout_json(capsys)
        assert set(payload["routers"]) == {"dep", "indep"}
        for summary in payload["routers"].values():
            assert summary["speech_pair"] == "absent"
            for row in summary["proportions"].values():
                assert sum(row) == pytest.approx(1.0)
        assert (report_dir / "proportions.csv").is_file()
        assert (report_dir / "summary.json").is_file()

    def test_ablate_covers_every_mode(self, capsys, toy_config_file, tmp_path):
        out = tmp_path / "ablate"
        assert main(["ablate", "--config", str(toy_config_file), "--out", str(out)]) == 0
        payload = _stdout_json(capsys)
        assert [row["router_mode"] for row in payload["rows"]] == [
            "off", "indep", "dep", "indep-x2", "dep-x2", "indep+dep"]
        with (out / "ablation.csv").open(encoding="utf-8") as handle:
            assert len(list(csv.DictReader(handle))) == 6
        assert (out / "reports" / "indep+dep.json").is_file()

    def test_grad_check_passes(self, capsys):
        assert main(["grad-check"]) == 0
        payload = _stdout_json(capsys)
        assert payload["passed"] is True
        assert all(family["passed"] for family in payload["families"].values())

    def test_default_run_directory(self, capsys, toy_config_file, temp_runs_dir):
        assert main(["gen-data", "--config", str(toy_config_file), "--seed", "5"]) == 0
        payload = _stdout_json(capsys)
        created = list(temp_runs_dir.iterdir())
        assert len(created) == 1
        assert created[0].name.startswith("gen-data-5-")
        assert payload["out"] == str(created[0])


class TestErrors:

    def test_unknown_override_key(self, capsys):
        assert main(["gen-data", "--set", "bogus.key=1"]) == 2
        error = _stderr_json(capsys)
        assert error["error"] == "config_error"
        assert error["details"]["location"] == "bogus.key"

    def test_out_of_range_value(self, capsys, toy_config_file):
        assert main(["gen-data", "--config", str(toy_config_file), "--set", "data.noise_scale=-1"]) == 2
        assert _stderr_json(capsys)["details"]["location"] == "data.noise_scale"

    def test_unknown_router_mode(self, capsys, toy_config_file):
        assert main(["train", "--config", str(toy_config_file), "--router", "sideways"]) == 2
        assert _stderr_json(capsys)["error"] == "config_error"

    def test_missing_config_file(self, capsys, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "absent.toml")]) == 2

    def test_missing_checkpoint(self, capsys, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none")]) == 2
        assert _stderr_json(capsys)["error"] == "argument_error"

    def test_corrupt_checkpoint(self, capsys, tmp_path):
        path = tmp_path / "broken.bin"
        path.write_bytes(b"not a checkpoint at all")
        assert main(["eval", "--checkpoint", str(path)]) == 1
        assert _stderr_json(capsys)["error"] == "format_error"

    def test_usage_error(self, capsys):
        assert main(["no-such-command"]) == 2
        assert _stderr_json(capsys)["type"] == "ArgumentError"

    def test_unknown_log_level(self, capsys):
        assert main(["gen-data", "--log-level", "chatty"]) == 2

    def test_short_sequence_for_adapter(self, capsys, toy_config_file):
        assert main(["train", "--config", str(toy_config_file), "--set", "pipeline.adapter_tokens=9"]) == 2
        error = _stderr_json(capsys)
        assert error["details"]["location"] == "pipeline.adapter_tokens"
        assert error["details"]["hint"]
