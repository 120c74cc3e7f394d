import csv
import json

import numpy as np
import pytest

from mowe.config import DataConfig
from mowe.models import AblationRow, StepRecord
from mowe.reporting import (
    RunDirectory, config_hash, file_sha256, format_proportions, linear_probe_accuracy, majority_share,
    most_similar_tasks, pair_relation, routing_similarity, write_ablation_csv, write_metrics_csv,
    write_proportions_csv,
)
from mowe.synthdata import generate_from_config, split

TABLE = {
    "asr": [0.9, 0.1, 0.0],
    "sqa": [0.8, 0.2, 0.0],
    "er": [0.0, 0.05, 0.95],
    "ac": [0.4, 0.3, 0.3],
}


class TestRunDirectory:

    def test_default_name_uses_command_seed_and_hash(self, temp_runs_dir):
        run = RunDirectory.create("train", 4, {"a": 1})
        assert run.path == temp_runs_dir / f"train-4-{config_hash({'a': 1})}"
        assert run.path.is_dir()

    def test_config_hash_ignores_key_order(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
        assert len(config_hash({"a": 1})) == 8

    def test_manifest_lists_every_file(self, tmp_path):
        run = RunDirectory.create("train", 0, {"x": 1}, out=str(tmp_path / "run"))
        run.write_json("report.json", {"ok": True})
        nested = run.file("dataset")
        nested.mkdir()
        (nested / "features.bin").write_bytes(b"\x00\x01")
        manifest = json.loads(run.write_manifest().read_text(encoding="utf-8"))
        entries = {entry["name"]: entry["sha256"] for entry in manifest["files"]}
        assert set(entries) == {"report.json", "dataset/features.bin"}
        assert entries["report.json"] == file_sha256(run.path / "report.json")
        assert manifest["seed"] == 0 and manifest["config"] == {"x": 1}


class TestCsvWriters:

    def test_metrics_columns(self, tmp_path):
        steps = [StepRecord(step=i, lr=0.1, total=1.0 - i / 10, next_token=0.9) for i in range(3)]
        path = write_metrics_csv(tmp_path / "metrics.csv", steps)
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        assert set(rows[0]) == {"stage", "step", "lr", "total", "next_token", "indep_ent", "dep_ent", "dep_div",
                                "grad_norm", "active_params", "weak_evaluations"}

    def test_proportion_rows(self, tmp_path):
        path = write_proportions_csv(tmp_path / "p.csv", {"dep": {"asr": [0.25, 0.75]}, "indep": {"asr": [1.0, 0.0]}})
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert [(r["router"], r["task"]) for r in rows] == [("dep", "asr"), ("indep", "asr")]
        assert float(rows[0]["encoder1"]) == 0.75

    def test_ablation_blank_for_missing_values(self, tmp_path):
        path = write_ablation_csv(tmp_path / "a.csv", [AblationRow(router_mode="off", pool_size=0, n_mixtures=0)])
        with path.open(encoding="utf-8") as handle:
            row = next(csv.DictReader(handle))
        assert row["final_eval_loss"] == ""
        assert row["router_mode"] == "off"

    def test_ablation_lists_are_space_joined(self, tmp_path):
        row = AblationRow(router_mode="indep-x2", pool_size=4, n_mixtures=2, indep_fixed_encoders=[0, 1])
        path = write_ablation_csv(tmp_path / "a.csv", [row])
        with path.open(encoding="utf-8") as handle:
            assert next(csv.DictReader(handle))["indep_fixed_encoders"] == "0 1"


class TestRoutingAnalysis:

    def test_similarity_matrix(self):
        names, matrix = routing_similarity(TABLE)
        assert names == list(TABLE)
        assert matrix.shape == (4, 4)
        np.testing.assert_allclose(np.diag(matrix), 1.0)

    def test_speech_pair_is_nearest(self):
        nearest = most_similar_tasks(TABLE, "asr", top_k=1)
        assert nearest[0][0] == "sqa"
        assert most_similar_tasks(TABLE, "unknown") == []

    def test_majority_share(self):
        assert majority_share([0.1, 0.7, 0.2]) == (1, 0.7)

    def test_pair_relations(self):
        assert pair_relation(TABLE, "asr", "sqa") == "share"
        assert pair_relation(TABLE, "asr", "er") == "split"
        assert pair_relation(TABLE, "asr", "ac") == "mixed"
        assert pair_relation(TABLE, "asr", "aqa") == "absent"

    def test_format_proportions(self):
        text = format_proportions("dep", {"asr": [0.5, 0.5]})
        assert text.splitlines()[0].startswith("dep router")
        assert "0.500" in text


class TestLinearProbe:

    def test_default_tasks_are_linearly_separable(self):
        dataset = generate_from_config(DataConfig(), seed=0)
        train_set, held_out = split(dataset, 0.8, seed=0)
        assert linear_probe_accuracy(train_set, held_out) >= 0.99

    def test_single_task_is_trivially_separable(self):
        dataset = generate_from_config(DataConfig(n_tasks=1, samples_per_task=4, seq_len=8), seed=0)
        assert linear_probe_accuracy(dataset) == pytest.approx(1.0)
