import hashlib
import json

import numpy as np
import pytest

from mowe.config import DataConfig, required_vocab
from mowe.errors import ArgumentError, FormatError
from mowe.synthdata import (
    EOS_TOKEN, TASK_NAMES, generate, generate_from_config, load_dataset, make_tasks, pattern_waveform,
    response_tokens, save_dataset, split,
)


def _config(**updates):
    values = dict(seq_len=12, d_in=8, n_tasks=3, samples_per_task=10, noise_scale=0.2, n_levels=3,
                  instruction_len=2)
    values.update(updates)
    return DataConfig(**values)


class TestGeneration:

    def test_counts_and_shapes(self):
        dataset = generate_from_config(_config(), seed=0)
        assert len(dataset) == 30
        assert dataset.seq_len == 12 and dataset.d_in == 8
        assert dataset.task_names() == list(TASK_NAMES[:3])
        assert all(len(rows) == 10 for rows in dataset.by_task().values())

    def test_same_seed_same_samples(self):
        a = generate_from_config(_config(), seed=4)
        b = generate_from_config(_config(), seed=4)
        for x, y in zip(a.samples, b.samples):
            np.testing.assert_array_equal(x.features.data, y.features.data)
            assert x.target_ids == y.target_ids and x.sample_id == y.sample_id

    def test_different_seeds_differ(self):
        a = generate_from_config(_config(), seed=0)
        b = generate_from_config(_config(), seed=1)
        assert not np.array_equal(a.samples[0].features.data, b.samples[0].features.data)

    def test_zero_noise_repeats_the_task_template(self):
        """Test that without noise every sample of a task is the same sequence."""
        dataset = generate_from_config(_config(noise_scale=0.0), seed=0)
        for rows in dataset.by_task().values():
            for sample in rows[1:]:
                np.testing.assert_array_equal(sample.features.data, rows[0].features.data)

    def test_features_are_float32_exact(self):
        sample = generate_from_config(_config(), seed=0).samples[0]
        data = sample.features.data
        np.testing.assert_array_equal(data, data.astype(np.float32).astype(np.float64))

    def test_targets_follow_the_features(self):
        dataset = generate_from_config(_config(), seed=0)
        for sample in dataset.samples:
            task = dataset.tasks[sample.task_id]
            assert sample.target_ids == response_tokens(sample.features.data, task)
            assert sample.target_ids[-1] == EOS_TOKEN
            assert sample.instruction_ids == task.instruction_ids

    def test_token_ids_fit_the_vocabulary(self):
        config = _config()
        dataset = generate_from_config(config, seed=0)
        ids = {i for s in dataset.samples for i in s.instruction_ids + s.target_ids}
        assert max(ids) < required_vocab(config)

    def test_instructions_are_task_specific(self):
        tasks, _ = make_tasks(_config(), seed=0)
        assert len({t.instruction_ids for t in tasks}) == len(tasks)

    def test_centers_are_separated(self):
        tasks, _ = make_tasks(_config(noise_scale=0.8), seed=0)
        for i, a in enumerate(tasks):
            for b in tasks[i + 1:]:
                assert np.linalg.norm(a.center - b.center) >= 4.0 * 0.8

    def test_degenerate_tasks_share_a_center(self):
        tasks, _ = make_tasks(_config(degenerate=True), seed=0)
        for task in tasks[1:]:
            np.testing.assert_array_equal(task.center, tasks[0].center)
            assert task.pattern_id == tasks[0].pattern_id

    def test_speech_pair_shares_a_pattern(self):
        tasks, _ = make_tasks(_config(n_tasks=5), seed=0)
        by_name = {t.name: t for t in tasks}
        assert by_name["asr"].pattern_id == by_name["sqa"].pattern_id
        assert by_name["asr"].pattern_id != by_name["er"].pattern_id

    def test_waveforms_are_zero_mean(self):
        for pattern_id in range(5):
            assert abs(pattern_waveform(pattern_id, 64).mean()) < 1e-12

    def test_generate_zero_per_task(self):
        tasks, directions = make_tasks(_config(), seed=0)
        dataset = generate(tasks, 0, seed=0, seq_len=12, pattern_directions=directions)
        assert len(dataset) == 0
        assert dataset.task_names() == list(TASK_NAMES[:3])

    def test_generate_rejects_negative_count(self):
        tasks, directions = make_tasks(_config(), seed=0)
        with pytest.raises(ArgumentError):
            generate(tasks, -1, seed=0, seq_len=12, pattern_directions=directions)

    def test_unknown_task_name(self):
        with pytest.raises(ArgumentError):
            generate_from_config(_config(), seed=0).task_by_name("nope")


class TestSplit:

    def setup_method(self):
        self.dataset = generate_from_config(_config(), seed=0)

    def test_stratified_and_disjoint(self):
        train, held_out = split(self.dataset, 0.8, seed=0)
        assert len(train) == 24 and len(held_out) == 6
        assert all(len(rows) == 8 for rows in train.by_task().values())
        assert not {s.sample_id for s in train.samples} & {s.sample_id for s in held_out.samples}

    def test_full_fraction_leaves_eval_empty(self):
        train, held_out = split(self.dataset, 1.0, seed=0)
        assert len(train) == 30
        assert len(held_out) == 0

    def test_split_is_deterministic(self):
        first, _ = split(self.dataset, 0.5, seed=3)
        second, _ = split(self.dataset, 0.5, seed=3)
        assert [s.sample_id for s in first.samples] == [s.sample_id for s in second.samples]

    def test_fraction_out_of_range(self):
        with pytest.raises(ArgumentError):
            split(self.dataset, 1.5, seed=0)


class TestDatasetFiles:

    def test_save_then_load(self, tmp_path):
        dataset = generate_from_config(_config(), seed=0)
        save_dataset(dataset, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        assert len(loaded) == len(dataset)
        assert loaded.task_names() == dataset.task_names()
        for a, b in zip(dataset.samples, loaded.samples):
            np.testing.assert_array_equal(a.features.data, b.features.data)
            assert (a.task_id, a.target_ids, a.sample_id) == (b.task_id, b.target_ids, b.sample_id)

    def test_manifest_records_blob_hash(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        blob = (tmp_path / "features.bin").read_bytes()
        assert manifest["features_sha256"] == hashlib.sha256(blob).hexdigest()
        assert manifest["count"] == 30

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "absent")

    def test_bad_magic(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        blob = bytearray((tmp_path / "features.bin").read_bytes())
        blob[:8] = b"NOTMOWE!"
        (tmp_path / "features.bin").write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_truncated_blob(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        blob = (tmp_path / "features.bin").read_bytes()
        (tmp_path / "features.bin").write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_unreadable_manifest(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        (tmp_path / "manifest.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_flipped_feature_byte_fails_the_hash(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        blob = bytearray((tmp_path / "features.bin").read_bytes())
        blob[-1] ^= 0x01
        (tmp_path / "features.bin").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as info:
            load_dataset(tmp_path)
        assert "hash" in str(info.value)

    @pytest.mark.parametrize("key", ["tasks", "samples", "features_sha256"])
    def test_manifest_missing_key(self, tmp_path, key):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        del manifest[key]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_manifest_sample_missing_field(self, tmp_path):
        save_dataset(generate_from_config(_config(), seed=0), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        del manifest["samples"][0]["target_ids"]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(FormatError):
            load_dataset(tmp_path)
