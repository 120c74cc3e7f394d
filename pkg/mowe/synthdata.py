"""
Synthetic multi-task "audio" datasets.

Each task owns a cluster center, a temporal pattern and a response template.
A sample is ``center + level offset + pattern(t) + noise``; its target tokens
are recomputed from the features by ``response_tokens`` so the learning
problem is solvable from the input alone.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mowe.config import DataConfig
from mowe.errors import ArgumentError, ConfigError, FormatError
from mowe.numerics import Rng, Tensor

logger = logging.getLogger(__name__)

EOS_TOKEN = 0
TASK_NAMES = ("asr", "er", "aqa", "sqa", "ac", "task5", "task6", "task7")
# asr and sqa are the speech-like pair: same temporal pattern, different targets
TASK_PATTERNS = (0, 1, 2, 0, 3, 4, 1, 2)

BLOB_MAGIC = b"MOWEDATA"
BLOB_VERSION = 1
_BLOB_HEADER = struct.Struct("<8sIIII")


@dataclass
class TaskSpec:
    task_id: int
    name: str
    center: np.ndarray
    pattern_id: int
    noise_scale: float
    level_direction: np.ndarray
    level_step: float
    n_levels: int
    utterance_scale: float
    instruction_ids: Tuple[int, ...]
    answer_token: int
    level_token_base: int

    def response_template(self, level: int) -> Tuple[int, ...]:
        return (self.answer_token, self.level_token_base + level, EOS_TOKEN)


@dataclass
class FeatureSequence:
    features: Tensor
    task_id: int
    instruction_ids: Tuple[int, ...]
    target_ids: Tuple[int, ...]
    sample_id: str

    @property
    def seq_len(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    tasks: List[TaskSpec]
    samples: List[FeatureSequence] = field(default_factory=list)
    pattern_directions: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def seq_len(self) -> int:
        return self.samples[0].seq_len if self.samples else 0

    @property
    def d_in(self) -> int:
        return int(self.tasks[0].center.shape[0]) if self.tasks else 0

    def task_names(self) -> List[str]:
        return [task.name for task in self.tasks]

    def task_by_name(self, name: str) -> TaskSpec:
        for task in self.tasks:
            if task.name == name:
                return task
        raise ArgumentError(f"unknown task '{name}'", {"known": self.task_names()})

    def subset(self, task_ids: Sequence[int]) -> "Dataset":
        wanted = set(task_ids)
        return Dataset(self.tasks, [s for s in self.samples if s.task_id in wanted], self.pattern_directions)

    def by_task(self) -> Dict[int, List[FeatureSequence]]:
        grouped: Dict[int, List[FeatureSequence]] = {task.task_id: [] for task in self.tasks}
        for sample in self.samples:
            grouped[sample.task_id].append(sample)
        return grouped


def pattern_waveform(pattern_id: int, seq_len: int) -> np.ndarray:
    """Zero-mean temporal waveform of length ``seq_len`` for a pattern id."""
    phase = np.arange(seq_len) / seq_len
    if pattern_id == 0:
        # amplitude-modulated carrier
        wave = np.sin(2 * np.pi * 8 * phase) * (0.6 + 0.4 * np.sin(2 * np.pi * 2 * phase))
    elif pattern_id == 1:
        wave = np.sin(2 * np.pi * 2 * phase)
    elif pattern_id == 2:
        wave = np.sign(np.sin(2 * np.pi * 4 * phase + 0.1))
    elif pattern_id == 3:
        wave = 2.0 * ((3 * phase) % 1.0) - 1.0
    else:
        wave = np.sin(2 * np.pi * (1.0 + 6.0 * phase) * phase)
    return wave - wave.mean()


def _basis(d_in: int, count: int, rng: Rng) -> np.ndarray:
    """``count`` unit vectors, mutually orthogonal while d_in allows it."""
    vectors = []
    while len(vectors) < count:
        block = min(d_in, count - len(vectors))
        q, _ = np.linalg.qr(rng.normal((d_in, d_in)))
        vectors.extend(q[:, i] for i in range(block))
    return np.stack(vectors)


def make_tasks(config: DataConfig, seed: int) -> Tuple[List[TaskSpec], np.ndarray]:
    """Build task specs and the shared pattern directions."""
    rng = Rng(seed, "synthdata/tasks")
    n = config.n_tasks
    axes = _basis(config.d_in, 3 * n, rng)
    radius = max(3.0, 4.0 * config.noise_scale)
    pattern_directions = axes[2 * n:3 * n]

    tasks = []
    answer_base = 1 + n * config.instruction_len
    level_base = answer_base + n
    for task_id in range(n):
        source = 0 if config.degenerate else task_id
        tasks.append(TaskSpec(
            task_id=task_id,
            name=TASK_NAMES[task_id],
            center=radius * axes[source],
            pattern_id=TASK_PATTERNS[0 if config.degenerate else task_id],
            noise_scale=config.noise_scale,
            level_direction=axes[n + source],
            level_step=config.level_step,
            n_levels=config.n_levels,
            utterance_scale=config.utterance_scale,
            instruction_ids=tuple(1 + task_id * config.instruction_len + j for j in range(config.instruction_len)),
            answer_token=answer_base + task_id,
            level_token_base=level_base,
        ))
    if not config.degenerate:
        _check_separation(tasks)
    return tasks, pattern_directions


def _check_separation(tasks: Sequence[TaskSpec]) -> None:
    for i, a in enumerate(tasks):
        for b in tasks[i + 1:]:
            distance = float(np.linalg.norm(a.center - b.center))
            if distance < 4.0 * max(a.noise_scale, b.noise_scale):
                raise ConfigError(
                    f"tasks {a.name} and {b.name} are only {distance:.3f} apart",
                    location="data.noise_scale", hint="lower noise_scale or raise d_in")


def level_of(features: np.ndarray, task: TaskSpec) -> int:
    """Quantised mean-feature bucket along the task's level direction."""
    projection = float((features.mean(axis=0) - task.center) @ task.level_direction)
    raw = projection / task.level_step + (task.n_levels - 1) / 2.0
    return int(np.clip(np.rint(raw), 0, task.n_levels - 1))


def response_tokens(features: np.ndarray, task: TaskSpec) -> Tuple[int, ...]:
    return task.response_template(level_of(features, task))


def generate(tasks: Sequence[TaskSpec], n_per_task: int, seed: int, seq_len: int,
             pattern_directions: np.ndarray) -> Dataset:
    """Reproducible samples; features are rounded to float32 so files round-trip exactly."""
    if n_per_task < 0:
        raise ArgumentError("n_per_task must be non-negative")
    samples: List[FeatureSequence] = []
    for task in tasks:
        rng = Rng(seed, f"synthdata/samples/{task.name}")
        wave = pattern_waveform(task.pattern_id, seq_len)
        pattern = np.outer(wave, pattern_directions[task.pattern_id % len(pattern_directions)])
        for i in range(n_per_task):
            # utterance-level offset along the level axis; it decides the response level
            offset = rng.normal((1,), std=task.noise_scale * task.utterance_scale)[0] * task.level_direction
            noise = rng.normal((seq_len, task.center.shape[0]), std=task.noise_scale)
            raw = task.center[None, :] + offset[None, :] + pattern + noise
            features = raw.astype(np.float32).astype(np.float64)
            samples.append(FeatureSequence(
                features=Tensor(features),
                task_id=task.task_id,
                instruction_ids=task.instruction_ids,
                target_ids=response_tokens(features, task),
                sample_id=f"{task.name}-{i:05d}",
            ))
    logger.debug("generated %d samples over %d tasks", len(samples), len(tasks))
    return Dataset(list(tasks), samples, pattern_directions)


def generate_from_config(config: DataConfig, seed: int) -> Dataset:
    tasks, directions = make_tasks(config, seed)
    return generate(tasks, config.samples_per_task, seed, config.seq_len, directions)


def split(dataset: Dataset, train_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Disjoint train/eval split, stratified per task."""
    if not 0.0 <= train_fraction <= 1.0:
        raise ArgumentError(f"train_fraction must lie in [0, 1], got {train_fraction}")
    train: List[FeatureSequence] = []
    held_out: List[FeatureSequence] = []
    for task_id, samples in dataset.by_task().items():
        order = Rng(seed, f"synthdata/split/{task_id}").permutation(len(samples))
        n_train = int(round(train_fraction * len(samples)))
        train.extend(samples[i] for i in order[:n_train])
        held_out.extend(samples[i] for i in order[n_train:])
    return (Dataset(dataset.tasks, train, dataset.pattern_directions),
            Dataset(dataset.tasks, held_out, dataset.pattern_directions))


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def save_dataset(dataset: Dataset, directory: Path) -> Path:
    """Write ``manifest.json`` plus a little-endian float32 ``features.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seq_len, d_in = dataset.seq_len, dataset.d_in
    header = _BLOB_HEADER.pack(BLOB_MAGIC, BLOB_VERSION, seq_len, d_in, len(dataset))
    body = b"".join(s.features.data.astype("<f4").tobytes() for s in dataset.samples)
    blob = header + body
    (directory / "features.bin").write_bytes(blob)

    manifest = {
        "format": "mowe-dataset",
        "version": BLOB_VERSION,
        "seq_len": seq_len,
        "d_in": d_in,
        "count": len(dataset),
        "features_sha256": content_hash(blob),
        "pattern_directions": None if dataset.pattern_directions is None else dataset.pattern_directions.tolist(),
        "tasks": [
            {
                "task_id": t.task_id, "name": t.name, "center": t.center.tolist(),
                "pattern_id": t.pattern_id, "noise_scale": t.noise_scale,
                "level_direction": t.level_direction.tolist(), "level_step": t.level_step,
                "n_levels": t.n_levels, "utterance_scale": t.utterance_scale, "instruction_ids": list(t.instruction_ids),
                "answer_token": t.answer_token, "level_token_base": t.level_token_base,
            }
            for t in dataset.tasks
        ],
        "samples": [
            {"sample_id": s.sample_id, "task_id": s.task_id,
             "instruction_ids": list(s.instruction_ids), "target_ids": list(s.target_ids)}
            for s in dataset.samples
        ],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("wrote %d samples to %s", len(dataset), directory)
    return path


def load_dataset(directory: Path) -> Dataset:
    """Read a dataset directory, verifying the blob against the manifest's SHA-256."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    blob_path = directory / "features.bin"
    if not manifest_path.is_file() or not blob_path.is_file():
        raise FormatError(f"{directory} is not a dataset directory (manifest.json + features.bin)")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    blob = blob_path.read_bytes()
    if len(blob) < _BLOB_HEADER.size:
        raise FormatError("feature blob is truncated")
    magic, version, seq_len, d_in, count = _BLOB_HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC:
        raise FormatError(f"bad feature blob magic {magic!r}")
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported feature blob version {version}")
    expected = _BLOB_HEADER.size + count * seq_len * d_in * 4
    if len(blob) != expected:
        raise FormatError(f"feature blob has {len(blob)} bytes, expected {expected}")
    recorded = manifest.get("features_sha256")
    if recorded is None:
        raise FormatError("manifest is missing 'features_sha256'")
    actual = content_hash(blob)
    if actual != recorded:
        raise FormatError("feature blob does not match the manifest hash",
                          {"expected": recorded, "actual": actual})

    try:
        return _dataset_from_manifest(manifest, blob, count, seq_len, d_in)
    except KeyError as exc:
        raise FormatError(f"manifest is missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest entry: {exc}") from exc


def _dataset_from_manifest(manifest: Dict, blob: bytes, count: int, seq_len: int, d_in: int) -> Dataset:
    if count != len(manifest["samples"]):
        raise FormatError("manifest and feature blob disagree on the sample count")

    tasks = [
        TaskSpec(
            task_id=t["task_id"], name=t["name"], center=np.array(t["center"]),
            pattern_id=t["pattern_id"], noise_scale=t["noise_scale"],
            level_direction=np.array(t["level_direction"]), level_step=t["level_step"],
            n_levels=t["n_levels"], utterance_scale=t["utterance_scale"], instruction_ids=tuple(t["instruction_ids"]),
            answer_token=t["answer_token"], level_token_base=t["level_token_base"],
        )
        for t in manifest["tasks"]
    ]
    features = np.frombuffer(blob, dtype="<f4", offset=_BLOB_HEADER.size).astype(np.float64)
    features = features.reshape(count, seq_len, d_in)
    samples = [
        FeatureSequence(
            features=Tensor(features[i]),
            task_id=entry["task_id"],
            instruction_ids=tuple(entry["instruction_ids"]),
            target_ids=tuple(entry["target_ids"]),
            sample_id=entry["sample_id"],
        )
        for i, entry in enumerate(manifest["samples"])
    ]
    directions = manifest.get("pattern_directions")
    return Dataset(tasks, samples, None if directions is None else np.array(directions))
