import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from sklearn.linear_model import LogisticRegression
from sklearn.metrics.pairwise import cosine_similarity

from mowe.config import settings
from mowe.models import AblationRow, StepRecord
from mowe.synthdata import Dataset

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["stage", "step", "lr", "total", "next_token", "indep_ent", "dep_ent", "dep_div", "grad_norm",
                 "active_params", "weak_evaluations"]
ABLATION_FIELDS = list(AblationRow.model_fields)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config_echo: Mapping[str, Any]) -> str:
    payload = json.dumps(config_echo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:8]


class RunDirectory:
    """An output directory plus the manifest listing every file written into it."""

    def __init__(self, path: Path, command: str, seed: int, config_echo: Optional[Mapping[str, Any]] = None):
        self.path = Path(path)
        self.command = command
        self.seed = seed
        self.config_echo = dict(config_echo or {})
        self.files: List[str] = []
        self.path.mkdir(parents=True, exist_ok=True)

    @classmethod
    def create(cls, command: str, seed: int, config_echo: Optional[Mapping[str, Any]] = None,
               out: Optional[str] = None, runs_dir: Optional[str] = None) -> "RunDirectory":
        if out:
            path = Path(out)
        else:
            parent = Path(runs_dir or settings.RUNS_DIR)
            path = parent / f"{command}-{seed}-{config_hash(config_echo or {})}"
        return cls(path, command, seed, config_echo)

    def file(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def write_json(self, name: str, payload: Any) -> Path:
        return write_json(self.file(name), payload)

    def write_manifest(self) -> Path:
        entries = []
        for name in self.files:
            target = self.path / name
            if target.is_dir():
                for child in sorted(p for p in target.rglob("*") if p.is_file()):
                    entries.append({"name": str(child.relative_to(self.path)), "sha256": file_sha256(child)})
            elif target.exists():
                entries.append({"name": name, "sha256": file_sha256(target)})
        manifest = {"command": self.command, "seed": self.seed, "config": self.config_echo, "files": entries}
        path = write_json(self.path / "manifest.json", manifest)
        logger.info("wrote %d files to %s", len(entries), self.path)
        return path


def _jsonable(payload: Any) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    return payload


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return " ".join(str(v) for v in value)
    return value


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return path


def write_metrics_csv(path: Path, steps: Sequence[StepRecord]) -> Path:
    return _write_csv(path, METRIC_FIELDS, (s.model_dump() for s in steps))


def write_proportions_csv(path: Path, proportions: Mapping[str, Mapping[str, Sequence[float]]]) -> Path:
    """One row per (router, task); one column per weak encoder."""
    pool = max((len(row) for table in proportions.values() for row in table.values()), default=0)
    fields = ["router", "task"] + [f"encoder{k}" for k in range(pool)]
    rows = []
    for router, table in proportions.items():
        for task, row in table.items():
            rows.append({"router": router, "task": task, **{f"encoder{k}": v for k, v in enumerate(row)}})
    return _write_csv(path, fields, rows)


def write_ablation_csv(path: Path, rows: Sequence[AblationRow]) -> Path:
    return _write_csv(path, ABLATION_FIELDS, (r.model_dump() for r in rows))


def routing_similarity(table: Mapping[str, Sequence[float]]) -> Tuple[List[str], np.ndarray]:
    """Cosine similarity between the per-task routing profiles of one router."""
    names = list(table)
    if not names:
        return [], np.zeros((0, 0))
    profiles = np.array([table[name] for name in names], dtype=np.float64)
    return names, cosine_similarity(profiles)


def most_similar_tasks(table: Mapping[str, Sequence[float]], task: str, top_k: int = 3) -> List[Tuple[str, float]]:
    names, matrix = routing_similarity(table)
    if task not in names:
        return []
    row = matrix[names.index(task)]
    order = [i for i in np.argsort(row)[::-1] if names[i] != task][:top_k]
    return [(names[i], float(row[i])) for i in order]


def majority_share(row: Sequence[float]) -> Tuple[int, float]:
    """Index and share of the encoder most samples of a task were routed to."""
    values = np.asarray(row, dtype=np.float64)
    k = int(np.argmax(values))
    return k, float(values[k])


def pair_relation(table: Mapping[str, Sequence[float]], first: str, second: str, clean: float = 0.7) -> str:
    """'share' when both tasks' majority encoder coincides, 'split' when they differ cleanly, else 'mixed'."""
    if first not in table or second not in table:
        return "absent"
    k1, s1 = majority_share(table[first])
    k2, s2 = majority_share(table[second])
    if s1 < clean or s2 < clean:
        return "mixed"
    return "share" if k1 == k2 else "split"


def format_proportions(router: str, table: Mapping[str, Sequence[float]]) -> str:
    lines = [f"{router} router: fraction of samples per encoder"]
    for task, row in table.items():
        cells = "  ".join(f"{v:6.3f}" for v in row)
        lines.append(f"  {task:<8} {cells}")
    return "\n".join(lines)


def mean_features(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    x = np.array([s.features.data.mean(axis=0) for s in dataset.samples])
    y = np.array([s.task_id for s in dataset.samples])
    return x, y


def linear_probe_accuracy(dataset: Dataset, held_out: Optional[Dataset] = None) -> float:
    """Task accuracy of a logistic-regression probe on sequence-mean features."""
    x, y = mean_features(dataset)
    if len(np.unique(y)) < 2:
        return 1.0
    probe = LogisticRegression(max_iter=1000)
    probe.fit(x, y)
    if held_out is not None and len(held_out):
        x, y = mean_features(held_out)
    return float(probe.score(x, y))
