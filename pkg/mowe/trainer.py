"""
Optimisation loop, training regimes, evaluation, experiment drivers and
the checkpoint codec.
"""
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mowe.config import ROUTER_MODES, MoweConfig, config_from_dict, mixture_kinds
from mowe.encoders import count_params
from mowe.errors import ArgumentError, ConfigError, FormatError, NonFiniteError
from mowe.models import (
    AblationRow, CapacityComparison, DiversityStudy, EpochRecord, EvalReport, RoutingRecord,
    RunReport, StepRecord, TaskMetrics,
)
from mowe.numerics import Rng, Tensor, no_grad
from mowe.pipeline import LossBreakdown, MoweModel, build_model
from mowe.routing import max_entropy, selection_entropy
from mowe.synthdata import Dataset, FeatureSequence, generate_from_config, split

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MOWECKPT"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")


# ---------------------------------------------------------------- optimiser

def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    """Cosine decay from ``peak`` at step 0 towards 0 at ``total_steps``; no warmup."""
    if total_steps <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient this step are skipped."""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = OrderedDict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.t = 0

    @classmethod
    def from_config(cls, params: Mapping[str, Tensor], config: MoweConfig) -> "AdamW":
        tc = config.trainer
        return cls(params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [t.grad for t in params.values() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


def check_finite(loss: LossBreakdown, params: Mapping[str, Tensor], step: int) -> None:
    """Raise NonFiniteError naming the first offending tensor: loss terms, then gradients, then values."""
    for name, value in (("loss.total", loss.total), ("loss.next_token", loss.next_token),
                        ("loss.routing", loss.routing.total)):
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError(name, step)
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"grad:{name}", step)
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(name, step)


def batches(samples: Sequence[FeatureSequence], batch_size: int, rng: Rng) -> Iterator[List[FeatureSequence]]:
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------- training

@dataclass
class _StageTrace:
    steps: List[StepRecord]
    epochs: List[EpochRecord]


def _run_stage(model: MoweModel, config: MoweConfig, train_set: Dataset, eval_set: Optional[Dataset],
               epochs: int, stage: int, threads: int) -> _StageTrace:
    tc = config.trainer
    params = model.trainable_parameters()
    optimizer = AdamW.from_config(params, config)
    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size) if len(train_set) else 0
    total_steps = epochs * steps_per_epoch
    trace = _StageTrace([], [])
    if not steps_per_epoch:
        logger.warning("stage %d has no training samples; skipping", stage)
        return trace
    step = 0
    for epoch in range(epochs):
        started = time.perf_counter()
        rng = Rng(tc.seed, f"trainer/shuffle/stage{stage}/epoch{epoch}")
        epoch_steps: List[StepRecord] = []
        for batch in batches(train_set.samples, tc.batch_size, rng):
            lr = cosine_lr(step, total_steps, tc.lr)
            optimizer.zero_grad()
            loss = model.loss_total(batch, training=True)
            loss.total.backward()
            check_finite(loss, params, step)
            grad_norm = clip_gradients(params, tc.grad_clip)
            optimizer.step(lr)
            check_finite(loss, params, step)
            parts = loss.components()
            mixtures = [o.mixture for o in loss.outputs]
            record = StepRecord(step=step, stage=stage, lr=lr, total=parts["total"],
                                next_token=parts["next_token"], indep_ent=parts["indep_ent"],
                                dep_ent=parts["dep_ent"], dep_div=parts["dep_div"], grad_norm=grad_norm,
                                active_params=float(np.mean([model.active_params(m) for m in mixtures])),
                                weak_evaluations=sum(len(d.active) for m in mixtures for d in m.decisions))
            logger.debug("stage %d step %d: loss %.4f (next-token %.4f) lr %.3e", stage, step,
                         record.total, record.next_token, lr)
            epoch_steps.append(record)
            step += 1
        eval_loss = evaluate(model, eval_set, threads).loss if eval_set is not None and len(eval_set) else None
        train_loss = float(np.mean([s.next_token for s in epoch_steps]))
        train_total = float(np.mean([s.total for s in epoch_steps]))
        trace.epochs.append(EpochRecord(epoch=epoch, stage=stage, train_loss=train_loss, train_total=train_total,
                                        eval_loss=eval_loss, lr_end=epoch_steps[-1].lr))
        trace.steps.extend(epoch_steps)
        logger.info("stage %d epoch %d/%d: train %.4f eval %s (%.1fs)", stage, epoch + 1, epochs, train_loss,
                    "n/a" if eval_loss is None else f"{eval_loss:.4f}", time.perf_counter() - started)
    return trace


def _report(model: MoweModel, config: MoweConfig, traces: Sequence[_StageTrace], eval_set: Optional[Dataset],
            threads: int, started: float, command: str) -> RunReport:
    final_eval = evaluate(model, eval_set, threads) if eval_set is not None else EvalReport()
    return RunReport(
        command=command,
        seed=config.trainer.seed,
        router_mode=config.routing.mode,
        regime=config.trainer.regime,
        config=config.echo(),
        steps=[s for trace in traces for s in trace.steps],
        epochs=[e for trace in traces for e in trace.epochs],
        final_eval=final_eval,
        trainable_params=sum(t.size for t in model.trainable_parameters().values()),
        encoder_params=count_params(model.pool),
        wall_clock_seconds=time.perf_counter() - started,
    )


def train(config: MoweConfig, train_set: Dataset, model: MoweModel, eval_set: Optional[Dataset] = None,
          threads: Optional[int] = None, command: str = "train") -> RunReport:
    """Single-stage multi-task training over every task of ``train_set``."""
    started = time.perf_counter()
    threads = threads or config.trainer.threads
    trace = _run_stage(model, config, train_set, eval_set, config.trainer.epochs, 1, threads)
    return _report(model, config, [trace], eval_set, threads, started, command)


def train_two_stage(config: MoweConfig, train_set: Dataset, model: MoweModel, eval_set: Optional[Dataset] = None,
                    threads: Optional[int] = None, command: str = "train") -> RunReport:
    """Stage 1 on the designated task alone, stage 2 on all tasks; each stage gets a fresh optimiser and schedule."""
    started = time.perf_counter()
    threads = threads or config.trainer.threads
    tc = config.trainer
    try:
        first = train_set.task_by_name(tc.stage1_task)
    except ArgumentError as exc:
        raise ConfigError(f"unknown stage-1 task '{tc.stage1_task}'", location="trainer.stage1_task",
                          hint=f"choose one of {train_set.task_names()}") from exc
    stage1_epochs = tc.epochs if tc.stage1_epochs is None else tc.stage1_epochs
    stage1_eval = eval_set.subset([first.task_id]) if eval_set is not None else None
    trace1 = _run_stage(model, config, train_set.subset([first.task_id]), stage1_eval, stage1_epochs, 1, threads)
    trace2 = _run_stage(model, config, train_set, eval_set, tc.epochs, 2, threads)
    return _report(model, config, [trace1, trace2], eval_set, threads, started, command)


def run_training(config: MoweConfig, train_set: Dataset, model: MoweModel, eval_set: Optional[Dataset] = None,
                 threads: Optional[int] = None, command: str = "train") -> RunReport:
    if config.trainer.regime == "two-stage":
        return train_two_stage(config, train_set, model, eval_set, threads, command)
    return train(config, train_set, model, eval_set, threads, command)


# ---------------------------------------------------------------- evaluation

@dataclass
class _SampleResult:
    sample_id: str
    task_id: int
    loss: float
    correct: int
    n_tokens: int
    selected: List[int]
    gates: List[List[float]]
    active_params: int
    encoders_evaluated: int


def _evaluate_sample(model: MoweModel, sample: FeatureSequence) -> _SampleResult:
    # grad mode is thread-local, so each worker disables it itself
    with no_grad():
        out = model.forward(sample, training=False)
    hits = out.predictions == np.asarray(out.target_ids)
    decisions = out.mixture.decisions
    return _SampleResult(
        sample_id=sample.sample_id,
        task_id=sample.task_id,
        loss=out.next_token.item(),
        correct=int(hits.sum()),
        n_tokens=int(hits.size),
        selected=[d.selected for d in decisions],
        gates=[d.gates.data.tolist() for d in decisions],
        active_params=model.active_params(out.mixture),
        encoders_evaluated=1 + len(out.mixture.active_encoders()),
    )


def evaluate(model: MoweModel, dataset: Optional[Dataset], threads: int = 1) -> EvalReport:
    """Eval-mode losses, token accuracy per task and routing proportions; results do not depend on ``threads``."""
    if dataset is None or not len(dataset):
        return EvalReport()
    samples = dataset.samples
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _evaluate_sample(model, s), samples))
    else:
        results = [_evaluate_sample(model, s) for s in samples]

    names = {task.task_id: task.name for task in dataset.tasks}
    kinds = model.routers.kinds
    router_names = model.routers.names
    pool_size = model.pool.size

    tasks: Dict[str, TaskMetrics] = {}
    proportions: Dict[str, Dict[str, List[float]]] = {name: {} for name in router_names}
    for task_id, task_name in names.items():
        rows = [r for r in results if r.task_id == task_id]
        if not rows:
            continue
        n_tokens = sum(r.n_tokens for r in rows)
        tasks[task_name] = TaskMetrics(
            task=task_name,
            samples=len(rows),
            loss=float(np.mean([r.loss for r in rows])),
            token_accuracy=sum(r.correct for r in rows) / n_tokens,
            sequence_accuracy=float(np.mean([r.correct == r.n_tokens for r in rows])),
        )
        for m, router in enumerate(router_names):
            counts = np.bincount([r.selected[m] for r in rows], minlength=pool_size)
            proportions[router][task_name] = (counts / len(rows)).tolist()

    records = [
        RoutingRecord(
            sample_id=r.sample_id,
            task=names[r.task_id],
            dep_selected=[k for k, kind in zip(r.selected, kinds) if kind == "dep"],
            indep_selected=[k for k, kind in zip(r.selected, kinds) if kind == "indep"],
            gates=r.gates,
            active_params=r.active_params,
        )
        for r in results
    ]
    report = EvalReport(
        loss=float(np.mean([r.loss for r in results])),
        token_accuracy=sum(r.correct for r in results) / sum(r.n_tokens for r in results),
        tasks=tasks,
        routing_proportions=proportions,
        routing=records,
        active_params_mean=float(np.mean([r.active_params for r in results])),
        active_params_max=max(r.active_params for r in results),
        max_encoders_evaluated=max(r.encoders_evaluated for r in results),
    )
    logger.info("eval: loss %.4f token accuracy %.3f over %d samples", report.loss, report.token_accuracy,
                len(results))
    return report


def overall_proportions(report: EvalReport, router: str) -> List[float]:
    """Selection proportions of one router pooled over every task, weighted by task size."""
    table = report.routing_proportions.get(router, {})
    total = sum(report.tasks[t].samples for t in table)
    if not total:
        return []
    mixed = sum(np.asarray(row) * report.tasks[t].samples for t, row in table.items())
    return (mixed / total).tolist()


# ---------------------------------------------------------------- experiments

def ablation_pool_size(mode: str) -> int:
    """Two weak encoders for one mixture, four for two mixtures."""
    return {0: 0, 1: 2, 2: 4}[len(mixture_kinds(mode))]


def ablation_config(config: MoweConfig, mode: str) -> MoweConfig:
    pool = ablation_pool_size(mode) or config.encoders.pool_size
    return config.override({
        "routing.mode": mode,
        "encoders.pool_size": pool,
        "routing.prior_index": min(config.routing.prior_index, pool - 1),
    })


def run_ablation_matrix(config: MoweConfig, train_set: Dataset, eval_set: Optional[Dataset] = None,
                        threads: Optional[int] = None,
                        modes: Sequence[str] = ROUTER_MODES) -> Tuple[List[AblationRow], Dict[str, RunReport]]:
    rows: List[AblationRow] = []
    reports: Dict[str, RunReport] = {}
    for mode in modes:
        mode_config = ablation_config(config, mode)
        logger.info("ablation: router mode %s", mode)
        model = build_model(mode_config)
        report = run_training(mode_config, train_set, model, eval_set, threads, command="ablate")
        final = report.final_eval
        # one tuple per sample, one entry per indep router
        indep = [tuple(r.indep_selected) for r in final.routing if r.indep_selected]
        fixed = list(indep[0]) if indep and len(set(indep)) == 1 else None
        rows.append(AblationRow(
            router_mode=mode,
            pool_size=model.pool.size,
            n_mixtures=mode_config.n_mixtures,
            final_train_loss=report.final_train_loss,
            final_eval_loss=final.loss,
            token_accuracy=final.token_accuracy,
            active_params_mean=final.active_params_mean,
            indep_fixed_encoder=fixed[0] if fixed and len(fixed) == 1 else None,
            indep_fixed_encoders=fixed,
            wall_clock_seconds=report.wall_clock_seconds,
        ))
        reports[mode] = report
    return rows, reports


def run_capacity_comparison(config: MoweConfig, train_set: Dataset, eval_set: Optional[Dataset] = None,
                            seeds: Sequence[int] = (0, 1, 2), threads: Optional[int] = None) -> CapacityComparison:
    """MoWE-enabled training against the base-encoder-only baseline over several seeds."""
    mode = config.routing.mode if config.routing.mode != "off" else "indep+dep"
    result = CapacityComparison(seeds=list(seeds), mowe_mode=mode, mowe_train_loss=[], baseline_train_loss=[])
    for seed in seeds:
        for label, run_mode in (("mowe", mode), ("baseline", "off")):
            run_config = config.override({"routing.mode": run_mode, "trainer.seed": seed})
            report = run_training(run_config, train_set, build_model(run_config), eval_set, threads,
                                  command="compare-capacity")
            getattr(result, f"{label}_train_loss").append(report.final_train_loss)
            getattr(result, f"{label}_eval_loss").append(report.final_eval.loss)
        logger.info("capacity seed %d: mowe %.4f baseline %.4f", seed, result.mowe_train_loss[-1],
                    result.baseline_train_loss[-1])
    return result


def diversity_study_config(config: MoweConfig) -> MoweConfig:
    """
    One dep router over two weak encoders on the degenerate task set, with the
    routing losses on the router softmax at full weight. Every task shares one
    center there, so any split of the batch comes from the diversity term.
    """
    pool = ablation_pool_size("dep")
    return config.override({
        "data.degenerate": True,
        "routing.mode": "dep",
        "encoders.pool_size": pool,
        "routing.prior_index": min(config.routing.prior_index, pool - 1),
        "routing.loss_target": "probs",
        "routing.loss_weight": 1.0,
    })


def mean_gate(report: EvalReport, router: str) -> List[float]:
    """Eval gate vector of one router averaged over every routed sample."""
    if not report.routing:
        return []
    names = list(report.routing_proportions)
    index = names.index(router) if router in names else 0
    rows = [r.gates[index] for r in report.routing if len(r.gates) > index]
    return np.mean(np.asarray(rows, dtype=np.float64), axis=0).tolist() if rows else []


def run_diversity_study(config: MoweConfig, train_set: Optional[Dataset] = None, eval_set: Optional[Dataset] = None,
                        threads: Optional[int] = None) -> DiversityStudy:
    """
    Train the study router with and without the diversity term and compare
    the entropy of the mean eval gate. Without a dataset the degenerate tasks
    are generated from the study config.
    """
    study_config = diversity_study_config(config)
    if train_set is None:
        data = generate_from_config(study_config.data, study_config.trainer.seed)
        train_set, eval_set = split(data, study_config.data.train_fraction, study_config.trainer.seed)
    probe_set = eval_set if eval_set is not None and len(eval_set) else train_set
    arms: Dict[bool, Tuple[float, float, List[float], List[float]]] = {}
    for with_div in (True, False):
        run_config = study_config.override({"routing.dep_diversity": with_div})
        model = build_model(run_config)
        run_training(run_config, train_set, model, None, threads, command="diversity")
        report = evaluate(model, probe_set, threads or run_config.trainer.threads)
        gate = mean_gate(report, "dep")
        proportions = overall_proportions(report, "dep")
        arms[with_div] = (selection_entropy(gate), selection_entropy(proportions), gate, proportions)
        logger.info("diversity %s: mean-gate entropy %.4f, selection %s", "on" if with_div else "off",
                    arms[with_div][0], [round(p, 3) for p in proportions])
    pool = study_config.encoders.pool_size
    return DiversityStudy(
        pool_size=pool,
        max_entropy=max_entropy(pool),
        loss_target=study_config.routing.loss_target,
        with_diversity=arms[True][0],
        without_diversity=arms[False][0],
        with_selection_entropy=arms[True][1],
        without_selection_entropy=arms[False][1],
        with_mean_gate=arms[True][2],
        without_mean_gate=arms[False][2],
        with_proportions=arms[True][3],
        without_proportions=arms[False][3],
    )


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: Path, model: MoweModel) -> Path:
    """
    Layout (little-endian): magic, version u32, config-JSON length u32,
    config JSON, tensor count u32, then per tensor: name length u16, UTF-8
    name, ndim u32, dims u32 each, float64 values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_bytes = json.dumps(model.config.echo(), sort_keys=True).encode("utf-8")
    params = model.parameters()
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_bytes)), config_bytes,
              struct.pack("<I", len(params))]
    for name, t in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info("saved checkpoint with %d tensors to %s", len(params), path)
    return path


class _Reader:
    def __init__(self, payload: bytes, source: Path):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise FormatError(f"checkpoint {self.source} is truncated", {"offset": self.offset})
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path) -> MoweModel:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    magic, version, config_len = _CKPT_HEADER.unpack(reader.take(_CKPT_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", {"expected": CHECKPOINT_VERSION})
    try:
        config = config_from_dict(json.loads(reader.take(config_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} has an unreadable config block") from exc

    model = build_model(config)
    params = model.parameters()
    (count,) = reader.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint {path} has a tensor name that is not UTF-8") from exc
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}I")
        values = np.frombuffer(reader.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8")
        if name not in params:
            raise FormatError(f"checkpoint tensor '{name}' does not belong to the configured model")
        if tuple(shape) != params[name].shape:
            raise FormatError(f"checkpoint tensor '{name}' has shape {tuple(shape)}, model expects "
                              f"{params[name].shape}")
        params[name].data = values.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = [name for name in params if name not in seen]
    if missing:
        raise FormatError("checkpoint is missing tensors", {"missing": missing[:10]})
    if reader.offset != len(reader.payload):
        raise FormatError(f"checkpoint {path} has trailing bytes")
    return model
