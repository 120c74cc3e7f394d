from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator

PROPORTION_TOLERANCE = 1e-9


class StepRecord(BaseModel):
    step: int
    stage: int = 1
    lr: float
    total: float
    next_token: float
    indep_ent: float = 0.0
    dep_ent: float = 0.0
    dep_div: float = 0.0
    grad_norm: float = 0.0
    active_params: float = 0.0   # batch mean of encoder parameters evaluated per sample
    weak_evaluations: int = 0    # weak-encoder forward passes in the batch


class EpochRecord(BaseModel):
    epoch: int
    stage: int = 1
    train_loss: float                  # mean next-token loss over the epoch's steps
    train_total: float                 # same, including the weighted routing loss
    eval_loss: Optional[float] = None  # None when the eval split is empty
    lr_end: float = 0.0


class TaskMetrics(BaseModel):
    task: str
    samples: int
    loss: float
    token_accuracy: float
    sequence_accuracy: float


class RoutingRecord(BaseModel):
    sample_id: str
    task: str
    dep_selected: List[int] = Field(default_factory=list)    # one per dep router
    indep_selected: List[int] = Field(default_factory=list)  # one per indep router
    gates: List[List[float]] = Field(default_factory=list)   # per router, z_MoWE order
    active_params: int


def _check_proportions(value: Dict[str, Dict[str, List[float]]]) -> Dict[str, Dict[str, List[float]]]:
    for router, table in value.items():
        for task, row in table.items():
            if row and abs(sum(row) - 1.0) > PROPORTION_TOLERANCE:
                raise ValueError(f"routing proportions for {router}/{task} sum to {sum(row)!r}, not 1")
    return value


class EvalReport(BaseModel):
    loss: Optional[float] = None
    token_accuracy: Optional[float] = None
    tasks: Dict[str, TaskMetrics] = Field(default_factory=dict)
    # router name -> task -> fraction of samples per encoder
    routing_proportions: Dict[str, Dict[str, List[float]]] = Field(default_factory=dict)
    routing: List[RoutingRecord] = Field(default_factory=list)
    active_params_mean: float = 0.0
    active_params_max: int = 0
    max_encoders_evaluated: int = 0

    @field_validator("routing_proportions")
    @classmethod
    def _proportions_sum_to_one(cls, value):
        return _check_proportions(value)


class RunReport(BaseModel):
    command: str = "train"
    seed: int
    router_mode: str
    regime: str
    config: Dict[str, Any]
    steps: List[StepRecord] = Field(default_factory=list)
    epochs: List[EpochRecord] = Field(default_factory=list)
    final_eval: EvalReport = Field(default_factory=EvalReport)
    trainable_params: int = 0
    encoder_params: Dict[str, int] = Field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @property
    def routing_proportions(self) -> Dict[str, Dict[str, List[float]]]:
        return self.final_eval.routing_proportions

    @property
    def final_train_loss(self) -> Optional[float]:
        return self.epochs[-1].train_loss if self.epochs else None

    def deterministic_view(self) -> Dict[str, Any]:
        """Everything except wall-clock timing; equal for equal (config, seed) runs."""
        return self.model_dump(exclude={"wall_clock_seconds"})


class AblationRow(BaseModel):
    router_mode: str
    pool_size: int
    n_mixtures: int
    final_train_loss: Optional[float] = None
    final_eval_loss: Optional[float] = None
    token_accuracy: Optional[float] = None
    active_params_mean: float = 0.0
    indep_fixed_encoder: Optional[int] = None  # set when every sample used one indep encoder
    indep_fixed_encoders: Optional[List[int]] = None  # the shared choice of every indep router, in order
    wall_clock_seconds: float = 0.0


class CapacityComparison(BaseModel):
    seeds: List[int]
    mowe_mode: str
    mowe_train_loss: List[float]
    baseline_train_loss: List[float]
    mowe_eval_loss: List[Optional[float]] = Field(default_factory=list)
    baseline_eval_loss: List[Optional[float]] = Field(default_factory=list)

    @property
    def mowe_mean(self) -> float:
        return sum(self.mowe_train_loss) / len(self.mowe_train_loss)

    @property
    def baseline_mean(self) -> float:
        return sum(self.baseline_train_loss) / len(self.baseline_train_loss)


class DiversityStudy(BaseModel):
    pool_size: int
    max_entropy: float
    loss_target: str = "probs"
    with_diversity: float     # entropy of the mean eval dep gate
    without_diversity: float
    with_selection_entropy: float = 0.0
    without_selection_entropy: float = 0.0
    with_mean_gate: List[float] = Field(default_factory=list)
    without_mean_gate: List[float] = Field(default_factory=list)
    with_proportions: List[float]
    without_proportions: List[float]
