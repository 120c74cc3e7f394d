import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from mowe.errors import ConfigError

load_dotenv()


class Settings:
    # Process configuration
    CONFIG_PATH: str = os.getenv("MOWE_CONFIG", "")
    RUNS_DIR: str = os.getenv("MOWE_RUNS_DIR", "./runs")
    LOG_LEVEL: str = os.getenv("MOWE_LOG_LEVEL", "INFO")
    THREADS: int = int(os.getenv("MOWE_THREADS", "1"))


settings = Settings()


ROUTER_MODES = ("off", "indep", "dep", "indep-x2", "dep-x2", "indep+dep")
_MODE_ALIASES = {
    "indep×2": "indep-x2", "indepx2": "indep-x2", "indep x2": "indep-x2", "indep x 2": "indep-x2",
    "dep×2": "dep-x2", "depx2": "dep-x2", "dep x2": "dep-x2", "dep x 2": "dep-x2",
    "indep,dep": "indep+dep", "indep, dep": "indep+dep", "mowe": "indep+dep",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    seq_len: int = Field(128, ge=1, description="frames per sample (fixed length S)")
    d_in: int = Field(16, ge=1, description="feature width of the synthetic audio")
    n_tasks: int = Field(5, ge=1, le=8, description="number of synthetic tasks")
    samples_per_task: int = Field(64, ge=1, description="samples generated per task")
    noise_scale: float = Field(0.5, ge=0.0, description="per-frame Gaussian noise std")
    n_levels: int = Field(4, ge=1, description="response levels encoded in the target tokens")
    level_step: float = Field(0.5, gt=0.0, description="bucket width of the response level axis")
    utterance_scale: float = Field(2.0, ge=0.0, description="per-sample level offset std, in units of noise_scale")
    instruction_len: int = Field(4, ge=1, description="instruction tokens per sample")
    train_fraction: float = Field(0.8, ge=0.0, le=1.0, description="stratified train share")
    degenerate: bool = Field(False, description="all tasks share one center and pattern")


class EncoderConfig(_Section):
    d_base: int = Field(64, ge=1, description="base encoder output width")
    base_hidden: int = Field(96, ge=1, description="base encoder hidden width")
    base_layers: int = Field(2, ge=1, description="per-frame linear+GELU blocks in the base encoder")
    d_weak: int = Field(16, ge=1, description="common weak encoder output width")
    weak_hidden: int = Field(16, ge=1, description="weak encoder hidden width")
    weak_layers: int = Field(1, ge=1, description="per-frame linear+GELU blocks in a weak encoder")
    pool_size: int = Field(4, ge=1, description="number of weak encoders M")
    weak_native_dims: Optional[List[int]] = Field(
        None, description="native widths cycled over the pool; interpolated to d_weak")
    temporal_kernel: int = Field(3, ge=1, description="odd kernel of the temporal mixing conv")
    min_capacity_ratio: float = Field(10.0, ge=0.0, description="required base:weak parameter ratio")

    @field_validator("temporal_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("temporal_kernel must be odd so the sequence length is preserved")
        return value

    @field_validator("weak_native_dims")
    @classmethod
    def _positive_dims(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and (not value or min(value) < 1):
            raise ValueError("weak_native_dims needs at least one positive width")
        return value

    def native_dims(self, pool_size: Optional[int] = None) -> List[int]:
        size = pool_size or self.pool_size
        if not self.weak_native_dims:
            return [self.d_weak] * size
        return [self.weak_native_dims[k % len(self.weak_native_dims)] for k in range(size)]


class RoutingConfig(_Section):
    mode: Literal["off", "indep", "dep", "indep-x2", "dep-x2", "indep+dep"] = Field(
        "indep+dep", description="router layout: off | indep | dep | indep-x2 | dep-x2 | indep+dep")
    smoothing: bool = Field(True, description="training-time gate smoothing r <- 0.9r + 0.1eps")
    epsilon_scale: float = Field(0.1, ge=0.0, description="eps = epsilon_scale / M")
    loss_weight: float = Field(0.1, ge=0.0, description="weight of the routing loss in the objective")
    dep_diversity: bool = Field(True, description="include the batch diversity term")
    indep_init: Literal["prior", "gaussian"] = Field("prior", description="w_indep initialisation")
    prior_index: int = Field(0, ge=0, description="encoder favoured by the prior init")
    dep_init_std: float = Field(0.1, ge=0.0, description="std of the W_dep initialisation")
    loss_target: Literal["gates", "probs"] = Field(
        "gates", description="routing losses read the KeepTop1 gates or the router softmax")

    @field_validator("mode", mode="before")
    @classmethod
    def _normalise_mode(cls, value: Any) -> Any:
        if isinstance(value, str):
            key = value.strip().lower()
            return _MODE_ALIASES.get(key, key)
        return value


class PipelineConfig(_Section):
    adapter: Literal["grouped-linear-gelu", "strided-conv"] = Field(
        "grouped-linear-gelu", description="adapter variant")
    adapter_tokens: int = Field(100, ge=1, description="audio tokens T_a for the grouped adapter")
    conv_kernel: int = Field(8, ge=1, description="strided-conv adapter kernel")
    conv_stride: int = Field(8, ge=1, description="strided-conv adapter stride")
    d_adapter: int = Field(64, ge=1, description="adapter output width")
    d_model: int = Field(64, ge=1, description="decoder width")
    n_layers: int = Field(2, ge=1, description="decoder layers")
    n_heads: int = Field(4, ge=1, description="attention heads")
    d_ff: int = Field(128, ge=1, description="decoder feed-forward width")
    vocab_size: int = Field(256, ge=2, description="decoder vocabulary")
    lora_rank: int = Field(4, ge=1, description="LoRA rank r")
    lora_alpha: float = Field(8.0, gt=0.0, description="LoRA scaling alpha")

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "PipelineConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self


class TrainerConfig(_Section):
    batch_size: int = Field(32, ge=1, description="samples per optimizer step")
    epochs: int = Field(5, ge=0, description="passes over the training split")
    lr: float = Field(5e-5, gt=0.0, description="peak learning rate (cosine to 0)")
    beta1: float = Field(0.9, ge=0.0, lt=1.0, description="AdamW beta1")
    beta2: float = Field(0.999, ge=0.0, lt=1.0, description="AdamW beta2")
    adam_eps: float = Field(1e-8, gt=0.0, description="AdamW epsilon")
    weight_decay: float = Field(0.01, ge=0.0, description="decoupled weight decay")
    grad_clip: float = Field(1.0, ge=0.0, description="global gradient norm clip (0 disables)")
    regime: Literal["single-stage", "two-stage"] = Field("single-stage", description="training regime")
    stage1_task: str = Field("asr", description="task trained alone in stage 1 of two-stage runs")
    stage1_epochs: Optional[int] = Field(None, ge=0, description="stage-1 epochs (defaults to epochs)")
    seed: int = Field(0, ge=0, description="root seed fanned out to labelled streams")
    threads: int = Field(default_factory=lambda: settings.THREADS, ge=1,
                         description="evaluation workers (default MOWE_THREADS); 1 is deterministic")


class MoweConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    encoders: EncoderConfig = Field(default_factory=EncoderConfig)
    routing: RoutingConfig = Field(default_factory=RoutingConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)

    @model_validator(mode="after")
    def _cross_checks(self) -> "MoweConfig":
        needed = required_vocab(self.data)
        if self.pipeline.vocab_size < needed:
            raise ValueError(
                f"pipeline.vocab_size={self.pipeline.vocab_size} cannot hold the {needed} "
                f"synthetic token ids; raise vocab_size or lower data.n_tasks/instruction_len/n_levels")
        if self.routing.prior_index >= self.encoders.pool_size:
            raise ValueError(
                f"routing.prior_index={self.routing.prior_index} outside a pool of {self.encoders.pool_size}")
        return self

    @property
    def n_mixtures(self) -> int:
        return len(mixture_kinds(self.routing.mode))

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def override(self, updates: Mapping[str, Any]) -> "MoweConfig":
        """Return a validated copy with dotted-key updates applied."""
        raw = self.model_dump()
        for key, value in updates.items():
            section, _, name = key.partition(".")
            if section not in raw or not name:
                raise ConfigError("unknown configuration key", location=key,
                                  hint="use section.key with sections data/encoders/routing/pipeline/trainer")
            raw[section][name] = value
        return config_from_dict(raw)


def mixture_kinds(mode: str) -> List[str]:
    """Router kinds in z_MoWE concatenation order."""
    return {
        "off": [],
        "indep": ["indep"],
        "dep": ["dep"],
        "indep-x2": ["indep", "indep"],
        "dep-x2": ["dep", "dep"],
        "indep+dep": ["dep", "indep"],
    }[mode]


def required_vocab(data: DataConfig) -> int:
    # eos, instruction ids, answer ids, level ids
    return 1 + data.n_tasks * data.instruction_len + data.n_tasks + data.n_levels


def _location(error: Mapping[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def config_from_dict(raw: Mapping[str, Any]) -> MoweConfig:
    try:
        return MoweConfig.model_validate(dict(raw))
    except ValidationError as exc:
        first = exc.errors()[0]
        location = _location(first)
        if first.get("type") == "extra_forbidden":
            raise ConfigError("unknown key", location=location,
                              hint="run `config show-defaults` for the accepted keys") from exc
        raise ConfigError(first.get("msg", "invalid value"), location=location) from exc


def load_config(path: Optional[str] = None) -> MoweConfig:
    """Read a TOML config; falls back to MOWE_CONFIG, then to built-in defaults."""
    path = path or settings.CONFIG_PATH
    if not path:
        return MoweConfig()
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigError(f"config file not found: {file_path}", location=str(file_path))
    try:
        raw = tomllib.loads(file_path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", location=str(file_path)) from exc
    return config_from_dict(raw)


def parse_override(text: str) -> Dict[str, Any]:
    """Parse ``section.key=value``; the value is read as a TOML literal, else as a string."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"malformed override '{text}'", hint="expected section.key=value")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return {key.strip(): parsed}


def apply_overrides(config: MoweConfig, overrides: Iterable[str]) -> MoweConfig:
    updates: Dict[str, Any] = {}
    for item in overrides:
        updates.update(parse_override(item))
    return config.override(updates) if updates else config


def _toml_literal(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_literal(v) for v in value) + "]"
    raise TypeError(f"cannot render {value!r} as TOML")


def config_toml(config: MoweConfig, comments: bool = False) -> str:
    """Render a config as TOML that ``load_config`` reads back to an equal config."""
    lines: List[str] = []
    for section_name in MoweConfig.model_fields:
        section_model = getattr(config, section_name)
        lines.append(f"[{section_name}]")
        for name, info in type(section_model).model_fields.items():
            value = getattr(section_model, name)
            if comments and info.description:
                lines.append(f"# {info.description}")
            if value is None:
                lines.append(f"# {name} = (unset)")
            else:
                lines.append(f"{name} = {_toml_literal(value)}")
        lines.append("")
    return "\n".join(lines)


def defaults_toml() -> str:
    """Built-in defaults as a commented TOML document."""
    return config_toml(MoweConfig(), comments=True)


def toy_config(updates: Optional[Mapping[str, Any]] = None) -> MoweConfig:
    """Tiny dimensions for gradient checks and fast tests."""
    base = MoweConfig(
        data=DataConfig(seq_len=8, d_in=3, n_tasks=2, samples_per_task=4, noise_scale=0.1,
                        n_levels=2, instruction_len=2),
        encoders=EncoderConfig(d_base=5, base_hidden=6, base_layers=1, d_weak=2, weak_hidden=3,
                               weak_layers=1, pool_size=3, min_capacity_ratio=0.0),
        routing=RoutingConfig(),
        pipeline=PipelineConfig(adapter_tokens=4, d_adapter=6, d_model=8, n_layers=1, n_heads=2,
                                d_ff=8, vocab_size=12, lora_rank=2, lora_alpha=4.0),
        trainer=TrainerConfig(batch_size=2, epochs=1, lr=1e-2),
    )
    return base.override(updates) if updates else base
