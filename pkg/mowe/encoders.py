import logging
import threading
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional

import numpy as np

from mowe.config import EncoderConfig
from mowe.errors import ConfigError, DimensionError, EncoderIndexError
from mowe.numerics import Rng, Tensor, conv1d, gelu, linear, linear_interpolate_features, parameter
from mowe.synthdata import FeatureSequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    kind: Literal["base", "weak"]
    d_in: int
    d_out: int
    hidden: int
    layers: int
    d_native: int
    temporal_kernel: int = 3


class Encoder:
    """
    Per-frame (linear -> GELU) blocks, one same-length temporal convolution,
    and an output projection to ``d_native``; rows are interpolated to
    ``d_out`` when the two widths differ.
    """

    def __init__(self, spec: EncoderSpec, rng: Optional[Rng] = None, zero: bool = False):
        self.spec = spec
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = rng or Rng(0, f"encoder/{spec.name}")

        def add(name: str, shape, fan_in: int) -> None:
            data = np.zeros(shape) if zero else rng.normal(shape, std=1.0 / np.sqrt(fan_in))
            self.params[name] = parameter(data, name=f"{spec.name}.{name}")

        def add_bias(name: str, width: int) -> None:
            self.params[name] = parameter(np.zeros(width), name=f"{spec.name}.{name}")

        add("in.w", (spec.d_in, spec.hidden), spec.d_in)
        add_bias("in.b", spec.hidden)
        for i in range(1, spec.layers):
            add(f"block{i}.w", (spec.hidden, spec.hidden), spec.hidden)
            add_bias(f"block{i}.b", spec.hidden)
        k = spec.temporal_kernel
        add("temporal.w", (k * spec.hidden, spec.hidden), k * spec.hidden)
        add_bias("temporal.b", spec.hidden)
        add("out.w", (spec.hidden, spec.d_native), spec.hidden)
        add_bias("out.b", spec.d_native)

    def forward(self, features: Tensor) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.spec.d_in:
            raise DimensionError(f"encode[{self.spec.name}]", features.shape, (None, self.spec.d_in))
        p = self.params
        h = gelu(linear(features, p["in.w"], p["in.b"]))
        for i in range(1, self.spec.layers):
            h = gelu(linear(h, p[f"block{i}.w"], p[f"block{i}.b"]))
        half = self.spec.temporal_kernel // 2
        h = gelu(conv1d(h, p["temporal.w"], p["temporal.b"], self.spec.temporal_kernel, 1, half, half))
        out = linear(h, p["out.w"], p["out.b"])
        if self.spec.d_native != self.spec.d_out:
            out = linear_interpolate_features(out, self.spec.d_out)
        return out

    def count_params(self) -> int:
        return sum(t.size for t in self.params.values())


class EncoderPool:
    """The base encoder plus an index-addressable list of weak encoders."""

    def __init__(self, base: Encoder, weak: List[Encoder]):
        self.base = base
        self.weak = list(weak)
        self.evaluations: Counter = Counter()
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return len(self.weak)

    @property
    def d_base(self) -> int:
        return self.base.spec.d_out

    @property
    def d_weak(self) -> int:
        return self.weak[0].spec.d_out if self.weak else 0

    def _record(self, key: str) -> None:
        with self._lock:
            self.evaluations[key] += 1

    def reset_counters(self) -> None:
        with self._lock:
            self.evaluations.clear()

    def encode_base(self, sample: FeatureSequence) -> Tensor:
        self._record("base")
        return self.base.forward(sample.features)

    def encode_weak(self, k: int, sample: FeatureSequence) -> Tensor:
        if not 0 <= k < len(self.weak):
            raise EncoderIndexError(f"weak encoder index {k} out of range for a pool of {len(self.weak)}",
                                    {"index": k, "pool_size": len(self.weak)})
        self._record(f"weak{k}")
        return self.weak[k].forward(sample.features)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in self.base.params.items():
            named[f"encoders.base.{name}"] = t
        for k, encoder in enumerate(self.weak):
            for name, t in encoder.params.items():
                named[f"encoders.weak{k}.{name}"] = t
        return named

    def weak_evaluation_count(self) -> int:
        return sum(v for key, v in self.evaluations.items() if key.startswith("weak"))


def count_params(pool: EncoderPool) -> Dict[str, int]:
    """Trainable parameter totals per encoder, plus the pool total."""
    counts = {"base": pool.base.count_params()}
    for k, encoder in enumerate(pool.weak):
        counts[f"weak{k}"] = encoder.count_params()
    counts["total"] = sum(counts.values())
    return counts


def base_spec(config: EncoderConfig, d_in: int) -> EncoderSpec:
    return EncoderSpec("base", "base", d_in, config.d_base, config.base_hidden, config.base_layers,
                       config.d_base, config.temporal_kernel)


def weak_specs(config: EncoderConfig, d_in: int, pool_size: Optional[int] = None) -> List[EncoderSpec]:
    return [
        EncoderSpec(f"weak{k}", "weak", d_in, config.d_weak, config.weak_hidden, config.weak_layers,
                    d_native, config.temporal_kernel)
        for k, d_native in enumerate(config.native_dims(pool_size))
    ]


def build_pool(config: EncoderConfig, d_in: int, rng: Rng, pool_size: Optional[int] = None,
               zero: bool = False) -> EncoderPool:
    """Initialise the base encoder and ``pool_size`` weak encoders (0 builds no weak encoders)."""
    size = config.pool_size if pool_size is None else pool_size
    base = Encoder(base_spec(config, d_in), rng.child("base"), zero=zero)
    weak = [Encoder(spec, rng.child(spec.name), zero=zero) for spec in weak_specs(config, d_in, size)] if size else []
    pool = EncoderPool(base, weak)

    counts = count_params(pool)
    if weak and config.min_capacity_ratio > 0:
        largest = max(e.count_params() for e in weak)
        ratio = counts["base"] / largest
        if ratio < config.min_capacity_ratio:
            raise ConfigError(
                f"base encoder has only {ratio:.1f}x the parameters of the largest weak encoder",
                location="encoders.base_hidden",
                hint=f"widen the base encoder or shrink weak encoders (required ratio {config.min_capacity_ratio})")
    logger.debug("encoder pool parameter counts: %s", counts)
    return pool
