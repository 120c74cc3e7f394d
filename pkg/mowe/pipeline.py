"""
End-to-end forward pass: fused encoder embeddings, adapter, projection and
a tiny causal decoder whose base weights are frozen and whose attention
projections carry trainable LoRA factors.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from mowe.config import MoweConfig, PipelineConfig
from mowe.encoders import EncoderPool, build_pool
from mowe.errors import ArgumentError, ConfigError, DimensionError
from mowe.numerics import (
    Rng, Tensor, add, concat_feature, concat_sequence, conv1d, cross_entropy, embedding, gelu,
    layer_norm, linear, matmul, parameter, scale, slice_cols, slice_rows, softmax_rows, sum_tensors,
    tensor, transpose, unfold_frames,
)
from mowe.routing import MixtureOutput, RouterBank, RoutingLoss, build_routers, routing_loss
from mowe.synthdata import FeatureSequence

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- fusion

def fuse_embeddings(z_base: Tensor, z_mowe: Optional[Tensor]) -> Tensor:
    """Feature-axis concat; the sequence length never changes."""
    if z_mowe is None or z_mowe.shape[1] == 0:
        return z_base
    return concat_feature(z_base, z_mowe)


# ---------------------------------------------------------------- adapter

@dataclass(frozen=True)
class AdapterSpec:
    kind: Literal["grouped-linear-gelu", "strided-conv"]
    seq_len: int
    d_in: int
    d_out: int
    tokens: int = 100
    kernel: int = 8
    stride: int = 8

    @property
    def group(self) -> int:
        return math.ceil(self.seq_len / self.tokens)

    @property
    def out_tokens(self) -> int:
        if self.kind == "grouped-linear-gelu":
            return self.tokens
        return math.ceil(self.seq_len / self.stride)

    @property
    def window(self) -> int:
        return self.group if self.kind == "grouped-linear-gelu" else self.kernel

    @property
    def pad_end(self) -> int:
        if self.kind == "grouped-linear-gelu":
            return self.tokens * self.group - self.seq_len
        return max(0, (self.out_tokens - 1) * self.stride + self.kernel - self.seq_len)


def adapter_spec(config: PipelineConfig, seq_len: int, d_in: int) -> AdapterSpec:
    spec = AdapterSpec(config.adapter, seq_len, d_in, config.d_adapter, config.adapter_tokens,
                       config.conv_kernel, config.conv_stride)
    if spec.kind == "grouped-linear-gelu" and seq_len < spec.tokens:
        raise ConfigError(
            f"sequence length {seq_len} is shorter than the {spec.tokens} adapter tokens",
            location="pipeline.adapter_tokens",
            hint=f"set pipeline.adapter_tokens <= {seq_len} or use the strided-conv adapter")
    return spec


class Adapter:
    def __init__(self, spec: AdapterSpec, rng: Rng):
        self.spec = spec
        fan_in = spec.window * spec.d_in
        self.weight = parameter(rng.normal((fan_in, spec.d_out), std=1.0 / math.sqrt(fan_in)), name="adapter.w")
        self.bias = parameter(np.zeros(spec.d_out), name="adapter.b")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([("adapter.w", self.weight), ("adapter.b", self.bias)])


def adapt(z: Tensor, adapter: Adapter) -> Tensor:
    spec = adapter.spec
    if z.data.ndim != 2 or z.shape != (spec.seq_len, spec.d_in):
        raise DimensionError("adapt", z.shape, (spec.seq_len, spec.d_in))
    if spec.kind == "grouped-linear-gelu":
        frames = unfold_frames(z, spec.group, spec.group, 0, spec.pad_end)
        return gelu(linear(frames, adapter.weight, adapter.bias))
    return conv1d(z, adapter.weight, adapter.bias, spec.kernel, spec.stride, 0, spec.pad_end)


# ---------------------------------------------------------------- projection

class Projection:
    def __init__(self, d_in: int, d_out: int, rng: Optional[Rng] = None, identity: bool = False):
        if identity:
            if d_in != d_out:
                raise ArgumentError(f"identity projection needs a square map, got {d_in}x{d_out}")
            weight = np.eye(d_in)
        else:
            weight = (rng or Rng(0, "projection")).normal((d_in, d_out), std=1.0 / math.sqrt(d_in))
        self.weight = parameter(weight, name="projection.w")
        self.bias = parameter(np.zeros(d_out), name="projection.b")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([("projection.w", self.weight), ("projection.b", self.bias)])


def project(z: Tensor, projection: Projection) -> Tensor:
    return linear(z, projection.weight, projection.bias)


# ---------------------------------------------------------------- decoder

@dataclass(frozen=True)
class DecoderSpec:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.lora_rank < 1:
            raise ArgumentError("LoRA rank must be >= 1")
        if self.d_model % self.n_heads:
            raise ArgumentError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "DecoderSpec":
        return cls(config.vocab_size, config.d_model, config.n_layers, config.n_heads, config.d_ff,
                   config.lora_rank, config.lora_alpha)


class LoraLinear:
    """Frozen ``W`` plus a trainable low-rank update: y = xW + (alpha/r)(xA)B, B starting at zero."""

    def __init__(self, name: str, d_in: int, d_out: int, rank: int, alpha: float, rng: Rng):
        self.name = name
        self.weight = tensor(rng.normal((d_in, d_out), std=1.0 / math.sqrt(d_in)), name=f"{name}.w")
        self.lora_a = parameter(rng.normal((d_in, rank), std=1.0 / math.sqrt(d_in)), name=f"{name}.lora_a")
        self.lora_b = parameter(np.zeros((rank, d_out)), name=f"{name}.lora_b")
        self.scaling = alpha / rank

    def __call__(self, x: Tensor) -> Tensor:
        update = matmul(matmul(x, self.lora_a), self.lora_b)
        return add(matmul(x, self.weight), scale(update, self.scaling))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict([(f"{self.name}.w", self.weight), (f"{self.name}.lora_a", self.lora_a),
                            (f"{self.name}.lora_b", self.lora_b)])


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    freqs = np.exp(-math.log(10000.0) * (np.arange(0, width, 2) / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs[: width // 2])
    return table


class DecoderLayer:
    def __init__(self, index: int, spec: DecoderSpec, rng: Rng):
        prefix = f"decoder.layer{index}"
        d, r, a = spec.d_model, spec.lora_rank, spec.lora_alpha
        self.spec = spec
        self.ln1_g = tensor(np.ones(d), name=f"{prefix}.ln1.g")
        self.ln1_b = tensor(np.zeros(d), name=f"{prefix}.ln1.b")
        self.ln2_g = tensor(np.ones(d), name=f"{prefix}.ln2.g")
        self.ln2_b = tensor(np.zeros(d), name=f"{prefix}.ln2.b")
        self.q = LoraLinear(f"{prefix}.attn.q", d, d, r, a, rng.child("q"))
        self.k = LoraLinear(f"{prefix}.attn.k", d, d, r, a, rng.child("k"))
        self.v = LoraLinear(f"{prefix}.attn.v", d, d, r, a, rng.child("v"))
        self.o = LoraLinear(f"{prefix}.attn.o", d, d, r, a, rng.child("o"))
        mlp = rng.child("mlp")
        self.ff1_w = tensor(mlp.normal((d, spec.d_ff), std=1.0 / math.sqrt(d)), name=f"{prefix}.mlp.w1")
        self.ff1_b = tensor(np.zeros(spec.d_ff), name=f"{prefix}.mlp.b1")
        self.ff2_w = tensor(mlp.normal((spec.d_ff, d), std=1.0 / math.sqrt(spec.d_ff)), name=f"{prefix}.mlp.w2")
        self.ff2_b = tensor(np.zeros(d), name=f"{prefix}.mlp.b2")

    def attention(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        head = self.spec.d_model // self.spec.n_heads
        causal = np.tril(np.ones((length, length), dtype=bool))
        q, k, v = self.q(x), self.k(x), self.v(x)
        heads = []
        for h in range(self.spec.n_heads):
            cols = (h * head, (h + 1) * head)
            scores = scale(matmul(slice_cols(q, *cols), transpose(slice_cols(k, *cols))), 1.0 / math.sqrt(head))
            heads.append(matmul(softmax_rows(scores, causal), slice_cols(v, *cols)))
        merged = heads[0]
        for h in heads[1:]:
            merged = concat_feature(merged, h)
        return self.o(merged)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attention(layer_norm(x, self.ln1_g, self.ln1_b)))
        hidden = gelu(linear(layer_norm(x, self.ln2_g, self.ln2_b), self.ff1_w, self.ff1_b))
        return add(x, linear(hidden, self.ff2_w, self.ff2_b))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for t in (self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b):
            named[t.name] = t
        for proj in (self.q, self.k, self.v, self.o):
            named.update(proj.parameters())
        for t in (self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b):
            named[t.name] = t
        return named


class TinyDecoder:
    """Pre-LN causal transformer standing in for a pretrained language model."""

    def __init__(self, spec: DecoderSpec, rng: Rng):
        self.spec = spec
        self.embed = tensor(rng.child("embed").normal((spec.vocab_size, spec.d_model)), name="decoder.embed")
        self.layers = [DecoderLayer(i, spec, rng.child(f"layer{i}")) for i in range(spec.n_layers)]
        self.final_g = tensor(np.ones(spec.d_model), name="decoder.final.g")
        self.final_b = tensor(np.zeros(spec.d_model), name="decoder.final.b")
        self.unembed = tensor(rng.child("unembed").normal((spec.d_model, spec.vocab_size),
                                                          std=1.0 / math.sqrt(spec.d_model)),
                              name="decoder.unembed")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict([("decoder.embed", self.embed)])
        for layer in self.layers:
            named.update(layer.parameters())
        named["decoder.final.g"] = self.final_g
        named["decoder.final.b"] = self.final_b
        named["decoder.unembed"] = self.unembed
        return named

    def hidden(self, x: Tensor) -> Tensor:
        x = add(x, tensor(sinusoidal_positions(x.shape[0], self.spec.d_model)))
        for layer in self.layers:
            x = layer(x)
        return x

    def logits(self, hidden: Tensor) -> Tensor:
        return matmul(layer_norm(hidden, self.final_g, self.final_b), self.unembed)


@dataclass
class TokenBatch:
    """One sample's decoder input: audio tokens, instruction ids and the target ids fed back as inputs."""

    audio: Tensor
    instruction_ids: Sequence[int]
    target_ids: Sequence[int]

    @property
    def prompt_len(self) -> int:
        return self.audio.shape[0] + len(self.instruction_ids)

    @property
    def text_ids(self) -> List[int]:
        return list(self.instruction_ids) + list(self.target_ids[:-1])

    @property
    def length(self) -> int:
        return self.prompt_len + len(self.target_ids) - 1

    @property
    def loss_mask(self) -> np.ndarray:
        """True at the positions whose next-token logits score a target."""
        keep = np.zeros(self.length, dtype=bool)
        keep[self.prompt_len - 1:self.prompt_len - 1 + len(self.target_ids)] = True
        return keep


def assemble(tokens: TokenBatch, decoder: TinyDecoder) -> Tensor:
    if tokens.audio.shape[1] != decoder.spec.d_model:
        raise DimensionError("assemble", tokens.audio.shape, (None, decoder.spec.d_model))
    if not tokens.target_ids:
        raise ArgumentError("a token batch needs at least one target id")
    return concat_sequence(tokens.audio, embedding(decoder.embed, tokens.text_ids))


def decode_full(tokens: TokenBatch, decoder: TinyDecoder) -> Tensor:
    """Next-token logits at every input position."""
    return decoder.logits(decoder.hidden(assemble(tokens, decoder)))


def decode(tokens: TokenBatch, decoder: TinyDecoder) -> Tensor:
    """Next-token logits at the target positions only, one row per target id."""
    hidden = decoder.hidden(assemble(tokens, decoder))
    start = tokens.prompt_len - 1
    return decoder.logits(slice_rows(hidden, start, start + len(tokens.target_ids)))


# ---------------------------------------------------------------- full model

@dataclass
class SampleOutput:
    logits: Tensor
    next_token: Tensor
    mixture: MixtureOutput
    target_ids: Sequence[int]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)


@dataclass
class LossBreakdown:
    total: Tensor
    next_token: Tensor
    routing: RoutingLoss
    outputs: List[SampleOutput] = field(default_factory=list)

    def components(self) -> Dict[str, float]:
        return {
            "total": self.total.item(),
            "next_token": self.next_token.item(),
            "indep_ent": self.routing.indep_ent,
            "dep_ent": self.routing.dep_ent,
            "dep_div": self.routing.dep_div,
            "routing": self.routing.total.item(),
        }


class MoweModel:
    def __init__(self, config: MoweConfig, pool: EncoderPool, routers: RouterBank, adapter: Adapter,
                 projection: Projection, decoder: TinyDecoder):
        self.config = config
        self.pool = pool
        self.routers = routers
        self.adapter = adapter
        self.projection = projection
        self.decoder = decoder

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        named.update(self.pool.parameters())
        named.update(self.routers.parameters())
        named.update(self.adapter.parameters())
        named.update(self.projection.parameters())
        named.update(self.decoder.parameters())
        return named

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, t) for name, t in self.parameters().items() if t.requires_grad)

    def frozen_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, t) for name, t in self.parameters().items() if not t.requires_grad)

    def embed(self, sample: FeatureSequence, training: bool):
        z_base = self.pool.encode_base(sample)
        mixture = self.routers.forward(self.pool, z_base, sample, training, self.config.routing)
        return fuse_embeddings(z_base, mixture.z_mowe), mixture

    def forward(self, sample: FeatureSequence, training: bool = False) -> SampleOutput:
        z, mixture = self.embed(sample, training)
        audio = project(adapt(z, self.adapter), self.projection)
        tokens = TokenBatch(audio, sample.instruction_ids, sample.target_ids)
        logits = decode(tokens, self.decoder)
        return SampleOutput(logits, cross_entropy(logits, tokens.target_ids), mixture, tokens.target_ids)

    def loss_total(self, batch: Sequence[FeatureSequence], training: bool = True) -> LossBreakdown:
        """Mean next-token cross-entropy plus the weighted routing loss."""
        if not batch:
            raise ArgumentError("loss_total needs a non-empty batch")
        outputs = [self.forward(sample, training) for sample in batch]
        next_token = scale(sum_tensors([o.next_token for o in outputs]), 1.0 / len(outputs))
        routing = routing_loss([o.mixture for o in outputs], self.config.routing.dep_diversity,
                               self.config.routing.loss_target)
        total = add(next_token, scale(routing.total, self.config.routing.loss_weight))
        return LossBreakdown(total, next_token, routing, outputs)

    def active_params(self, mixture: MixtureOutput) -> int:
        """Encoder parameters evaluated for one sample: the base plus every weak encoder with nonzero weight."""
        count = self.pool.base.count_params()
        for k in mixture.active_encoders():
            count += self.pool.weak[k].count_params()
        return count


def build_model(config: MoweConfig, seed: Optional[int] = None) -> MoweModel:
    """Initialise every component from labelled streams of one root seed; mode "off" builds no weak encoders."""
    rng = Rng(config.trainer.seed if seed is None else seed, "model")
    n_mixtures = config.n_mixtures
    size = config.encoders.pool_size if n_mixtures else 0
    pool = build_pool(config.encoders, config.data.d_in, rng.child("encoders"), size)
    routers = build_routers(config.routing, pool.d_base, size, rng.child("routers")) if n_mixtures \
        else RouterBank("off", [])
    fused = pool.d_base + n_mixtures * pool.d_weak
    adapter = Adapter(adapter_spec(config.pipeline, config.data.seq_len, fused), rng.child("adapter"))
    projection = Projection(config.pipeline.d_adapter, config.pipeline.d_model, rng.child("projection"))
    decoder = TinyDecoder(DecoderSpec.from_config(config.pipeline), rng.child("decoder"))
    logger.debug("built model: mode=%s pool=%d fused width=%d", config.routing.mode, size, fused)
    return MoweModel(config, pool, routers, adapter, projection, decoder)
