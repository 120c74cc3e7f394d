"""
Top-1 routers over the weak-encoder pool and the routing losses.

A data-independent router keeps one learnable logit per weak encoder and
picks the same encoder for every sample. A data-dependent router scores
the encoders from the sequence-mean of the base embedding. Both return the
KeepTop1 gate vector; during training the data-dependent gate is smoothed
so every encoder carries a small nonzero weight.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from mowe.config import RoutingConfig, mixture_kinds
from mowe.encoders import EncoderPool
from mowe.errors import ArgumentError, DimensionError
from mowe.numerics import (
    Rng, Tensor, add_const, concat_feature, mask, matmul, mean_over_sequence, mul_scalar, parameter,
    reshape, scale, softmax, sum_all, sum_tensors, take, tensor, xlogx, zeros,
)
from mowe.synthdata import FeatureSequence

logger = logging.getLogger(__name__)

SMOOTH_KEEP = 0.9
SMOOTH_MIX = 0.1


@dataclass
class IndepRouterParams:
    w_indep: Tensor

    @property
    def pool_size(self) -> int:
        return self.w_indep.shape[0]


@dataclass
class DepRouterParams:
    W_dep: Tensor

    @property
    def pool_size(self) -> int:
        return self.W_dep.shape[1]

    @property
    def d_base(self) -> int:
        return self.W_dep.shape[0]


RouterParams = Union[IndepRouterParams, DepRouterParams]


@dataclass
class RouterDecision:
    gates: Tensor
    selected: int
    smoothed: bool = False
    epsilon: float = 0.0
    kind: str = "dep"
    probs: Optional[Tensor] = None  # router softmax before KeepTop1

    @property
    def active(self) -> List[int]:
        return [int(k) for k in np.flatnonzero(self.gates.data)]


@dataclass
class MixtureOutput:
    z_mowe: Optional[Tensor]
    mixtures: List[Tensor] = field(default_factory=list)
    decisions: List[RouterDecision] = field(default_factory=list)

    def _first(self, kind: str) -> Optional[int]:
        for i, decision in enumerate(self.decisions):
            if decision.kind == kind:
                return i
        return None

    @property
    def z_dep(self) -> Optional[Tensor]:
        i = self._first("dep")
        return None if i is None else self.mixtures[i]

    @property
    def z_indep(self) -> Optional[Tensor]:
        i = self._first("indep")
        return None if i is None else self.mixtures[i]

    def active_encoders(self) -> List[int]:
        """Distinct weak encoders evaluated for this sample."""
        return sorted({k for decision in self.decisions for k in decision.active})


# ---------------------------------------------------------------- gating

def keep_top1(v: Tensor) -> Tensor:
    """Zero every entry but the argmax; ties go to the lowest index."""
    if v.data.ndim != 1:
        raise DimensionError("keep_top1", v.shape, hint="expected a 1-D vector")
    if v.shape[0] == 0:
        raise ArgumentError("keep_top1 of an empty vector")
    keep = np.zeros(v.shape)
    keep[int(np.argmax(v.data))] = 1.0
    return mask(v, keep)


def smooth(r: Tensor, epsilon: float) -> Tensor:
    return add_const(scale(r, SMOOTH_KEEP), SMOOTH_MIX * epsilon)


def route_indep(params: IndepRouterParams) -> RouterDecision:
    probs = softmax(params.w_indep)
    return RouterDecision(keep_top1(probs), int(np.argmax(probs.data)), kind="indep", probs=probs)


def route_dep(params: DepRouterParams, z_base: Tensor, training: bool, epsilon_scale: float = 0.1,
              smoothing: bool = True) -> RouterDecision:
    if z_base.data.ndim != 2 or z_base.shape[1] != params.d_base:
        raise DimensionError("route_dep", z_base.shape, params.W_dep.shape,
                             hint="base embedding width must equal the W_dep row count")
    scores = reshape(matmul(mean_over_sequence(z_base), params.W_dep), (params.pool_size,))
    probs = softmax(scores)
    selected = int(np.argmax(probs.data))
    gates = keep_top1(probs)
    if training and smoothing:
        epsilon = epsilon_scale / params.pool_size
        return RouterDecision(smooth(gates, epsilon), selected, True, epsilon, "dep", probs)
    return RouterDecision(gates, selected, kind="dep", probs=probs)


def mix(pool: EncoderPool, decision: RouterDecision, sample: FeatureSequence) -> Tensor:
    """Gate-weighted sum of weak-encoder outputs; zero-weight encoders are never run."""
    if decision.gates.shape != (pool.size,):
        raise DimensionError("mix", decision.gates.shape, (pool.size,))
    terms = [mul_scalar(pool.encode_weak(k, sample), take(decision.gates, k)) for k in decision.active]
    if not terms:
        return zeros((sample.seq_len, pool.d_weak))
    return terms[0] if len(terms) == 1 else sum_tensors(terms)


def route(router: RouterParams, z_base: Tensor, training: bool, epsilon_scale: float = 0.1,
          smoothing: bool = True) -> RouterDecision:
    if isinstance(router, IndepRouterParams):
        return route_indep(router)
    return route_dep(router, z_base, training, epsilon_scale, smoothing)


def mixture_forward(routers: Sequence[RouterParams], pool: EncoderPool, z_base: Tensor,
                    sample: FeatureSequence, training: bool, epsilon_scale: float = 0.1,
                    smoothing: bool = True) -> MixtureOutput:
    """Route and mix once per router, concatenating mixtures along features in router order."""
    if not routers:
        return MixtureOutput(None)
    decisions = [route(r, z_base, training, epsilon_scale, smoothing) for r in routers]
    mixtures = [mix(pool, d, sample) for d in decisions]
    z_mowe = mixtures[0]
    for z in mixtures[1:]:
        z_mowe = concat_feature(z_mowe, z)
    return MixtureOutput(z_mowe, mixtures, decisions)


def mowe_forward(pool: EncoderPool, indep_params: IndepRouterParams, dep_params: DepRouterParams,
                 z_base: Tensor, sample: FeatureSequence, training: bool, epsilon_scale: float = 0.1,
                 smoothing: bool = True) -> MixtureOutput:
    return mixture_forward([dep_params, indep_params], pool, z_base, sample, training, epsilon_scale, smoothing)


# ---------------------------------------------------------------- router bank

class RouterBank:
    """The routers of one router mode, in z_MoWE concatenation order."""

    def __init__(self, mode: str, routers: Sequence[RouterParams]):
        self.mode = mode
        self.kinds = mixture_kinds(mode)
        self.routers = list(routers)
        if len(self.routers) != len(self.kinds):
            raise ArgumentError(f"router mode '{mode}' needs {len(self.kinds)} routers, got {len(self.routers)}")

    def __len__(self) -> int:
        return len(self.routers)

    @property
    def names(self) -> List[str]:
        """Report names: the kind alone, or kind plus ordinal when a kind repeats."""
        return router_names(self.kinds)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for i, router in enumerate(self.routers):
            if isinstance(router, IndepRouterParams):
                named[f"routers.{i}.w_indep"] = router.w_indep
            else:
                named[f"routers.{i}.W_dep"] = router.W_dep
        return named

    def forward(self, pool: EncoderPool, z_base: Tensor, sample: FeatureSequence, training: bool,
                config: RoutingConfig) -> MixtureOutput:
        return mixture_forward(self.routers, pool, z_base, sample, training, config.epsilon_scale,
                               config.smoothing)


def router_names(kinds: Sequence[str]) -> List[str]:
    names = []
    for i, kind in enumerate(kinds):
        if kinds.count(kind) == 1:
            names.append(kind)
        else:
            names.append(f"{kind}{kinds[:i].count(kind)}")
    return names


def prior_logits(pool_size: int, index: int) -> np.ndarray:
    logits = -np.ones(pool_size)
    logits[index] = 1.0
    return logits


def build_routers(config: RoutingConfig, d_base: int, pool_size: int, rng: Rng) -> RouterBank:
    """
    Initialise one router per mixture of ``config.mode``.

    Prior-initialised indep routers favour ``prior_index``; a second indep
    router in the same mode favours the next encoder so the two mixtures
    start on different encoders.
    """
    routers: List[RouterParams] = []
    n_indep = 0
    for i, kind in enumerate(mixture_kinds(config.mode)):
        stream = rng.child(f"router{i}")
        if kind == "indep":
            if config.indep_init == "prior":
                logits = prior_logits(pool_size, (config.prior_index + n_indep) % pool_size)
            else:
                logits = stream.normal((pool_size,))
            routers.append(IndepRouterParams(parameter(logits, name=f"routers.{i}.w_indep")))
            n_indep += 1
        else:
            weights = stream.normal((d_base, pool_size), std=config.dep_init_std)
            routers.append(DepRouterParams(parameter(weights, name=f"routers.{i}.W_dep")))
    return RouterBank(config.mode, routers)


# ---------------------------------------------------------------- losses

def _check_gates(op: str, gates: Sequence[Tensor]) -> None:
    if not gates:
        raise ArgumentError(f"{op} needs at least one gate vector")
    for g in gates:
        if g.shape != gates[0].shape or g.data.ndim != 1:
            raise DimensionError(op, gates[0].shape, g.shape)


def loss_indep_entropy(r_indep: Tensor) -> Tensor:
    return scale(sum_all(xlogx(r_indep)), -1.0)


def loss_dep_entropy(gates: Sequence[Tensor]) -> Tensor:
    _check_gates("loss_dep_entropy", gates)
    return scale(sum_tensors([sum_all(xlogx(g)) for g in gates]), -1.0 / len(gates))


def loss_dep_diversity(gates: Sequence[Tensor]) -> Tensor:
    _check_gates("loss_dep_diversity", gates)
    mean_gate = scale(sum_tensors(list(gates)), 1.0 / len(gates))
    return sum_all(xlogx(mean_gate))


def loss_mowe(r_indep: Tensor, dep_gates: Sequence[Tensor], include_diversity: bool = True) -> Tensor:
    dep = loss_dep_entropy(dep_gates)
    if include_diversity:
        dep = dep + loss_dep_diversity(dep_gates)
    return scale(loss_indep_entropy(r_indep) + dep, 0.5)


def _loss_vector(decision: RouterDecision, target: str) -> Tensor:
    if target == "probs" and decision.probs is not None:
        return decision.probs
    return decision.gates


@dataclass
class RoutingLoss:
    total: Tensor
    indep_ent: float = 0.0
    dep_ent: float = 0.0
    dep_div: float = 0.0


def routing_loss(batch: Sequence[MixtureOutput], include_diversity: bool = True,
                 target: str = "gates") -> RoutingLoss:
    """
    Mean over mixtures of each mixture's term: the indep entropy for an indep
    router, dep entropy plus (optionally) diversity for a dep router. For the
    indep+dep layout this is exactly half the sum of the three losses.

    ``target="probs"`` evaluates the same losses on the router softmax instead
    of the KeepTop1 gates. On the gates a batch routed to one encoder is a
    stationary point of entropy plus diversity; on the softmax the pair is the
    negative mutual information between samples and encoders.
    """
    if target not in ("gates", "probs"):
        raise ArgumentError(f"unknown routing loss target '{target}'", {"hint": "expected gates or probs"})
    if not batch:
        raise ArgumentError("routing_loss needs a non-empty batch")
    n_mixtures = len(batch[0].decisions)
    if n_mixtures == 0:
        return RoutingLoss(tensor([0.0]))

    terms: List[Tensor] = []
    parts = {"indep": [], "dep_ent": [], "dep_div": []}
    for m in range(n_mixtures):
        kind = batch[0].decisions[m].kind
        gates = [_loss_vector(out.decisions[m], target) for out in batch]
        if kind == "indep":
            # shared by every sample in the batch
            term = loss_indep_entropy(gates[0])
            parts["indep"].append(term.item())
        else:
            term = loss_dep_entropy(gates)
            parts["dep_ent"].append(term.item())
            if include_diversity:
                div = loss_dep_diversity(gates)
                parts["dep_div"].append(div.item())
                term = term + div
        terms.append(term)
    total = scale(sum_tensors(terms), 1.0 / n_mixtures)

    def mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    return RoutingLoss(total, mean(parts["indep"]), mean(parts["dep_ent"]), mean(parts["dep_div"]))


def selection_entropy(proportions: Sequence[float]) -> float:
    """Entropy (nats) of a selection-proportion vector, 0 log 0 = 0."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


def max_entropy(pool_size: int) -> float:
    return math.log(pool_size) if pool_size > 1 else 0.0
