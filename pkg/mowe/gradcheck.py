"""Finite-difference checks of every differentiable op family and of the full training loss."""
import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, computed_field

from mowe import numerics as nx
from mowe.config import MoweConfig, toy_config
from mowe.numerics import GradCheckReport, Rng, Tensor, check_gradients, parameter, tensor
from mowe.pipeline import build_model
from mowe.routing import (
    DepRouterParams, keep_top1, loss_dep_diversity, loss_dep_entropy, loss_indep_entropy, route_dep,
)
from mowe.synthdata import generate_from_config

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


class FamilyResult(BaseModel):
    family: str
    max_rel_error: float
    tolerance: float
    coords_checked: int

    @computed_field
    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


class GradSuiteReport(BaseModel):
    families: List[FamilyResult] = Field(default_factory=list)
    seconds: float = 0.0

    @computed_field
    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.families)

    def to_dict(self) -> Dict:
        """JSON-ready summary keyed by family name."""
        return {
            "passed": self.passed,
            "seconds": round(self.seconds, 3),
            "families": {f.family: f.model_dump(mode="json", exclude={"family"}) for f in self.families},
        }


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce ``out`` to a scalar with fixed random weights so no coordinate cancels."""
    return nx.sum_all(nx.mul(out, tensor(weights)))


def _families(rng: Rng) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Tensor]]]:
    def p(name: str, shape, low: Optional[float] = None) -> Tensor:
        data = rng.child(name).uniform(shape, 0.1, 1.0) if low is not None else rng.child(name).normal(shape)
        return parameter(data, name=name)

    def w(shape) -> np.ndarray:
        return rng.child(f"w{shape}").normal(shape)

    a, b = p("a", (4, 3)), p("b", (4, 3))
    m1, m2 = p("m1", (4, 3)), p("m2", (3, 5))
    bias, gain = p("bias", (3,)), p("gain", (3,))
    v = p("v", (5,))
    pos = p("pos", (4, 3), low=0.1)
    seq = p("seq", (9, 3))
    kernel = p("kernel", (3 * 3, 2))
    kbias = p("kbias", (2,))
    table = p("table", (6, 3))
    scores = p("scores", (4, 4))
    logits = p("logits", (3, 6))
    causal = np.tril(np.ones((4, 4), dtype=bool))
    scale = p("scale", (1,))

    w43, w35, w3, w5 = w((4, 3)), w((4, 5)), w((3, 3)), w((5,))
    return {
        "elementwise": (lambda: _probe(nx.gelu(nx.mul(nx.add(a, b), nx.sub(a, b))), w43)
                        + _probe(nx.mul_scalar(a, scale), w43), {"a": a, "b": b, "scale": scale}),
        "xlogx": (lambda: _probe(nx.xlogx(pos), w43), {"pos": pos}),
        "reductions": (lambda: nx.mean_all(nx.mul(a, a)) + _probe(nx.mean_over_sequence(a), w43[:1]),
                       {"a": a}),
        "linear_algebra": (lambda: _probe(nx.linear(m1, m2), w35) + _probe(nx.transpose(m1), w43.T)
                           + _probe(nx.scale_cols(m1, gain), w43) + _probe(nx.add_bias(m1, bias), w43),
                           {"m1": m1, "m2": m2, "gain": gain, "bias": bias}),
        "softmax": (lambda: nx.sum_all(nx.mul(nx.softmax(v), tensor(w5)))
                    + _probe(nx.softmax_rows(scores, causal), w((4, 4)))
                    + nx.cross_entropy(logits, [0, 3, 5]),
                    {"v": v, "scores": scores, "logits": logits}),
        "layer_norm": (lambda: _probe(nx.layer_norm(a, gain, bias), w43), {"a": a, "gain": gain, "bias": bias}),
        "structure": (lambda: _probe(nx.concat_feature(a, b), w((4, 6)))
                      + _probe(nx.concat_sequence(a, b), w((8, 3)))
                      + _probe(nx.slice_rows(nx.slice_cols(a, 1, 3), 1, 3), w((2, 2)))
                      + _probe(nx.embedding(table, [0, 2, 2, 5]), w43)
                      + _probe(nx.reshape(a, (3, 4)), w((3, 4))),
                      {"a": a, "b": b, "table": table}),
        "convolution": (lambda: _probe(nx.conv1d(seq, kernel, kbias, 3, 2, 1, 1), w((5, 2)))
                        + _probe(nx.linear_interpolate_features(seq, 5), w((9, 5))),
                        {"seq": seq, "kernel": kernel, "kbias": kbias}),
        "gating": (lambda: nx.sum_all(keep_top1(nx.softmax(v))), {"v": v}),
    }


def _routing_family(rng: Rng) -> Tuple[Callable[[], Tensor], Dict[str, Tensor]]:
    pool, d_base, batch = 4, 3, 3
    router = DepRouterParams(parameter(rng.child("W_dep").normal((d_base, pool)), name="W_dep"))
    bases = [parameter(rng.child(f"z{i}").normal((5, d_base)), name=f"z{i}") for i in range(batch)]
    w_indep = parameter(rng.child("w_indep").normal((pool,)), name="w_indep")

    def f() -> Tensor:
        gates = [route_dep(router, z, training=True).gates for z in bases]
        indep = keep_top1(nx.softmax(w_indep))
        return loss_dep_entropy(gates) + loss_dep_diversity(gates) + loss_indep_entropy(indep)

    params = {"W_dep": router.W_dep, "w_indep": w_indep}
    params.update({t.name: t for t in bases})
    return f, params


def _end_to_end(config: MoweConfig, seed: int) -> Tuple[Callable[[], Tensor], Dict[str, Tensor]]:
    model = build_model(config, seed)
    data = generate_from_config(config.data, seed)
    batch = data.samples[:1] + data.samples[-1:]
    return (lambda: model.loss_total(batch, training=True).total), dict(model.trainable_parameters())


def run_gradient_suite(config: Optional[MoweConfig] = None, seed: int = 0, eps: float = 1e-5,
                       max_coords: Optional[int] = 6) -> GradSuiteReport:
    """
    Compare autodiff with central differences per op family, then on the
    full loss of a two-sample toy model. ``max_coords`` caps the coordinates
    sampled per end-to-end parameter tensor.
    """
    started = time.perf_counter()
    rng = Rng(seed, "gradcheck")
    report = GradSuiteReport()

    checks = dict(_families(rng))
    checks["routing_losses"] = _routing_family(rng.child("routing"))
    for family, (f, params) in checks.items():
        result = check_gradients(f, params, eps=eps, rng=rng.child(family))
        report.families.append(_result(family, result, OP_TOLERANCE))

    f, params = _end_to_end(config or toy_config(), seed)
    result = check_gradients(f, params, eps=eps, max_coords=max_coords, rng=rng.child("end_to_end"))
    report.families.append(_result("end_to_end", result, END_TO_END_TOLERANCE))

    report.seconds = float(time.perf_counter() - started)
    for family in report.families:
        logger.info("grad-check %-15s max rel error %.2e (%s)", family.family, family.max_rel_error,
                    "ok" if family.passed else "FAIL")
    return report


def _result(family: str, result: GradCheckReport, tolerance: float) -> FamilyResult:
    return FamilyResult(family=family, max_rel_error=float(result.max_rel_error), tolerance=tolerance,
                        coords_checked=int(result.coords_checked))
