"""Finite-difference verification of every differentiable operation.

Each check builds a function of some leaf tensors, reduces its output to a
scalar with a fixed random projection, and compares the tape gradient of
every leaf with central differences.
"""

import enum
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field

from . import functional as F
from .common import BaseModel
from .config import GkaMode, preset_config
from .layers import (
    ConvBlock,
    GroupedKanActivation,
    GroupedKanTransform,
    Linear,
    TokKanBlock,
)
from .model import build
from .spline import GroupedKanLinear, KanLinear, SplineGrid, spline_bases
from .tensor import Tape, Tensor, concat, no_tape_call
from .training import bce_dice_loss

logger = logging.getLogger(__name__)

STEP = 1e-5

# Floor of the relative-error denominator.
ABS_FLOOR = 1e-3

# Side of the square input used by the model suite.
MODEL_RESOLUTION = 32


@enum.unique
class Scope(str, enum.Enum):
    OPS = "ops"
    LAYERS = "layers"
    MODEL = "model"


TOLERANCES = {Scope.OPS.value: 1e-6, Scope.LAYERS.value: 1e-5, Scope.MODEL.value: 1e-4}


class GradCheckResult(BaseModel):
    name: str
    max_rel_error: float = Field(..., ge=0)
    tolerance: float = Field(..., gt=0)
    coordinates: int = Field(..., ge=0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    tolerance: float,
    rng: np.random.Generator,
    per_leaf: Optional[int] = None,
) -> GradCheckResult:
    """Compare tape gradients of `fn` w.r.t. `leaves` with central differences.

    `per_leaf` limits the number of sampled coordinates per leaf; by
    default every coordinate is checked.
    """
    projection = rng.standard_normal(no_tape_call(fn).shape)

    def scalar() -> float:
        return float(np.sum(no_tape_call(fn).data * projection))

    for leaf in leaves:
        leaf.zero_grad()
    with Tape():
        loss = (fn() * projection).sum()
    loss.backward()

    worst, checked = 0.0, 0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        if per_leaf is None or per_leaf >= flat.size:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, size=per_leaf, replace=False)
        for index in indices:
            original = flat[index]
            flat[index] = original + STEP
            plus = scalar()
            flat[index] = original - STEP
            minus = scalar()
            flat[index] = original
            numeric = (plus - minus) / (2 * STEP)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[index]), numeric))
            checked += 1

    result = GradCheckResult(
        name=name, max_rel_error=worst, tolerance=tolerance, coordinates=checked
    )
    logger.debug("%s: max rel err %.3g over %d coordinates", name, worst, checked)
    return result


Case = Tuple[Callable[[], Tensor], List[Tensor]]


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _positive(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)


def _op_cases(rng: np.random.Generator) -> Dict[str, Case]:
    cases: Dict[str, Case] = {}

    a, b = _leaf(rng, 5, 7), _leaf(rng, 7, 3)
    cases["matmul"] = (lambda: F.matmul(a, b), [a, b])

    x, w, bias = _leaf(rng, 2, 3, 8, 8), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    cases["conv2d"] = (lambda: F.conv2d(x, w, bias), [x, w, bias])
    cases["conv2d_stride2_pad1"] = (lambda: F.conv2d(x, w, bias, stride=2, padding=1), [x, w])

    dx, dw = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 3, 1, 3, 3)
    cases["depthwise_conv2d"] = (lambda: F.depthwise_conv2d(dx, dw, padding=1), [dx, dw])

    ln_x, gamma, beta = _leaf(rng, 3, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    cases["layer_norm"] = (lambda: F.layer_norm(ln_x, gamma, beta), [ln_x, gamma, beta])

    bn_x, bn_gamma, bn_beta = _leaf(rng, 3, 2, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
    cases["batch_norm"] = (
        lambda: F.batch_norm(bn_x, bn_gamma, bn_beta)[0],
        [bn_x, bn_gamma, bn_beta],
    )
    running_mean, running_var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    cases["batch_norm_eval"] = (
        lambda: F.batch_norm(bn_x, bn_gamma, bn_beta, running_mean, running_var)[0],
        [bn_x, bn_gamma, bn_beta],
    )

    for op in ("relu", "gelu", "silu", "sigmoid", "softplus"):
        u = _leaf(rng, 100)
        cases[op] = (lambda op=op, u=u: F.elementwise(op, u), [u])

    p, q, row = _leaf(rng, 4, 5), _leaf(rng, 4, 5), _leaf(rng, 5)
    den = _positive(rng, 4, 5)
    cases["add_broadcast"] = (lambda: p + row, [p, row])
    cases["sub"] = (lambda: p - q, [p, q])
    cases["mul_broadcast"] = (lambda: p * row, [p, row])
    cases["div"] = (lambda: p / den, [p, den])
    cases["sum_mean"] = (lambda: p.sum(axis=1) + q.mean(axis=1), [p, q])
    cases["reshape_permute"] = (lambda: p.reshape(2, 2, 5).permute(2, 0, 1) * 1.0, [p])
    cases["concat"] = (lambda: concat([p, q], axis=1), [p, q])

    e1, e2 = _leaf(rng, 6, 2, 3, 4), _leaf(rng, 2, 5, 3, 4)
    cases["einsum"] = (lambda: F.einsum("mgpk,gqpk->mgq", e1, e2), [e1, e2])

    pool_x = _leaf(rng, 2, 2, 4, 6)
    cases["max_pool2d"] = (lambda: F.max_pool2d(pool_x), [pool_x])
    cases["upsample_nearest2d"] = (lambda: F.upsample_nearest2d(pool_x), [pool_x])

    grid = SplineGrid()
    s = Tensor(rng.uniform(-1.2, 1.2, size=(7, 3)), requires_grad=True)
    cases["spline_bases"] = (lambda: spline_bases(s, grid), [s])
    return cases


def _layer_cases(rng: np.random.Generator) -> Dict[str, Case]:
    grid = SplineGrid()
    cases: Dict[str, Case] = {}

    kan = KanLinear(4, 3, grid, rng)
    kan_x = _leaf(rng, 5, 4, scale=0.5)
    cases["kan_linear"] = (lambda: kan(kan_x), [kan_x] + kan.parameters())

    grouped = GroupedKanLinear(8, 4, grid, rng)
    grouped_x = _leaf(rng, 2, 3, 8, scale=0.5)
    cases["grouped_kan_linear"] = (lambda: grouped(grouped_x), [grouped_x] + grouped.parameters())

    for mode in (GkaMode.SHARED.value, GkaMode.PER_CHANNEL.value):
        gka = GroupedKanActivation(8, 4, grid, rng, mode=mode)
        gka_x = _leaf(rng, 2, 5, 8, scale=0.5)
        cases[f"gka_{mode}"] = (
            lambda gka=gka, gka_x=gka_x: gka(gka_x),
            [gka_x] + gka.parameters(),
        )

    gkt = GroupedKanTransform(8, 2, grid, rng)
    gkt_x = _leaf(rng, 2, 12, 8, scale=0.5)
    cases["gkt"] = (lambda: gkt(gkt_x, (3, 4)), [gkt_x] + gkt.parameters())

    linear = Linear(6, 4, rng)
    lin_x = _leaf(rng, 3, 6)
    cases["linear"] = (lambda: linear(lin_x), [lin_x] + linear.parameters())

    conv_block = ConvBlock(2, 3, rng)
    block_x = _leaf(rng, 2, 2, 4, 4)
    cases["conv_block"] = (lambda: conv_block(block_x), [block_x] + conv_block.parameters())

    tok = TokKanBlock(4, 8, 2, 2, grid, rng, kinds=["gkt", "gkt"])
    tok_x = _leaf(rng, 2, 4, 4, 4, scale=0.5)
    cases["tok_kan_block"] = (lambda: tok(tok_x), [tok_x] + tok.parameters())

    logits = _leaf(rng, 2, 1, 4, 4)
    target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    cases["bce_dice_loss"] = (lambda: bce_dice_loss(logits, target), [logits])
    return cases


def run_ops(seed: int = 0) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    tolerance = TOLERANCES[Scope.OPS.value]
    return [
        check_gradients(name, fn, leaves, tolerance, rng)
        for name, (fn, leaves) in _op_cases(rng).items()
    ]


def run_layers(seed: int = 0) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    tolerance = TOLERANCES[Scope.LAYERS.value]
    return [
        check_gradients(name, fn, leaves, tolerance, rng, per_leaf=12)
        for name, (fn, leaves) in _layer_cases(rng).items()
    ]


def run_model(seed: int = 0) -> List[GradCheckResult]:
    """Tiny preset at 32x32: one sampled coordinate per parameter tensor."""
    rng = np.random.default_rng(seed)
    net = build(preset_config("tiny", seed=seed))
    x = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, MODEL_RESOLUTION, MODEL_RESOLUTION)))
    target = Tensor((rng.random((2, 1, MODEL_RESOLUTION, MODEL_RESOLUTION)) > 0.5) * 1.0)
    params = net.parameters()
    result = check_gradients(
        "groupkan_tiny",
        lambda: bce_dice_loss(net(x), target),
        params,
        TOLERANCES[Scope.MODEL.value],
        rng,
        per_leaf=1,
    )
    return [result]


SUITES: Dict[str, Callable[[int], List[GradCheckResult]]] = {
    Scope.OPS.value: run_ops,
    Scope.LAYERS.value: run_layers,
    Scope.MODEL.value: run_model,
}


def run_suite(scope: str, seed: int = 0) -> List[GradCheckResult]:
    results = SUITES[Scope(scope).value](seed)
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error("Gradient check %s failed for %s", scope, ", ".join(failed))
    else:
        logger.info("Gradient check %s passed (%d checks)", scope, len(results))
    return results
