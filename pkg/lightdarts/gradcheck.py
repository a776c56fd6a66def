"""
Finite-difference gradient checking for every primitive and candidate op.

The analytic gradient of a random projection of the output is compared with
central differences. Coordinates whose perturbation flips a discrete decision
of a non-smooth primitive (relu mask, max argmax) are skipped: the function
is not differentiable across that step, and the central difference is not an
oracle there.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from . import functional as F
from .operations import OpKind, apply, build_op
from .tensor import Tape, Tensor, record

logger = logging.getLogger(__name__)

Primitive = Callable[..., Tensor]
CaseBuilder = Callable[[np.random.Generator], Tuple[Primitive, List[np.ndarray]]]


class GradCheckReport(BaseModel):
    """Outcome of one grad_check run."""

    name: str = ""
    max_error: float = Field(..., ge=0.0)
    checked: int = Field(..., ge=0)
    skipped: int = Field(0, ge=0)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    def vjp(g: np.ndarray):
        return (g * weights,)

    return record("project", (out,), np.array((out.data * weights).sum()), vjp)


def _evaluate(
    fn: Primitive, arrays: Sequence[np.ndarray], weights: Optional[np.ndarray]
) -> Tuple[float, bytes, List[Tensor], Tape, Tensor]:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        if weights is None:
            weights = np.ones(out.shape)
        loss = _project(out, weights)
    return loss.item(), tape.branch_signature(), tensors, tape, loss


def check_gradients(
    fn: Primitive,
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-3,
    seed: int = 0,
    name: str = "",
) -> GradCheckReport:
    """
    Compare analytic and central-difference gradients of ``fn``.

    Args:
        fn: Callable mapping input Tensors to an output Tensor
        inputs: Arrays for every argument of ``fn``; all are differentiated
        epsilon: Central-difference step
        seed: Seed of the random output projection
        name: Label carried into the report

    Returns:
        GradCheckReport with max |analytic - numeric| / max(1, |numeric|)
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    _, signature, tensors, tape, loss = _evaluate(fn, arrays, weights)
    tape.backward(loss)
    analytic = [t.grad for t in tensors]

    max_error = 0.0
    checked = skipped = 0
    for index, array in enumerate(arrays):
        for coord in np.ndindex(array.shape):
            original = array[coord]
            array[coord] = original + epsilon
            plus, plus_sig, *_ = _evaluate(fn, arrays, weights)
            array[coord] = original - epsilon
            minus, minus_sig, *_ = _evaluate(fn, arrays, weights)
            array[coord] = original
            if plus_sig != signature or minus_sig != signature:
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * epsilon)
            error = abs(analytic[index][coord] - numeric) / max(1.0, abs(numeric))
            max_error = max(max_error, error)
            checked += 1

    return GradCheckReport(name=name, max_error=max_error, checked=checked, skipped=skipped)


def grad_check(
    primitive: Primitive, inputs: Sequence[np.ndarray], epsilon: float = 1e-3, seed: int = 0
) -> float:
    """Max relative error between analytic and numeric gradients."""
    return check_gradients(primitive, inputs, epsilon=epsilon, seed=seed).max_error


def _away_from_zero(values: np.ndarray, margin: float = 0.05) -> np.ndarray:
    small = np.abs(values) < margin
    return np.where(small, np.where(values < 0, -margin, margin) * 2, values)


def _op_case(kind: OpKind, stride: int) -> CaseBuilder:
    def build(rng: np.random.Generator):
        op = build_op(kind, channels=2, stride=stride, seed=int(rng.integers(2**31)))
        x = rng.standard_normal((2, 2, 5, 5))

        def fn(x_t: Tensor, *params: Tensor) -> Tensor:
            op.replace_parameters(params)
            return apply(op, x_t)

        return fn, [x] + [p.numpy() for p in op.parameters()]

    return build


def _primitive_cases() -> List[Tuple[str, CaseBuilder]]:
    def conv(stride: int, dilation: int, groups: int, padding: int, k: int) -> CaseBuilder:
        def build(rng):
            x = rng.standard_normal((2, 4, 6, 5))
            w = rng.standard_normal((4, 4 // groups, k, k))
            return (
                lambda a, b: F.conv2d(a, b, stride, dilation, groups, padding),
                [x, w],
            )

        return build

    def pool(kind: str, stride: int) -> CaseBuilder:
        def build(rng):
            x = rng.standard_normal((2, 2, 5, 6))
            return (lambda a: F.pool2d(a, kind, 3, stride, 1)), [x]

        return build

    def labels_case(rng):
        logits = rng.standard_normal((5, 2))
        labels = rng.integers(0, 2, size=5)
        return (lambda a: F.cross_entropy(a, labels)), [logits]

    def norm_frozen(rng):
        x = rng.standard_normal((2, 3, 4, 4))
        mean = rng.standard_normal(3)
        var = rng.uniform(0.5, 2.0, 3)
        return (
            lambda a, g, b: F.channel_norm(a, g, b, stats=(mean, var)),
            [x, rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)],
        )

    def mixed(rng):
        xs = [rng.standard_normal((2, 2, 3, 3)) for _ in range(3)]
        return (
            lambda a, b, c, logits: F.weighted_sum([a, b, c], F.softmax(logits)),
            xs + [rng.standard_normal(3)],
        )

    return [
        ("conv2d", conv(1, 1, 1, 1, 3)),
        ("conv2d_dilation2", conv(1, 2, 1, 2, 3)),
        ("conv2d_depthwise_stride2", conv(2, 1, 4, 1, 3)),
        ("conv2d_grouped", conv(1, 1, 2, 0, 1)),
        ("avg_pool_stride1", pool("avg", 1)),
        ("avg_pool_stride2", pool("avg", 2)),
        ("max_pool_stride1", pool("max", 1)),
        ("max_pool_stride2", pool("max", 2)),
        (
            "elementwise_max",
            lambda rng: (
                F.elementwise_max,
                [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))],
            ),
        ),
        ("relu", lambda rng: (F.relu, [_away_from_zero(rng.standard_normal((3, 5)))])),
        ("softmax", lambda rng: (F.softmax, [rng.standard_normal((3, 9))])),
        ("log_softmax", lambda rng: (F.log_softmax, [rng.standard_normal((3, 4))])),
        ("cross_entropy", labels_case),
        (
            "linear",
            lambda rng: (
                F.linear,
                [rng.standard_normal((4, 5)), rng.standard_normal((2, 5)), rng.standard_normal(2)],
            ),
        ),
        (
            "add",
            lambda rng: (F.add, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]),
        ),
        (
            "concat_channels",
            lambda rng: (
                lambda a, b: F.concat_channels([a, b]),
                [rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 2, 3, 3))],
            ),
        ),
        ("global_avg_pool", lambda rng: (F.global_avg_pool, [rng.standard_normal((2, 3, 4, 3))])),
        (
            "channel_norm",
            lambda rng: (
                F.channel_norm,
                [
                    rng.standard_normal((2, 3, 4, 4)),
                    rng.uniform(0.5, 1.5, 3),
                    rng.standard_normal(3),
                ],
            ),
        ),
        ("channel_norm_frozen", norm_frozen),
        ("weighted_sum_softmax", mixed),
        (
            "index_row",
            lambda rng: ((lambda m: F.index_row(m, 1)), [rng.standard_normal((3, 4))]),
        ),
        (
            "channel_slice",
            lambda rng: ((lambda x: F.channel_slice(x, 1, 3)), [rng.standard_normal((2, 4, 3, 3))]),
        ),
        ("offset_pixels", lambda rng: (F.offset_pixels, [rng.standard_normal((2, 2, 4, 5))])),
        ("sum", lambda rng: (F.sum_all, [rng.standard_normal((3, 4))])),
    ]


def gradient_cases() -> List[Tuple[str, CaseBuilder]]:
    """All registered cases: primitives plus every candidate op at both strides."""
    cases = _primitive_cases()
    for kind in OpKind:
        for stride in (1, 2):
            cases.append((f"{kind.value}_stride{stride}", _op_case(kind, stride)))
    return cases


def run_suite(
    instances: int = 10, epsilon: float = 1e-3, seed: int = 0, names: Optional[Sequence[str]] = None
) -> List[GradCheckReport]:
    """
    Run every registered case on ``instances`` seeded random draws.

    Returns one report per case carrying the worst error over its instances.
    """
    reports = []
    for case_index, (name, builder) in enumerate(gradient_cases()):
        if names is not None and name not in names:
            continue
        worst = GradCheckReport(name=name, max_error=0.0, checked=0, skipped=0)
        for instance in range(instances):
            rng = np.random.default_rng([seed, case_index, instance])
            fn, inputs = builder(rng)
            report = check_gradients(fn, inputs, epsilon=epsilon, seed=instance)
            worst = GradCheckReport(
                name=name,
                max_error=max(worst.max_error, report.max_error),
                checked=worst.checked + report.checked,
                skipped=worst.skipped + report.skipped,
            )
        logger.debug(
            f"gradcheck {name}: max_error={worst.max_error:.3e}, "
            f"checked={worst.checked}, skipped={worst.skipped}"
        )
        reports.append(worst)
    return reports
