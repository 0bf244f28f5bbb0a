"""Finite-difference check cases for every primitive, norm layer, and loss.

Each case draws a random shape and random inputs from a Generator and
reduces the op's output to a scalar with a fixed random projection, so
every output element contributes to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .loss import LossConfig, loss_terms, nt_xent
from .tensor import GradCheckReport, Tensor

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _project(out: Tensor, rng_state: np.ndarray) -> Tensor:
    return T.sum(out * Tensor(rng_state))


def _unary(op, positive: bool = False, nd: tuple[int, int] = (1, 3)) -> Builder:
    def build(rng):
        shape = tuple(rng.integers(1, 5, rng.integers(nd[0], nd[1] + 1)))
        x = rng.uniform(0.2, 2.0, shape) if positive else rng.normal(size=shape)
        c = rng.normal(size=np.shape(op(Tensor(x)).data))
        return (lambda a: _project(op(a), c)), [x]

    return build


def _binary(op) -> Builder:
    def build(rng):
        shape = tuple(rng.integers(1, 5, rng.integers(1, 4)))
        # broadcast the second operand over a random subset of leading axes
        bshape = tuple(1 if rng.random() < 0.3 else s for s in shape)
        a, b = rng.normal(size=shape), rng.normal(size=bshape)
        if op is T.div:
            b = np.sign(b) * (np.abs(b) + 0.5)
        c = rng.normal(size=shape)
        return (lambda x, y: _project(op(x, y), c)), [a, b]

    return build


def _matmul(rng):
    n, k, m = rng.integers(1, 6, 3)
    c = rng.normal(size=(n, m))
    return (lambda a, b: _project(T.matmul(a, b), c)), [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _reduce(op) -> Builder:
    def build(rng):
        shape = tuple(rng.integers(1, 5, 3))
        axis = [None, 0, 1, 2, (0, 2)][rng.integers(5)]
        keep = bool(rng.integers(2))
        x = rng.normal(size=shape)
        c = rng.normal(size=np.shape(op(Tensor(x), axis, keep).data))
        return (lambda a: _project(op(a, axis, keep), c)), [x]

    return build


def _reshape(rng):
    shape = tuple(rng.integers(1, 5, 3))
    new = (shape[0] * shape[1], shape[2])
    c = rng.normal(size=new)
    return (lambda a: _project(T.reshape(a, new), c)), [rng.normal(size=shape)]


def _transpose(rng):
    shape = tuple(rng.integers(1, 6, 2))
    c = rng.normal(size=shape[::-1])
    return (lambda a: _project(T.transpose(a), c)), [rng.normal(size=shape)]


def _concat(rng):
    axis = int(rng.integers(2))
    base = list(rng.integers(1, 5, 2))
    sa, sb = list(base), list(base)
    sb[axis] = int(rng.integers(1, 4))
    out = list(base)
    out[axis] = sa[axis] + sb[axis]
    c = rng.normal(size=out)
    return (lambda a, b: _project(T.concat([a, b], axis), c)), [rng.normal(size=sa), rng.normal(size=sb)]


def _l2(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
    c = rng.normal(size=shape)
    return (lambda a: _project(T.l2_normalize(a), c)), [rng.normal(size=shape)]


def _standardize(rng):
    shape = tuple(int(v) for v in rng.integers(2, 4, 4))
    axes = [(0, 2, 3), (1, 2, 3), (1,), (2, 3)][rng.integers(4)]
    c = rng.normal(size=shape)
    return (lambda a: _project(T.standardize(a, axes, 1e-5), c)), [rng.normal(size=shape)]


def _conv(rng):
    n, cin, cout = (int(v) for v in rng.integers(1, 4, 3))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    hw = int(rng.integers(k, 7))
    x = rng.normal(size=(n, cin, hw, hw))
    w = rng.normal(size=(cout, cin, k, k))
    shape = T.conv2d(Tensor(x), Tensor(w), stride, pad).shape
    c = rng.normal(size=shape)
    return (lambda a, b: _project(T.conv2d(a, b, stride, pad), c)), [x, w]


def _maxpool(rng):
    n, ch = (int(v) for v in rng.integers(1, 3, 2))
    hw = int(rng.integers(3, 7))
    kernel, stride, pad = [(3, 2, 1), (2, 2, 0), (3, 1, 1)][rng.integers(3)]
    x = rng.normal(size=(n, ch, hw, hw))
    c = rng.normal(size=T.max_pool2d(Tensor(x), kernel, stride, pad).shape)
    return (lambda a: _project(T.max_pool2d(a, kernel, stride, pad), c)), [x]


def _ws(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 3)), 3, 3)
    c = rng.normal(size=shape)
    return (lambda w: _project(nn.weight_standardize(w), c)), [rng.normal(size=shape)]


def _norm(kind: str) -> Builder:
    def build(rng):
        n = int(rng.integers(2, 4))
        ch = int(rng.choice([2, 4]))
        hw = int(rng.integers(1, 4))
        x = rng.normal(size=(n, ch, hw, hw))
        c = rng.normal(size=x.shape)
        scale, shift = rng.normal(size=ch), rng.normal(size=ch)
        if kind == "bn":
            op = lambda a, g, b: nn.batch_norm(a, g, b, None, None, True)  # noqa: E731
        elif kind == "ln":
            op = lambda a, g, b: nn.layer_norm(a, g, b)  # noqa: E731
        else:
            op = lambda a, g, b: nn.group_norm(a, 2, g, b)  # noqa: E731
        return (lambda a, g, b: _project(op(a, g, b), c)), [x, scale, shift]

    return build


def clustered_batch(rng: np.random.Generator, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Two (n, d) batches drawn around a few shared directions and their
    negations, so that thresholded positive and negative pairs occur."""
    centers = rng.normal(size=(2, d))
    signs = rng.choice([-1.0, 1.0], n)
    pick = rng.integers(0, 2, n)
    base = centers[pick] * signs[:, None]
    q = base + 0.3 * rng.normal(size=(n, d))
    z = base + 0.3 * rng.normal(size=(n, d))
    return q, z


def _loss(variant: str) -> Builder:
    def build(rng):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        q, z = clustered_batch(rng, n, d)
        cfg = LossConfig(variant=variant, lam=float(rng.uniform(0.05, 1.0)))
        return (lambda a, b: loss_terms(T.l2_normalize(a), T.l2_normalize(b), cfg).total), [q, z]

    return build


def _nt_xent(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    t = float(rng.uniform(0.2, 1.0))
    return (lambda a, b: nt_xent(a, b, t)), [rng.normal(size=(n, d)), rng.normal(size=(n, d))]


CASES: dict[str, Builder] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "scale": _unary(lambda a: T.scale(a, 1.7)),
    "matmul": _matmul,
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "log": _unary(T.log, positive=True),
    "exp": _unary(T.exp),
    "sqrt": _unary(T.sqrt, positive=True),
    "sum": _reduce(T.sum),
    "mean": _reduce(T.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "l2_normalize": _l2,
    "standardize": _standardize,
    "conv2d": _conv,
    "max_pool2d": _maxpool,
    "weight_standardize": _ws,
    "batch_norm": _norm("bn"),
    "layer_norm": _norm("ln"),
    "group_norm": _norm("gn"),
    "loss_byol": _loss("byol"),
    "loss_ccsl": _loss("ccsl"),
    "loss_ccsl_repulsion": _loss("ccsl-with-repulsion"),
    "loss_cssl": _loss("cssl"),
    "loss_nt_xent": _nt_xent,
}


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_error: float
    failures: int
    excluded: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def check_case(name: str, rng: np.random.Generator, step: float = 1e-5, tolerance: float = 1e-3) -> GradCheckReport:
    with T.default_dtype("float64"):
        fn, arrays = CASES[name](rng)
        return T.grad_check(fn, T.tensors(*arrays), step=step, tolerance=tolerance)


def run_suite(
    names=None, trials: int = 20, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-3
) -> list[SuiteResult]:
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        worst, failures, excluded = 0.0, 0, 0
        for _ in range(trials):
            report = check_case(name, rng, step, tolerance)
            worst = max(worst, report.max_error)
            failures += not report.passed
            excluded += sum(len(v) for v in report.excluded.values())
        results.append(SuiteResult(name, trials, worst, failures, excluded))
    return results
