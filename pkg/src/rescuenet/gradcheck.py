"""Randomized finite-difference checks for every differentiable op and loss.

Each case draws a small random input (64-bit) and a scalar function of it;
the analytic gradient from the tape is compared with central differences.
Inputs to relu/clip are kept at least 0.05 away from their kinks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import losses as LS
from . import tensor as T
from .tensor import Tensor, finite_difference_check

F64 = np.float64
Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _c(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=F64), dtype=F64)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + gap)


def _weighted(rng, shape):
    # random projection so every output coordinate matters
    w = _c(rng.standard_normal(shape))
    return lambda y: T.sum_(T.mul(y, w))


def _binary(op, positive_b=False):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        b = rng.uniform(0.5, 2.0, shape) if positive_b else rng.standard_normal(shape)
        proj = _weighted(rng, shape)
        return (lambda x: proj(op(x, _c(b)))), rng.standard_normal(shape)

    return case


def _binary_right(op):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=2))
        a = rng.standard_normal(shape)
        proj = _weighted(rng, shape)
        return (lambda x: proj(op(_c(a), x))), rng.uniform(0.5, 2.0, shape) * rng.choice([-1, 1], shape)

    return case


def _unary(op, sample=None):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        x = sample(rng, shape) if sample else rng.standard_normal(shape)
        proj = _weighted(rng, shape)
        return (lambda t: proj(op(t))), x

    return case


def _matmul_left(rng):
    m, k, n = rng.integers(1, 5, size=3)
    b = rng.standard_normal((k, n))
    proj = _weighted(rng, (m, n))
    return (lambda x: proj(T.matmul(x, _c(b)))), rng.standard_normal((m, k))


def _matmul_right(rng):
    m, k, n = rng.integers(1, 5, size=3)
    a = rng.standard_normal((m, k))
    proj = _weighted(rng, (m, n))
    return (lambda x: proj(T.matmul(_c(a), x))), rng.standard_normal((k, n))


def _reduce(op):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=3))
        axis = int(rng.integers(0, 3))
        out_shape = tuple(d for i, d in enumerate(shape) if i != axis)
        proj = _weighted(rng, out_shape)
        return (lambda x: proj(op(x, axis=axis))), rng.standard_normal(shape)

    return case


def _softmax_like(op):
    def case(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        axis = int(rng.integers(0, 2))
        proj = _weighted(rng, shape)
        return (lambda x: proj(op(x, axis=axis))), 2 * rng.standard_normal(shape)

    return case


def _reshape(rng):
    shape = (2, 3, 2)
    proj = _weighted(rng, (3, 4))
    return (lambda x: proj(T.reshape(x, (3, 4)))), rng.standard_normal(shape)


def _transpose(rng):
    perm = tuple(int(i) for i in rng.permutation(3))
    shape = (2, 3, 4)
    proj = _weighted(rng, tuple(shape[p] for p in perm))
    return (lambda x: proj(T.transpose(x, perm))), rng.standard_normal(shape)


def _getitem(rng):
    shape = (3, 4, 2)
    proj = _weighted(rng, (3, 2, 2))
    return (lambda x: proj(x[:, 1:3])), rng.standard_normal(shape)


def _concat(rng):
    other = rng.standard_normal((2, 3))
    proj = _weighted(rng, (2, 5))
    return (lambda x: proj(T.concat([x, _c(other)], axis=1))), rng.standard_normal((2, 2))


def _clip(rng):
    x = rng.uniform(-2, 2, (3, 3))
    # keep samples away from the clamp bounds at +-1
    x = np.where(np.abs(np.abs(x) - 1) < 0.05, x * 0.8, x)
    proj = _weighted(rng, (3, 3))
    return (lambda t: proj(T.clip(t, -1.0, 1.0))), x


def _exact_sum(rng):
    scale = _c(rng.standard_normal((3, 4)))
    return (lambda x: T.mul(T.exact_sum(T.mul(x, scale)), T.exact_sum(x))), rng.standard_normal((3, 4))


def _conv_input(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.choice([1, 3]))
    d, s = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    p = int(rng.integers(0, d + 1))
    size = (k - 1) * d + 3
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    ho = L.conv_output_size(size, k, s, d, p)
    proj = _weighted(rng, (n, o, ho, ho))
    return (lambda x: proj(L.conv2d(x, _c(w), _c(b), s, d, p))), rng.standard_normal((n, c, size, size))


def _conv_weight(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    d = int(rng.integers(1, 3))
    proj = _weighted(rng, (2, 3, 6, 6))
    return (lambda w: proj(L.conv2d(_c(x), w, None, 1, d, d))), rng.standard_normal((3, 2, 3, 3))


def _im2col(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    proj = _weighted(rng, (9, 18))
    return (lambda t: proj(L.im2col(t, 3, 3, 1, 2, 1))), x


def _bn(train):
    def case(rng):
        c = int(rng.integers(1, 4))
        gamma = rng.uniform(0.5, 2.0, c)
        beta = rng.standard_normal(c)
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        proj = _weighted(rng, (2, c, 3, 3))

        def f(x):
            return proj(L.batch_norm(x, _c(gamma), _c(beta), rm.copy(), rv.copy(), train=train))

        return f, rng.standard_normal((2, c, 3, 3))

    return case


def _bn_gamma(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    proj = _weighted(rng, (2, 2, 3, 3))
    beta = rng.standard_normal(2)

    def f(g):
        return proj(L.batch_norm(_c(x), g, _c(beta), np.zeros(2), np.ones(2), train=True))

    return f, rng.uniform(0.5, 2.0, 2)


def _upsample(rng):
    factor = int(rng.integers(1, 4))
    h, w = rng.integers(1, 4, size=2)
    proj = _weighted(rng, (1, 2, h * factor, w * factor))
    return (lambda x: proj(L.bilinear_upsample(x, factor))), rng.standard_normal((1, 2, h, w))


def _gap(rng):
    proj = _weighted(rng, (2, 3, 1, 1))
    return (lambda x: proj(L.global_avg_pool(x))), rng.standard_normal((2, 3, 4, 3))


# -- losses ----------------------------------------------------------------

def _random_mask(rng, n=2, h=3, w=3, ignore=True):
    mask = rng.integers(0, 5, size=(n, h, w)).astype(np.uint8)
    if ignore:
        mask[rng.random((n, h, w)) < 0.1] = 255
    return mask


def _loss_bce(rng):
    t = LS.LossTargets.from_mask(_random_mask(rng))
    return (lambda x: LS.bce_loss(T.sigmoid(x), t)[0]), 2 * rng.standard_normal((2, 1, 3, 3))


def _loss_locaware(rng):
    mask = _random_mask(rng)
    t = LS.LossTargets.from_mask(mask)
    loc = 2 * rng.standard_normal((2, 1, 3, 3))

    def f(x):
        return LS.locaware_loss(T.sigmoid(_c(loc)), T.softmax(x, axis=1), t).total

    return f, 2 * rng.standard_normal((2, 4, 3, 3))


def _loss_locaware_loc(rng):
    t = LS.LossTargets.from_mask(_random_mask(rng))
    dmg = rng.standard_normal((2, 4, 3, 3))
    return (lambda x: LS.locaware_loss(T.sigmoid(x), T.softmax(_c(dmg), axis=1), t).total), 2 * rng.standard_normal((2, 1, 3, 3))


def _loss_dice(rng):
    mask = _random_mask(rng)
    t = LS.LossTargets.from_mask(mask)
    smooth = float(rng.choice([0.0, 1.0]))
    return (lambda x: LS.dice_loss(T.sigmoid(x), t.loc_label, smooth, t.ignore_mask)), 2 * rng.standard_normal((2, 1, 3, 3))


def _loss_plain_ce(rng):
    mask = _random_mask(rng)
    mask.flat[0] = 1
    return (lambda x: LS.plain_ce_loss(x, mask)), 2 * rng.standard_normal((2, 5, 3, 3))


def _loss_change(rng):
    mask = _random_mask(rng)
    mask.flat[0] = 2
    t = LS.LossTargets.from_mask(mask)
    return (lambda x: LS.change_head_loss(x, t)[0]), 2 * rng.standard_normal((2, 4, 3, 3))


def _loss_total(mode):
    def case(rng):
        from .model import ForwardOutputs

        mask = _random_mask(rng)
        mask.flat[0] = 3
        t = LS.LossTargets.from_mask(mask)
        fixed = {k: _c(2 * rng.standard_normal(s)) for k, s in (("pre", (2, 1, 3, 3)), ("dmg", (2, 4, 3, 3)), ("chg", (2, 4, 3, 3)))}

        def f(x):
            out = ForwardOutputs(fixed["pre"], x, fixed["dmg"], fixed["chg"])
            return LS.total_loss(out, t, mode).total

        return f, 2 * rng.standard_normal((2, 1, 3, 3))

    return case


OP_CASES: dict[str, Case] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "div_denominator": _binary_right(T.div),
    "neg": _unary(T.neg),
    "log": _unary(T.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "exp": _unary(T.exp),
    "sigmoid": _unary(T.sigmoid),
    "relu": _unary(T.relu, _away_from_zero),
    "clip": _clip,
    "softmax": _softmax_like(T.softmax),
    "log_softmax": _softmax_like(T.log_softmax),
    "matmul_left": _matmul_left,
    "matmul_right": _matmul_right,
    "sum": _reduce(T.sum_),
    "mean": _reduce(T.mean),
    "exact_sum": _exact_sum,
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "concat": _concat,
    "im2col": _im2col,
    "conv2d_input": _conv_input,
    "conv2d_weight": _conv_weight,
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "batch_norm_gamma": _bn_gamma,
    "bilinear_upsample": _upsample,
    "global_avg_pool": _gap,
}

LOSS_CASES: dict[str, Case] = {
    "bce": _loss_bce,
    "locaware_damage": _loss_locaware,
    "locaware_loc": _loss_locaware_loc,
    "dice": _loss_dice,
    "plain_ce": _loss_plain_ce,
    "change_head": _loss_change,
    "total_locaware": _loss_total("locaware"),
    "total_locaware_dice": _loss_total("locaware_dice"),
}


@dataclass
class CaseResult:
    name: str
    trials: int
    max_error: float

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol


def run_case(name: str, case: Case, trials: int, seed: int = 0, h: float = 1e-6) -> CaseResult:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, len(name), sum(map(ord, name))])))
    worst = 0.0
    for _ in range(trials):
        f, x = case(rng)
        worst = max(worst, finite_difference_check(f, Tensor(np.asarray(x, dtype=F64), dtype=F64), h=h))
    return CaseResult(name, trials, worst)


def run_suite(trials: int = 100, seed: int = 0, include_losses: bool = True) -> list[CaseResult]:
    cases = dict(OP_CASES)
    if include_losses:
        cases.update(LOSS_CASES)
    return [run_case(name, case, trials, seed) for name, case in cases.items()]


def end_to_end_error(seed: int = 0, size: int = 8, loss_mode: str = "locaware_dice", h: float = 1e-6) -> float:
    """Finite-difference error of the total loss w.r.t. the first conv weight.

    Runs the full model in 64-bit train mode on a random size×size pair.
    """
    from .model import ModelConfig, build_model, forward_pair

    # a size/8 feature map only admits small ASPP dilations
    cfg = ModelConfig(input_size=size, aspp_dilations=(1,), aspp_divisor=1, loss_mode=loss_mode)
    params = build_model(cfg, seed, dtype=F64)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, size])))
    pre = _c(rng.random((2, 3, size, size)))
    post = _c(rng.random((2, 3, size, size)))
    mask = rng.integers(0, 5, (2, size, size)).astype(np.uint8)
    targets = LS.LossTargets.from_mask(mask)
    name = "backbone.stem.conv.weight"
    w0 = params[name]

    def f(w):
        params.tensors[name] = w
        out = forward_pair(params, cfg, pre, post, mode="train")
        return LS.total_loss(out, targets, loss_mode).total

    try:
        return finite_difference_check(f, Tensor(w0.data.copy(), dtype=F64), h=h)
    finally:
        params.tensors[name] = w0
