"""Central finite-difference checks of the autograd backward rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .errors import ArgumentError
from .tensor import Tensor

THRESHOLD = 1e-4
DEFAULT_EPS = 1e-5


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_EPS) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps the input tensors to a scalar tensor.  The error per element
    is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    if out.size != 1 or out.ndim > 1:
        raise ArgumentError(f"grad_check closure must return a scalar, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn(*inputs).data)
            flat[i] = orig - eps
            minus = float(fn(*inputs).data)
            flat[i] = orig
            numeric[i] = (plus - minus) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with pairwise gaps of at least 0.1 so max-pool winners are stable."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - n * 0.05).reshape(shape) + rng.uniform(-0.02, 0.02, shape)


def _case_conv2d(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, k + 4)), int(rng.integers(k, k + 4))
    x = Tensor(rng.standard_normal((n, c, h, w)))
    weight = Tensor(rng.standard_normal((o, c, k, k)))
    bias = Tensor(rng.standard_normal(o))
    oh, ow = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    r = rng.standard_normal((n, o, oh, ow))
    return lambda a, b, c_: _weighted_sum(F.conv2d(a, b, c_, stride, pad), r), [x, weight, bias]


def _case_batchnorm2d(rng):
    n, c = int(rng.integers(2, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = Tensor(rng.standard_normal((n, c, h, w)))
    gamma = Tensor(rng.uniform(0.5, 1.5, c))
    beta = Tensor(rng.standard_normal(c))
    r = rng.standard_normal((n, c, h, w))
    return lambda a, g, b: _weighted_sum(F.batchnorm2d(a, g, b, training=True), r), [x, gamma, beta]


def _case_relu(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    x = Tensor(_away_from_zero(rng, shape))
    r = rng.standard_normal(shape)
    return lambda a: _weighted_sum(F.relu(a), r), [x]


def _case_maxpool2d(rng):
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(k, k + 4)), int(rng.integers(k, k + 4))
    x = Tensor(_distinct(rng, (n, c, h, w)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    r = rng.standard_normal((n, c, oh, ow))
    return lambda a: _weighted_sum(F.maxpool2d(a, k, stride, pad), r), [x]


def _case_global_avgpool(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=4))
    x = Tensor(rng.standard_normal(shape))
    r = rng.standard_normal(shape[:2])
    return lambda a: _weighted_sum(F.global_avgpool(a), r), [x]


def _case_linear(rng):
    n, f, g = (int(s) for s in rng.integers(1, 6, size=3))
    x = Tensor(rng.standard_normal((n, f)))
    weight = Tensor(rng.standard_normal((g, f)))
    bias = Tensor(rng.standard_normal(g))
    r = rng.standard_normal((n, g))
    return lambda a, b, c: _weighted_sum(F.linear(a, b, c), r), [x, weight, bias]


def _case_log_softmax(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    x = Tensor(rng.standard_normal((n, k)) * 3)
    r = rng.standard_normal((n, k))
    return lambda a: _weighted_sum(F.log_softmax(a), r), [x]


def _case_nll_loss(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    logp = Tensor(rng.standard_normal((n, k)))
    targets = rng.integers(0, k, size=n)
    return lambda a: F.nll_loss(a, targets), [logp]


def _case_head(rng):
    """linear -> relu -> dropout -> linear -> relu -> dropout -> linear -> log_softmax -> nll."""
    n, f, h1, h2, k = int(rng.integers(2, 5)), 6, 5, 4, 3
    seed = int(rng.integers(2**32))
    targets = rng.integers(0, k, size=n)
    while True:
        params = [
            Tensor(rng.standard_normal((n, f))),
            Tensor(rng.standard_normal((h1, f)) * 0.5), Tensor(rng.standard_normal(h1) * 0.1),
            Tensor(rng.standard_normal((h2, h1)) * 0.5), Tensor(rng.standard_normal(h2) * 0.1),
            Tensor(rng.standard_normal((k, h2)) * 0.5), Tensor(rng.standard_normal(k) * 0.1),
        ]

        def head(x, w1, b1, w2, b2, w3, b3, probe=None):
            drop = np.random.default_rng(seed)
            z1 = F.linear(x, w1, b1)
            a1 = F.dropout(F.relu(z1), 0.5, True, drop)
            z2 = F.linear(a1, w2, b2)
            a2 = F.dropout(F.relu(z2), 0.5, True, drop)
            if probe is not None:
                probe.extend([z1.data, z2.data])
            return F.nll_loss(F.log_softmax(F.linear(a2, w3, b3)), targets)

        pre = []
        head(*params, probe=pre)
        # keep pre-activations clear of the relu kink so differences stay smooth
        if all(np.min(np.abs(z)) > 1e-3 for z in pre):
            return head, params


@dataclass
class OpCheck:
    name: str
    make_case: Callable[[np.random.Generator], tuple]


OP_CHECKS: list[OpCheck] = [
    OpCheck("conv2d", _case_conv2d),
    OpCheck("batchnorm2d", _case_batchnorm2d),
    OpCheck("relu", _case_relu),
    OpCheck("maxpool2d", _case_maxpool2d),
    OpCheck("global_avgpool", _case_global_avgpool),
    OpCheck("linear", _case_linear),
    OpCheck("log_softmax", _case_log_softmax),
    OpCheck("nll_loss", _case_nll_loss),
    OpCheck("head", _case_head),
]


def run_suite(seed: int = 0, cases_per_op: int = 20, eps: float = DEFAULT_EPS, checks=None) -> dict[str, float]:
    """Max relative error per op over ``cases_per_op`` random float64 shapes."""
    results = {}
    for index, check in enumerate(OP_CHECKS if checks is None else checks):
        rng = np.random.default_rng([seed, index])
        worst = 0.0
        for _ in range(cases_per_op):
            fn, inputs = check.make_case(rng)
            worst = max(worst, grad_check(fn, inputs, eps))
        results[check.name] = worst
    return results
