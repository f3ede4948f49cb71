"""Finite-difference gradient checks for every primitive and each composed binary layer."""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from binorm import autograd as ag
from binorm.autograd import Variable, finite_diff_check
from binorm.binarize import quantize, quantize_ste
from binorm.layers import BatLayer, BncvLayer, BnfcLayer, BtfBlock, Normalize, causal_mask
from binorm.train import cross_entropy_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _scalar_loss(fn: Callable[[Variable], Variable], x0: np.ndarray, rng: np.random.Generator) -> Callable[[Variable], Variable]:
    """Scalar loss: the output of fn dotted with fixed random weights."""
    shape = fn(ag.constant(np.asarray(x0, dtype=np.float64))).shape
    weights = ag.constant(rng.standard_normal(shape))
    return lambda x: ag.total(ag.mul(fn(x), weights))


def _dense(n_x: int, n_units: int, activation: str, name: str, seed: int) -> BnfcLayer:
    return BnfcLayer(n_x, n_units, activation, name=name, seed=(seed,))


def _mixed_rows(layer: BnfcLayer, rng: np.random.Generator) -> BnfcLayer:
    """Masters whose quantized kernel rows each hold both bit values.

    Normalization cancels a constant row, leaving its input an exactly zero gradient.
    """
    rows, cols = layer.W.shape
    checker = np.add.outer(np.arange(rows), np.arange(cols)) % 2
    layer.W.value = (2.0 * checker - 1.0) + 0.1 * rng.standard_normal((rows, cols))
    return layer


def _attention(emb: int, heads: int, seed: int, prefix: str = "attn") -> BatLayer:
    projections = [_dense(emb, emb, "linear", f"{prefix}.{p}", seed + i) for i, p in enumerate("qkvo")]
    return BatLayer(*projections, num_heads=heads, name=prefix)


def _cases(rng: np.random.Generator, seed: int) -> dict[str, tuple[Callable[[Variable], Variable], np.ndarray]]:
    normal = rng.standard_normal
    b_mat = ag.constant(normal((4, 5)))
    kernel = ag.constant(normal((3, 3, 2, 3)))
    bias = ag.constant(normal(3))
    image = ag.constant(normal((1, 5, 5, 2)))
    other = ag.constant(normal((3, 4)))
    swapped = ag.constant(normal((3, 2, 4)))
    labels = np.array([2])

    fc = _mixed_rows(_dense(6, 4, "relu", "fc", seed), rng)
    conv = BncvLayer(3, 2, 3, "relu", name="conv", seed=(seed, 1))
    attention = _attention(8, 2, seed + 10)
    block = BtfBlock(
        _attention(8, 2, seed + 20, "block.attn"),
        Normalize(8, name="block.norm1"),
        _dense(8, 16, "gelu", "block.ffn1", seed + 30),
        _dense(16, 8, "linear", "block.ffn2", seed + 31),
        Normalize(8, name="block.norm2"),
    )
    mask = causal_mask(3)

    return {
        "add": (lambda x: ag.add(x, other), normal((3, 4))),
        "matmul": (lambda x: ag.matmul(x, b_mat), normal((3, 4))),
        "reshape": (lambda x: ag.mul(ag.reshape(x, (4, 3)), ag.constant(np.arange(12.0).reshape(4, 3))), normal((3, 4))),
        "permute": (lambda x: ag.mul(ag.permute(x, (1, 0, 2)), swapped), normal((2, 3, 4))),
        "conv2d.input": (lambda x: ag.conv2d(x, kernel, bias), normal((1, 5, 5, 2))),
        "conv2d.kernel": (lambda k: ag.conv2d(image, k, bias), normal((3, 3, 2, 3))),
        "maxpool2d": (ag.maxpool2d, normal((1, 4, 4, 2))),
        "global_avg_pool": (ag.global_avg_pool, normal((2, 3, 3, 2))),
        "normalize": (lambda x: ag.normalize_features(x), normal((2, 8))),
        "relu": (lambda x: ag.activation(x, "relu"), normal((3, 5))),
        "gelu": (lambda x: ag.activation(x, "gelu"), normal((3, 5))),
        "softmax": (lambda x: ag.activation(x, "softmax"), normal((3, 5))),
        "cross_entropy": (lambda x: cross_entropy_loss(ag.activation(x, "softmax"), labels), normal((1, 4))),
        "bnfcl": (fc, normal((3, 6))),
        "bncvl": (conv, normal((2, 4, 4, 2))),
        "batl": (lambda x: attention(x, mask=mask), normal((2, 3, 8))),
        "btfb": (lambda x: block(x, mask=mask), normal((2, 3, 8))),
    }


def _ste_case(rng: np.random.Generator) -> CheckResult:
    """Kernel gradient of a binary dense layer against the identity-swapped layer."""
    x = ag.constant(rng.standard_normal((3, 5)))
    b_q = ag.constant(quantize(rng.standard_normal(4)).astype(np.float64))
    weights = ag.constant(rng.standard_normal((3, 4)))

    def layer(kernel: Callable[[Variable], Variable]) -> Callable[[Variable], Variable]:
        def f(w: Variable) -> Variable:
            z = ag.add(ag.matmul(x, kernel(w)), b_q)
            return ag.total(ag.mul(ag.activation(ag.normalize_features(z), "gelu"), weights))
        return f

    w0 = rng.standard_normal((5, 4))
    error = finite_diff_check(layer(quantize_ste), w0, reference=layer(lambda w: w), at=quantize(w0))
    return CheckResult("bnfcl.ste", error)


def run_gradchecks(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Max relative finite-difference error per primitive and per binary layer."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, x0) in _cases(rng, seed).items():
        error = finite_diff_check(_scalar_loss(fn, x0, rng), x0, h)
        results.append(CheckResult(name, error))
        logger.debug("gradcheck %s: %.3e", name, error)
    results.append(_ste_case(rng))
    return results
