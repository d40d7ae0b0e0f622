"""Finite-difference gradient checks for every differentiable block.

Each check builds a small instance of the block from a seed, reduces its
output to a scalar through a fixed random projection, and compares the
analytic gradient of that scalar (with respect to the inputs and all
parameters) against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import CrossBlock, MHAConfig, MultiHeadAttention, MultiscaleBlock
from .fusion import ConcatFusion, GuidedFusion
from .losses import box_loss, cross_entropy, smooth_l1, total_loss, ttc_loss, LossWeights
from .nn import LayerNorm, Linear
from .tensor import Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    block: str
    seed: int
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _proj(rng, out: Tensor) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape))


def _conv3d(rng):
    x = _leaf(rng, 2, 2, 4, 4, 4)
    w = _leaf(rng, 3, 2, 2, 3, 2, scale=0.3)
    b = _leaf(rng, 3)
    stride, pad = (2, 1, 2), (0, 1, 0)
    R = rng.normal(size=(2, 3, *T.conv3d_output_shape((4, 4, 4), (2, 3, 2), stride, pad)))
    return lambda x, w, b: (T.conv3d(x, w, b, stride, pad) * Tensor(R)).sum(), [x, w, b]


def _layer_norm(rng):
    ln = LayerNorm(6)
    ln.gain.data = rng.normal(size=6)
    ln.bias.data = rng.normal(size=6)
    x = _leaf(rng, 3, 6, scale=2.0)
    R = rng.normal(size=(3, 6))
    return lambda x, *_: (ln(x) * Tensor(R)).sum(), [x, *ln.parameters()]


def _mha(rng):
    attn = MultiHeadAttention(rng, MHAConfig(8, heads=2))
    q, kv = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 5, 8)
    mask = rng.random((2, 3, 5)) < 0.7
    mask[..., 0] = True
    R = rng.normal(size=(2, 3, 8))
    return lambda q, kv, *_: (attn(q, kv, mask) * Tensor(R)).sum(), [q, kv, *attn.parameters()]


def _guided(rng):
    fusion = GuidedFusion(rng, MHAConfig(8, heads=2), box_hidden=6)
    patches = _leaf(rng, 2, 4, 8)
    boxes = np.clip(rng.uniform(0.2, 0.8, size=(2, 3, 4)), 0, 1)
    mask = rng.random((2, 4, 3)) < 0.6
    mask[0, 0] = False  # a patch with no visible object passes through
    R = rng.normal(size=(2, 4, 8))
    return lambda p, *_: (fusion(p, boxes, mask) * Tensor(R)).sum(), [patches, *fusion.parameters()]


def _concat(rng):
    fusion = ConcatFusion(rng, MHAConfig(8, heads=2), box_hidden=6)
    patches = _leaf(rng, 2, 4, 8)
    boxes = rng.uniform(0.2, 0.8, size=(2, 3, 4))
    R = rng.normal(size=(2, 7, 8))
    return lambda p, *_: (fusion(p, boxes) * Tensor(R)).sum(), [patches, *fusion.parameters()]


def _multiscale(rng):
    block = MultiscaleBlock(rng, MHAConfig(8, heads=2, kv_pool_stride=(1, 2, 2), q_pool_stride=(1, 1, 2)))
    grid = (2, 2, 4)
    x = _leaf(rng, 2, 16 + 2, 8)
    extra = np.array([[True, False], [True, True]])
    R = rng.normal(size=(2, 8 + 2, 8))
    return lambda x, *_: (block(x, grid, 2, extra)[0] * Tensor(R)).sum(), [x, *block.parameters()]


def _decoder(rng):
    block = CrossBlock(rng, MHAConfig(8, heads=2))
    q, mem = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 5, 8)
    R = rng.normal(size=(2, 3, 8))
    return lambda q, m, *_: (block(q, m) * Tensor(R)).sum(), [q, mem, *block.parameters()]


def _linear_head(n_out):
    def build(rng):
        head = Linear(rng, 8, n_out)
        h = _leaf(rng, 2, 3, 8)
        R = rng.normal(size=(2, 3, n_out))
        return lambda h, *_: (head(h) * Tensor(R)).sum(), [h, *head.parameters()]

    return build


def _box_head(rng):
    head = Linear(rng, 8, 4)
    h = _leaf(rng, 2, 3, 8)
    ref = Tensor(rng.normal(size=(3, 4)))
    is_roi = rng.random((2, 3, 1)) < 0.5
    ref_roi = rng.normal(size=(2, 3, 4))
    R = rng.normal(size=(2, 3, 4))

    def f(h, ref, *_):
        boxes = T.sigmoid(T.where(is_roi, Tensor(ref_roi), ref) + head(h))
        return (boxes * Tensor(R)).sum()

    return f, [h, ref, *head.parameters()]


def _ttc_head(rng):
    head = Linear(rng, 8, 1)
    h = _leaf(rng, 2, 3, 8)
    R = rng.normal(size=(2, 3))
    return lambda h, *_: (T.softplus(head(h)).reshape(2, 3) * Tensor(R)).sum(), [h, *head.parameters()]


def _cross_entropy(rng):
    logits = _leaf(rng, 5, 6, scale=2.0)
    labels = rng.integers(0, 6, size=5)
    w = Tensor(rng.uniform(0.1, 1.0, size=5))
    return lambda z: (cross_entropy(z, labels) * w).sum(), [logits]


def _box_loss(rng):
    pred = Tensor(rng.uniform(0, 1, size=(4, 4)))
    target = rng.uniform(0, 1, size=(4, 4)) + rng.choice([-2.0, 0.0], size=(4, 4))
    return lambda p: box_loss(p, target, "smooth_l1").mean() + box_loss(p, target, "mse").mean(), [pred]


def _ttc_loss(rng):
    pred = Tensor(rng.uniform(0.1, 3, size=6))
    target = rng.uniform(0.25, 2, size=6)
    return lambda p: ttc_loss(p, target, "mse").mean() + ttc_loss(p, target, "smooth_l1").mean(), [pred]


def _total_loss(rng):
    xs = [Tensor(rng.normal(size=3)) for _ in range(4)]
    weights = LossWeights(*rng.uniform(0.1, 2.0, size=4))

    def f(a, b, c, d):
        comps = {"box": smooth_l1(a * 2.0).sum(), "noun": (b * b).sum(), "verb": T.exp(c).sum(), "ttc": T.softplus(d).sum()}
        return total_loss(comps, weights)

    return f, xs


BLOCKS: dict[str, Callable] = {
    "conv3d": _conv3d,
    "layer_norm": _layer_norm,
    "mha": _mha,
    "guided_attention": _guided,
    "concat_fusion": _concat,
    "multiscale_block": _multiscale,
    "decoder_block": _decoder,
    "noun_head": _linear_head(6),
    "verb_head": _linear_head(4),
    "box_head": _box_head,
    "ttc_head": _ttc_head,
    "cross_entropy": _cross_entropy,
    "box_loss": _box_loss,
    "ttc_loss": _ttc_loss,
    "total_loss": _total_loss,
}


def check_block(name: str, seed: int) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    f, inputs = BLOCKS[name](rng)
    err = T.grad_check(f, inputs)
    return CheckResult(name, seed, err, time.perf_counter() - start)


def run_suite(seeds=range(5), blocks=None) -> list[CheckResult]:
    return [check_block(name, s) for name in (blocks or BLOCKS) for s in seeds]


def summarize(results: list[CheckResult]) -> dict[str, float]:
    worst: dict[str, float] = {}
    for r in results:
        worst[r.block] = max(worst.get(r.block, 0.0), r.error)
    return worst
