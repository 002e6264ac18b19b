"""Named finite-difference gradient checks for every composite block.

Each target builds a random problem from a seed and returns an objective plus
the tensors to differentiate; inputs are N(0, 1).
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import attention as attn
from . import ops
from .backbone import ModelConfig, build_model, forward, init_mbconv, mbconv, se_block
from .gradcheck import GroupResult, check_gradients
from .tensor import Tensor
from .training import bce_loss

Problem = tuple[Callable[[], Tensor], dict, int | None]


def _projected(out_fn, rng, shape):
    # a random projection keeps every output element in play
    r = rng.normal(size=shape) / np.sqrt(np.prod(shape))
    return lambda: ops.sum(ops.mul(out_fn(), r))


def _cbam(rng) -> Problem:
    f = Tensor(rng.normal(size=(1, 4, 6, 6)))
    cp = attn.ChannelAttentionParams(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(2, 4))), 2)
    sp = attn.SpatialAttentionParams(Tensor(rng.normal(size=(1, 2, 7, 7)) * 0.3))
    obj = _projected(lambda: attn.cbam(f, cp, sp), rng, f.shape)
    return obj, {"input": f, "channel.w0": cp.w0, "channel.w1": cp.w1, "spatial.kernel": sp.kernel}, None


def _self(rng) -> Problem:
    f = Tensor(rng.normal(size=(1, 4, 3, 3)))
    p = attn.SelfAttentionParams(*(Tensor(rng.normal(size=(4, 4)) * 0.5) for _ in range(3)))
    obj = _projected(lambda: attn.self_attention(f, p), rng, f.shape)
    return obj, {"input": f, "wq": p.wq, "wk": p.wk, "wv": p.wv}, None


def _deformable(rng) -> Problem:
    f = Tensor(rng.normal(size=(1, 3, 7, 7)))
    # non-zero offsets keep sampling points off the integer grid
    p = attn.DeformableAttentionParams(Tensor(rng.normal(size=(18, 3, 3, 3)) * 0.1),
                                       Tensor(rng.normal(size=(3, 3, 3, 3)) / 3.0))
    obj = _projected(lambda: attn.deformable_attention(f, p), rng, f.shape)
    return obj, {"input": f, "offset_kernel": p.offset_kernel, "value_kernel": p.value_kernel}, None


def _se(rng) -> Problem:
    f = Tensor(rng.normal(size=(2, 6, 5, 5)))
    ps = {"input": f, "w_reduce": Tensor(rng.normal(size=(6, 2))), "b_reduce": Tensor(rng.normal(size=2)),
          "w_expand": Tensor(rng.normal(size=(2, 6))), "b_expand": Tensor(rng.normal(size=6))}
    obj = _projected(lambda: se_block(f, ps["w_reduce"], ps["w_expand"], ps["b_reduce"], ps["b_expand"]),
                     rng, f.shape)
    return obj, ps, None


def _mbconv(rng) -> Problem:
    f = Tensor(rng.normal(size=(1, 4, 6, 6)))
    p = init_mbconv(4, 4, 2, 0.25, rng, lambda r, shape, fan: r.normal(size=shape) / np.sqrt(fan))
    for t in (p.se_reduce_b, p.se_expand_b):
        t.data = rng.normal(size=t.shape) * 0.1
    obj = _projected(lambda: mbconv(f, p, stride=1), rng, f.shape)
    return obj, {"input": f, **dict(p.named("block"))}, None


def _model(rng) -> Problem:
    seed = int(rng.integers(2**31))
    m = build_model(ModelConfig(in_channels=3, seed=seed))
    x = Tensor(rng.normal(size=(2, 3, 32, 32)))
    y = np.array([0.0, 1.0])
    obj = lambda: bce_loss(forward(m, x, training=False), y)  # noqa: E731
    return obj, {"input": x, **m.named_parameters()}, 6


TARGETS: dict[str, Callable[[np.random.Generator], Problem]] = {
    "cbam": _cbam, "self": _self, "deformable": _deformable, "se": _se, "mbconv": _mbconv,
    "model": _model,
}


def run_target(name: str, seed: int, max_elements: int | None = None) -> list[GroupResult]:
    rng = np.random.default_rng([seed, list(TARGETS).index(name)])
    objective, params, default_max = TARGETS[name](rng)
    return check_gradients(objective, params, max_elements=max_elements or default_max, rng=rng)
