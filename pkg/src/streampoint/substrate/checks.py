"""Gradient checks for every substrate primitive on several input shapes.

Each case builds random float64 inputs, applies one primitive and contracts
the result with a fixed random weight so every output entry matters.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from streampoint.substrate import tensor as T
from streampoint.substrate.gradcheck import gradient_check
from streampoint.substrate.tensor import Tensor

Case = tuple[list[np.ndarray], Callable[..., Tensor]]


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _cases(rng: np.random.Generator) -> dict[str, list[Case]]:
    n = rng.normal
    c: dict[str, list[Case]] = {}
    c["matmul"] = [
        ([n(size=(2, 3)), n(size=(3, 4))], T.matmul),
        ([n(size=(3, 2, 4)), n(size=(4, 5))], T.matmul),
        ([n(size=(2, 3, 4)), n(size=(2, 4, 2))], T.matmul),
    ]
    for name, op in [("add", T.add), ("sub", T.sub), ("mul", T.mul)]:
        c[name] = [
            ([n(size=(3,)), n(size=(3,))], op),
            ([n(size=(2, 3)), n(size=(3,))], op),
            ([n(size=(2, 1, 4)), n(size=(3, 1))], op),
        ]
    c["div"] = [
        ([n(size=(3,)), _positive(rng, (3,))], T.div),
        ([n(size=(2, 3)), _positive(rng, (3,))], T.div),
        ([n(size=(2, 1, 4)), _positive(rng, (3, 1))], T.div),
    ]
    c["scale"] = [([n(size=s)], lambda x: T.scale(x, -1.7)) for s in [(3,), (2, 3), (2, 3, 4)]]
    c["concat"] = [
        ([n(size=(2, 3)), n(size=(1, 3))], lambda a, b: T.concat([a, b], axis=0)),
        ([n(size=(2, 3)), n(size=(2, 2))], lambda a, b: T.concat([a, b], axis=1)),
        ([n(size=(2, 2, 2)), n(size=(2, 1, 2)), n(size=(2, 3, 2))], lambda *xs: T.concat(xs, axis=1)),
    ]
    c["split"] = [
        ([n(size=(5,))], lambda x: T.split(x, [2, 3], axis=0)[1]),
        ([n(size=(3, 4))], lambda x: T.concat(T.split(x, [1, 1, 2], axis=1)[::-1], axis=1)),
        ([n(size=(2, 3, 4))], lambda x: T.split(x, [2, 1], axis=1)[0]),
    ]
    c["transpose"] = [
        ([n(size=(2, 3))], lambda x: T.transpose(x)),
        ([n(size=(2, 3, 4))], lambda x: T.transpose(x, (1, 0, 2))),
        ([n(size=(2, 3, 4, 1))], lambda x: T.transpose(x, (3, 2, 0, 1))),
    ]
    c["reshape"] = [
        ([n(size=(6,))], lambda x: T.reshape(x, (2, 3))),
        ([n(size=(2, 3, 4))], lambda x: T.reshape(x, (4, 6))),
        ([n(size=(2, 2, 2))], lambda x: T.reshape(x, (8, 1))),
    ]
    c["softmax"] = [([n(size=s) * 2], T.softmax) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["layer_norm"] = [
        ([n(size=(5,)), n(size=(5,)), n(size=(5,))], T.layer_norm),
        ([n(size=(3, 4)), n(size=(4,)), n(size=(4,))], T.layer_norm),
        ([n(size=(2, 3, 6)), n(size=(6,)), n(size=(6,))], T.layer_norm),
    ]
    c["modulated_layer_norm"] = [
        ([n(size=(d,) if i == 0 else (k, d)), n(size=3), n(size=(3, d)), n(size=d), n(size=(3, d)), n(size=d)],
         T.modulated_layer_norm)
        for i, (k, d) in enumerate([(1, 4), (3, 5), (4, 8)])
    ]
    c["gelu"] = [([n(size=s) * 2], T.gelu) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["exp"] = [([n(size=s)], T.exp) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["log"] = [([_positive(rng, s)], T.log) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["sqrt"] = [([_positive(rng, s)], T.sqrt) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["sigmoid"] = [([n(size=s) * 3], T.sigmoid) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["sum"] = [
        ([n(size=(4,))], lambda x: T.tsum(x)),
        ([n(size=(3, 5))], lambda x: T.tsum(x, axis=0)),
        ([n(size=(2, 3, 4))], lambda x: T.tsum(x, axis=(0, 2), keepdims=True)),
    ]
    c["mean"] = [
        ([n(size=(4,))], lambda x: T.mean(x)),
        ([n(size=(3, 5))], lambda x: T.mean(x, axis=-1)),
        ([n(size=(2, 3, 4))], lambda x: T.mean(x, axis=1, keepdims=True)),
    ]
    c["l2norm"] = [([n(size=s)], T.l2norm) for s in [(4,), (3, 5), (2, 3, 4)]]
    c["gather"] = [
        ([n(size=(5,))], lambda x: T.gather(x, [4, 0, 0])),
        ([n(size=(4, 3))], lambda x: T.gather(x, [1, 3, 1, 2])),
        ([n(size=(3, 2, 2))], lambda x: T.gather(x, [2])),
    ]
    c["linear"] = [
        ([n(size=(3,)), n(size=(3, 2)), n(size=(2,))], T.linear),
        ([n(size=(4, 3)), n(size=(3, 5)), n(size=(5,))], T.linear),
        ([n(size=(2, 4, 3)), n(size=(3, 2))], T.linear),
    ]
    c["rope"] = [
        ([n(size=(3, 4))], lambda x: T.rope_apply(x, [0, 1, 5])),
        ([n(size=(2, 4, 8))], lambda x: T.rope_apply(x, [-1, 2, 3, 7])),
        ([n(size=(5, 8))], lambda x: T.rope_apply(x, np.array([[-1, -1], [0, 0], [0, 1], [1, 0], [3, 2]]))),
    ]
    return c


def primitive_gradient_errors(seed: int = 0) -> dict[str, list[float]]:
    """Max relative gradient error of every primitive, one entry per tested shape."""
    rng = np.random.default_rng(seed)
    results: dict[str, list[float]] = {}
    for name, cases in _cases(rng).items():
        errs = []
        for arrays, op in cases:
            inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
            out_shape = op(*inputs).shape
            weight = Tensor(rng.normal(size=out_shape))

            def f(inputs=inputs, op=op, weight=weight):
                return T.tsum(T.mul(op(*inputs), weight))

            errs.append(gradient_check(f, inputs))
        results[name] = errs
    return results
