"""Finite-difference verification of every differentiable op and module loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .compiler import compile_ptb
from .modules import GroundNetParams, ModelConfig, Vocabulary, execute, locate, nll_loss, relate
from .scene import BoundingBox, Scene
from .tensor import Tensor, grad_check, grad_check_params, rng_stream

TOLERANCE = 1e-4


def _projected(op: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    """Reduce ``op``'s output to a scalar through fixed random weights."""
    w = Tensor(rng.normal(size=out_shape))
    return lambda x: T.sum(T.mul(op(x), w))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """``name -> (scalar function, point)`` for one random draw."""
    A = rng.normal(size=(3, 4))
    B = Tensor(rng.normal(size=(4, 2)))
    C = Tensor(rng.normal(size=(3, 4)))
    row = Tensor(rng.normal(size=(4,)))
    pos = Tensor(np.exp(rng.normal(size=(3, 4))))
    ids = [2, 0, 2, 4]
    h = Tensor(rng.normal(size=3))
    c = Tensor(rng.normal(size=3))
    w_cell = Tensor(rng.normal(size=(12, 5)) * 0.5)
    b_cell = Tensor(rng.normal(size=12) * 0.5)
    cases = {
        "matmul_left": (lambda x: T.matmul(x, B), (3, 2), A),
        "matmul_right": (lambda x: T.matmul(Tensor(A), x), (3, 2), B.data.copy()),
        "matmul_vec": (lambda x: T.matmul(Tensor(A), x), (3,), row.data.copy()),
        "add_broadcast": (lambda x: T.add(x, row), (3, 4), A),
        "add_row": (lambda x: T.add(C, x), (3, 4), row.data.copy()),
        "mul": (lambda x: T.mul(x, C), (3, 4), A),
        "mul_broadcast": (lambda x: T.mul(C, x), (3, 4), row.data.copy()),
        "div": (lambda x: T.div(C, x), (3, 4), pos.data.copy()),
        "concat": (lambda x: T.concat([x, C], axis=0), (6, 4), A),
        "stack": (lambda x: T.stack([x, C]), (2, 3, 4), A),
        "softmax_last": (lambda x: T.softmax(x), (3, 4), A),
        "softmax_cols": (lambda x: T.softmax(x, axis=0), (3, 4), A),
        "l2_normalize": (lambda x: T.l2_normalize(x), (3, 4), A),
        "sigmoid": (T.sigmoid, (3, 4), A * 3),
        "tanh": (T.tanh, (3, 4), A),
        "log": (T.log, (3, 4), pos.data.copy()),
        "embedding_lookup": (lambda x: T.embedding_lookup(x, ids), (4, 4), rng.normal(size=(5, 4))),
        "scalar_scale": (lambda x: T.scalar_scale(x, -2.5), (3, 4), A),
        "sum_all": (lambda x: T.scalar_scale(T.sum(x), 1.0), (), A),
        "sum_axis": (lambda x: T.sum(x, axis=0), (4,), A),
        "take": (lambda x: x[1], (4,), A),
        "reshape": (lambda x: T.reshape(x, (4, 3)), (4, 3), A),
        "transpose": (T.transpose, (4, 3), A),
        "lstm_cell_input": (lambda x: T.concat(T.lstm_cell(x, h, c, w_cell, b_cell)), (6,), rng.normal(size=2)),
        "lstm_cell_weight": (lambda x: T.concat(T.lstm_cell(Tensor(np.ones(2)), h, c, x, b_cell)), (6,),
                             w_cell.data.copy()),
    }
    return {name: (_projected(fn, shape, rng), np.array(point, dtype=np.float64))
            for name, (fn, shape, point) in cases.items()}


def check_ops(points: int = 10, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``points`` random draws."""
    worst: dict[str, float] = {}
    for k in range(points):
        for name, (fn, point) in op_cases(rng_stream(seed, k)).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, point))
    return worst


# a 3-box scene and a 6-word relational expression
CHECK_PARSE = "(NP (NP (JJ red) (NN ball)) (PP (RB left) (IN of) (NP (JJ blue) (NN cube))))"
CHECK_PARSE_TOKENS = ["red", "ball", "left", "of", "blue", "cube"]


def check_scene(rng: np.random.Generator, visual_dim: int = 4) -> Scene:
    boxes = []
    for k in range(3):
        x0, y0 = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(10, 40, size=2)
        boxes.append(BoundingBox(k, float(x0), float(y0), float(x0 + w), float(y0 + h),
                                 tuple(float(v) for v in rng.normal(size=visual_dim))))
    return Scene("gradcheck", 100.0, 100.0, tuple(boxes), tuple(CHECK_PARSE_TOKENS), CHECK_PARSE, 0)


def check_params(seed: int, visual_dim: int = 4, size: int = 6) -> GroundNetParams:
    vocab = Vocabulary(["red", "ball", "left", "blue", "cube"])
    params = GroundNetParams.initialize(vocab, ModelConfig(hidden=size, embed=size, visual_dim=visual_dim), seed)
    # push weights away from the small Xavier range so nonlinearities are exercised
    rng = rng_stream(seed, 999)
    for t in params.parameters():
        t.data += rng.normal(scale=0.3, size=t.shape)
    return params


def check_modules(points: int = 10, seed: int = 0, max_coords: int = 5) -> dict[str, float]:
    """Worst relative error of Locate, Relate and full-graph NLL losses w.r.t. all parameters."""
    graph = compile_ptb(CHECK_PARSE)
    worst = {"locate_nll": 0.0, "relate_nll": 0.0, "end_to_end_nll": 0.0}
    for k in range(points):
        rng = rng_stream(seed, 100 + k)
        scene = check_scene(rng)
        params = check_params(seed * 1000 + k)
        target = int(rng.integers(3))
        anchor = T.softmax(Tensor(rng.normal(size=3)))

        def locate_loss():
            p = locate(["red", "ball"], scene, params)
            return T.scalar_scale(T.log(p[target]), -1.0)

        def relate_loss():
            p = relate(["left", "of"], scene, anchor, params)
            return T.scalar_scale(T.log(p[target]), -1.0)

        def graph_loss():
            return nll_loss(execute(graph, scene, params), target)

        for name, fn in (("locate_nll", locate_loss), ("relate_nll", relate_loss), ("end_to_end_nll", graph_loss)):
            err = grad_check_params(fn, params.parameters(), max_coords=max_coords, rng=rng_stream(seed, 500 + k))
            worst[name] = max(worst[name], err)
    return worst
