"""Attend, Locate, Relate and Intersect modules and the graph executor.

All nodes of one graph share a single set of parameters per module type.
Every node produces a probability distribution over the scene's boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .compiler import INTERSECT, LOCATE, RELATE, ComputationGraph
from .scene import SPATIAL_DIM, Scene
from .tensor import Tensor, rng_stream, xavier_init

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
DIST_TOL = 1e-6


class ModuleError(ValueError):
    pass


class EmptyPhrase(ModuleError):
    pass


class FeatureLengthMismatch(ModuleError):
    pass


class DistributionNotNormalized(ModuleError):
    pass


class VanishingMass(ModuleError):
    pass


class NodeExecutionError(ModuleError):
    def __init__(self, node_id: int, kind: str, cause: Exception):
        super().__init__(f"node {node_id} ({kind}): {type(cause).__name__}: {cause}")
        self.node_id = node_id
        self.cause = cause


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = [NULL_TOKEN, UNK_TOKEN]
        self._index = {w: k for k, w in enumerate(self.words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self._index:
            self._index[word] = len(self.words)
            self.words.append(word)
        return self._index[word]

    def ids(self, phrase: Sequence[str]) -> list[int]:
        unk = self._index[UNK_TOKEN]
        return [self._index.get(w, unk) for w in phrase]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    @classmethod
    def from_phrases(cls, phrases: Iterable[Sequence[str]]) -> Vocabulary:
        words = sorted({w for p in phrases for w in p})
        return cls(w for w in words if w not in (NULL_TOKEN, UNK_TOKEN))


@dataclass
class ModelConfig:
    hidden: int = 64
    embed: int = 64
    visual_dim: int = 10
    # "column_softmax": softmax each column of the relation score matrix
    # "renormalize": multiply raw scores with the input, then softmax
    relate_norm: str = "column_softmax"
    # only "span" is implemented; "free_form" and "syntax_guided_locate" are
    # placeholders for the whole-expression attention variants
    attend_input: str = "span"
    null_token: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _lstm_bias(hidden: int) -> Tensor:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return Tensor(b, requires_grad=True)


@dataclass
class GroundNetParams:
    """Text encoder, Locate and Relate parameters.

    ``tensors`` is ordered; that order fixes checkpoint layout and the RNG
    stream each parameter is drawn from.
    """

    vocab: Vocabulary
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, vocab: Vocabulary, config: ModelConfig, seed: int) -> GroundNetParams:
        H, E, D = config.hidden, config.embed, config.visual_dim
        shapes: dict[str, tuple[int, ...]] = {"embedding": (len(vocab), E)}
        for layer, in_dim in (("l1", E), ("l2", 2 * H)):
            for direction in ("fw", "bw"):
                shapes[f"lstm.{layer}.{direction}.weight"] = (4 * H, in_dim + H)
                shapes[f"lstm.{layer}.{direction}.bias"] = (4 * H,)
        shapes["attend.weight"] = (1, 4 * H)
        shapes["locate.proj"] = (E, D + SPATIAL_DIM)
        shapes["locate.score"] = (1, E)
        shapes["relate.proj"] = (E, 2 * SPATIAL_DIM)
        shapes["relate.score"] = (1, E)
        tensors = {}
        for stream, (name, shape) in enumerate(shapes.items()):
            if name.endswith(".bias"):
                t = _lstm_bias(H)
            else:
                t = xavier_init(shape, rng_stream(seed, stream))  # type: ignore[arg-type]
            t.name = name
            tensors[name] = t
        return cls(vocab, config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# -- Attend -----------------------------------------------------------------


def _run_direction(inputs: list[Tensor], weight: Tensor, bias: Tensor, hidden: int, reverse: bool) -> list[Tensor]:
    h = Tensor(np.zeros(hidden))
    c = Tensor(np.zeros(hidden))
    out: list[Tensor | None] = [None] * len(inputs)
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    for t in order:
        h, c = T.lstm_cell(inputs[t], h, c, weight, bias)
        out[t] = h
    return out  # type: ignore[return-value]


def encode_phrase(phrase: Sequence[str], params: GroundNetParams) -> tuple[Tensor, Tensor, Tensor]:
    """Word embeddings ``(T x E)``, per-word states ``(T x 4H)`` and attention ``(T,)``."""
    ids = params.vocab.ids(phrase)
    emb = T.embedding_lookup(params["embedding"], ids)
    H = params.config.hidden
    xs = [emb[t] for t in range(len(ids))]
    f1 = _run_direction(xs, params["lstm.l1.fw.weight"], params["lstm.l1.fw.bias"], H, reverse=False)
    b1 = _run_direction(xs, params["lstm.l1.bw.weight"], params["lstm.l1.bw.bias"], H, reverse=True)
    mid = [T.concat([f, b]) for f, b in zip(f1, b1)]
    f2 = _run_direction(mid, params["lstm.l2.fw.weight"], params["lstm.l2.fw.bias"], H, reverse=False)
    b2 = _run_direction(mid, params["lstm.l2.bw.weight"], params["lstm.l2.bw.bias"], H, reverse=True)
    states = T.stack([T.concat([f1[t], b1[t], f2[t], b2[t]]) for t in range(len(ids))])
    scores = T.reshape(T.matmul(states, T.transpose(params["attend.weight"])), (len(ids),))
    return emb, states, T.softmax(scores)


def attend(phrase: Sequence[str], params: GroundNetParams) -> Tensor:
    """Attention-weighted average of the phrase's word embeddings (length E)."""
    phrase = list(phrase)
    if not phrase:
        if not params.config.null_token:
            raise EmptyPhrase("cannot attend over an empty phrase")
        phrase = [NULL_TOKEN]
    if len(phrase) == 1:
        # softmax over a single word is exactly 1; the recurrent states
        # cannot influence the output or receive gradient
        return T.reshape(T.embedding_lookup(params["embedding"], params.vocab.ids(phrase)), (params.config.embed,))
    emb, _, weights = encode_phrase(phrase, params)
    return T.matmul(weights, emb)


# -- Locate / Relate / Intersect -------------------------------------------


def _check_features(scene: Scene, params: GroundNetParams) -> None:
    if scene.feature_dim != params.config.visual_dim:
        raise FeatureLengthMismatch(
            f"scene {scene.id} has {scene.feature_dim} visual features, model expects {params.config.visual_dim}"
        )


def box_features(scene: Scene) -> np.ndarray:
    """``[visual, spatial]`` rows, one per box."""
    return np.concatenate([scene.visual_matrix(), scene.spatial_matrix()], axis=1)


def pair_features(scene: Scene) -> np.ndarray:
    """Row ``i * R + j`` holds ``[spatial_i, spatial_j]``."""
    sp = scene.spatial_matrix()
    R = len(sp)
    return np.concatenate([np.repeat(sp, R, axis=0), np.tile(sp, (R, 1))], axis=1)


def _score(features: Tensor, text: Tensor, proj: Tensor, score: Tensor) -> Tensor:
    joint = T.mul(T.matmul(features, T.transpose(proj)), text)
    joint = T.l2_normalize(joint, axis=-1)
    s = T.matmul(joint, T.transpose(score))
    return T.reshape(s, (features.shape[0],))


def locate(phrase: Sequence[str], scene: Scene, params: GroundNetParams, text: Tensor | None = None) -> Tensor:
    _check_features(scene, params)
    text = attend(phrase, params) if text is None else text
    scores = _score(Tensor(box_features(scene)), text, params["locate.proj"], params["locate.score"])
    return T.softmax(scores)


def _check_distribution(p: Tensor, what: str) -> None:
    d = p.data
    if d.ndim != 1 or abs(d.sum() - 1.0) > DIST_TOL or (d < 0).any():
        raise DistributionNotNormalized(f"{what} is not a probability vector (sum={d.sum():.9f})")


def relation_matrix(phrase: Sequence[str], scene: Scene, params: GroundNetParams,
                    text: Tensor | None = None) -> Tensor:
    """Raw ``R x R`` relation scores, entry ``[i, j]`` for box i relative to box j."""
    text = attend(phrase, params) if text is None else text
    R = len(scene.boxes)
    flat = _score(Tensor(pair_features(scene)), text, params["relate.proj"], params["relate.score"])
    return T.reshape(flat, (R, R))


def relate(phrase: Sequence[str], scene: Scene, input_dist: Tensor, params: GroundNetParams,
           text: Tensor | None = None) -> Tensor:
    _check_distribution(input_dist, "relate input")
    if input_dist.shape[0] != len(scene.boxes):
        raise FeatureLengthMismatch(f"input has {input_dist.shape[0]} entries for {len(scene.boxes)} boxes")
    scores = relation_matrix(phrase, scene, params, text)
    if params.config.relate_norm == "column_softmax":
        return T.matmul(T.softmax(scores, axis=0), input_dist)
    if params.config.relate_norm == "renormalize":
        return T.softmax(T.matmul(scores, input_dist))
    raise ValueError(f"unknown relate_norm {params.config.relate_norm!r}")


def intersect(p: Tensor, q: Tensor) -> Tensor:
    _check_distribution(p, "intersect input")
    _check_distribution(q, "intersect input")
    prod = T.mul(p, q)
    total = T.sum(prod)
    if total.item() < 1e-12:
        raise VanishingMass(f"product mass {total.item():.3e} too small to renormalize")
    return T.div(prod, total)


# -- executor ---------------------------------------------------------------


@dataclass
class GroundingResult:
    box_ids: list[int]
    outputs: dict[int, Tensor]
    root: int

    def distribution(self, node_id: int) -> np.ndarray:
        return self.outputs[node_id].data

    @property
    def distributions(self) -> dict[int, np.ndarray]:
        return {nid: t.data for nid, t in self.outputs.items()}

    def argmax(self, node_id: int) -> int:
        """Index (not id) of the most probable box; first index on ties."""
        return int(np.argmax(self.outputs[node_id].data))

    def predicted_box(self, node_id: int) -> int:
        return self.box_ids[self.argmax(node_id)]

    @property
    def root_distribution(self) -> Tensor:
        return self.outputs[self.root]

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "box_ids": list(self.box_ids),
            "nodes": {
                str(nid): {
                    "distribution": [float(v) for v in self.outputs[nid].data],
                    "argmax_box": self.predicted_box(nid),
                }
                for nid in sorted(self.outputs)
            },
        }


def execute(graph: ComputationGraph, scene: Scene, params: GroundNetParams) -> GroundingResult:
    if params.config.attend_input != "span":
        raise NotImplementedError(f"attend_input={params.config.attend_input!r} is not implemented")
    outputs: dict[int, Tensor] = {}
    for nid in graph.topological_order():
        node = graph.nodes[nid]
        try:
            if node.kind == LOCATE:
                out = locate(node.phrase, scene, params)
            elif node.kind == RELATE:
                out = relate(node.phrase, scene, outputs[node.inputs[0]], params)
            elif node.kind == INTERSECT:
                out = intersect(outputs[node.inputs[0]], outputs[node.inputs[1]])
            else:
                raise ModuleError(f"unknown node kind {node.kind!r}")
        except (ModuleError, T.NonFiniteValue, T.ShapeMismatch) as e:
            raise NodeExecutionError(nid, node.kind, e) from e
        outputs[nid] = out
    return GroundingResult(scene.box_ids, outputs, graph.root)


def nll_loss(result: GroundingResult, target_index: int) -> Tensor:
    """Negative log-probability of the gold box under the root distribution."""
    p = T.take(result.root_distribution, target_index)
    return T.scalar_scale(T.log(p), -1.0)
