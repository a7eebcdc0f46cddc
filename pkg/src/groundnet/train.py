"""SGD training with a per-epoch decaying learning rate, and evaluation.

Each instance is compiled into its own graph, so batches hold one instance.
The loss is the negative log-probability of the gold box at the root plus
an L2 penalty ``weight_decay * sum(W**2)`` over every parameter.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .compiler import LOCATE, ComputationGraph, Lexicon, generate_computation_graph
from .modules import GroundNetParams, ModelConfig, Vocabulary, execute, nll_loss
from .scene import Scene
from .tensor import NonFiniteValue, Tape, Tensor, rng_stream
from .treebank import read_ptb

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 6
    lr0: float = 0.01
    lr_decay: float = 0.4
    weight_decay: float = 0.0005
    clip_norm: float = 10.0
    seed: int = 0
    hidden: int = 64
    embed: int = 64
    visual_dim: int = 10
    relate_norm: str = "column_softmax"
    # which non-root nodes count as supporting-object predictions: "all" or "locate"
    support_from: str = "all"

    def __post_init__(self):
        if self.epochs < 1 or self.hidden < 1 or self.embed < 1 or self.visual_dim < 1:
            raise ValueError("epochs and sizes must be positive")
        if self.lr0 < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr0 and weight_decay must be >= 0, clip_norm > 0")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.support_from not in ("all", "locate"):
            raise ValueError(f"support_from must be 'all' or 'locate', got {self.support_from!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden=self.hidden, embed=self.embed, visual_dim=self.visual_dim,
                           relate_norm=self.relate_norm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_schedule(config: TrainConfig) -> list[float]:
    return [config.lr0 * config.lr_decay ** e for e in range(config.epochs)]


def compile_scene(scene: Scene, lexicon: Lexicon | None = None) -> ComputationGraph:
    return generate_computation_graph(read_ptb(scene.parse), lexicon)


def build_vocab(graphs: Sequence[ComputationGraph]) -> Vocabulary:
    return Vocabulary.from_phrases(n.phrase for g in graphs for n in g.nodes.values())


def instance_loss(graph: ComputationGraph, scene: Scene, params: GroundNetParams) -> Tensor:
    result = execute(graph, scene, params)
    return nll_loss(result, scene.index_of(scene.target_id))  # type: ignore[arg-type]


def weight_decay_penalty(params: GroundNetParams, weight_decay: float) -> Tensor:
    """``weight_decay * sum(W**2)`` as a differentiable scalar."""
    from . import tensor as T

    total = Tensor(0.0)
    for p in params.parameters():
        total = T.add(total, T.sum(T.mul(p, p)))
    return T.scalar_scale(total, weight_decay)


def sgd_step(params: GroundNetParams, lr: float, weight_decay: float, clip_norm: float) -> float:
    """Apply one update from accumulated ``.grad``; returns the pre-clip norm."""
    grads = []
    for p in params.parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        grads.append(g + 2.0 * weight_decay * p.data)
    norm = float(np.sqrt(np.sum([np.vdot(g, g) for g in grads])))
    if not np.isfinite(norm):
        raise NonFiniteValue("gradient norm is not finite")
    scale = clip_norm / norm if norm > clip_norm else 1.0
    for p, g in zip(params.parameters(), grads):
        p.data -= (lr * scale) * g
        p.grad = None
    return norm


@dataclass
class EvalReport:
    target_accuracy: float
    target_correct: int
    target_total: int
    supporting_accuracy: float | None
    supporting_correct: int
    supporting_total: int
    instances: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        sup = "n/a" if self.supporting_accuracy is None else f"{100 * self.supporting_accuracy:6.2f}%"
        rows = [
            f"{'metric':<12} {'accuracy':>9} {'correct':>8} {'total':>7}",
            f"{'target':<12} {100 * self.target_accuracy:8.2f}% {self.target_correct:>8} {self.target_total:>7}",
            f"{'supporting':<12} {sup:>9} {self.supporting_correct:>8} {self.supporting_total:>7}",
        ]
        return "\n".join(rows) + "\n"


def evaluate(dataset: Sequence[Scene], params: GroundNetParams, support_from: str = "all",
             lexicon: Lexicon | None = None) -> EvalReport:
    """Target accuracy from the root argmax; supporting accuracy from intermediate argmaxes.

    An instance's supporting prediction is correct when any intermediate
    node's most probable box is one of its gold supporting objects.
    Instances without gold supporting objects are left out of that metric.
    """
    records = []
    t_ok = s_ok = s_total = 0
    for scene in dataset:
        graph = compile_scene(scene, lexicon)
        result = execute(graph, scene, params)
        pred = result.predicted_box(graph.root)
        candidates = [
            nid for nid in sorted(graph.nodes)
            if nid != graph.root and (support_from == "all" or graph.nodes[nid].kind == LOCATE)
        ]
        support_pred = sorted({result.predicted_box(nid) for nid in candidates})
        correct = pred == scene.target_id
        t_ok += correct
        rec = {"id": scene.id, "target": scene.target_id, "predicted": pred, "correct": bool(correct),
               "supporting": sorted(scene.supporting_ids), "supporting_predicted": support_pred,
               "supporting_correct": None}
        if scene.supporting_ids:
            hit = bool(set(support_pred) & set(scene.supporting_ids))
            rec["supporting_correct"] = hit
            s_ok += hit
            s_total += 1
        records.append(rec)
    n = len(dataset)
    return EvalReport(
        target_accuracy=t_ok / n if n else 0.0,
        target_correct=t_ok,
        target_total=n,
        supporting_accuracy=s_ok / s_total if s_total else None,
        supporting_correct=s_ok,
        supporting_total=s_total,
        instances=records,
    )


def train(dataset: Sequence[Scene], config: TrainConfig, val: Sequence[Scene] = (),
          lexicon: Lexicon | None = None, on_epoch: Callable[[dict], None] | None = None,
          params: GroundNetParams | None = None) -> Checkpoint:
    """Train from scratch (or continue ``params``) and return a checkpoint."""
    if not dataset:
        raise TrainingError("empty training split")
    graphs = [compile_scene(s, lexicon) for s in dataset]
    if params is None:
        vocab = build_vocab(graphs)
        params = GroundNetParams.initialize(vocab, config.model_config(), config.seed)
    history = []
    for epoch, lr in enumerate(lr_schedule(config)):
        order = rng_stream(config.seed, 10_000 + epoch).permutation(len(dataset))
        total = 0.0
        for k in order:
            scene, graph = dataset[k], graphs[k]
            try:
                with Tape() as tape:
                    loss = instance_loss(graph, scene, params)
                    tape.backward(loss)
                sgd_step(params, lr, config.weight_decay, config.clip_norm)
            except NonFiniteValue as e:
                raise TrainingError(f"non-finite value on instance {scene.id}: {e}") from e
            total += loss.item()
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / len(dataset)}
        if val:
            entry["val_accuracy"] = evaluate(val, params, config.support_from, lexicon).target_accuracy
        history.append(entry)
        log.info("epoch %d lr %.6g loss %.4f%s", epoch, lr, entry["train_loss"],
                 f" val acc {entry['val_accuracy']:.4f}" if val else "")
        if on_epoch:
            on_epoch(entry)
    meta = {"train_config": config.to_dict(), "history": history, "grad_clip_norm": config.clip_norm}
    return Checkpoint(params, meta)
