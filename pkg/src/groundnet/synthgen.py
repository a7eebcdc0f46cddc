"""Synthetic box worlds with gold parses, targets and supporting objects.

Objects sit in distinct cells of a grid. Each has a shape and a color; the
visual feature vector is ``one_hot(shape) ++ one_hot(color)`` plus Gaussian
noise. Referring expressions follow two templates::

    (NP (JJ color) (NN shape))
    (NP NP (PP <relation words> NP))

and are only emitted when a brute-force evaluator over the scene geometry
finds exactly one referent. For relational expressions the head noun phrase
is deliberately ambiguous, so the relation is needed to pick the target.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import BoundingBox, Scene, save_dataset
from .tensor import rng_stream
from .treebank import ParseTree, read_ptb

SPLITS = ("train", "val", "test")

# relation name -> (tag, word) leaves of the PP before the embedded NP
RELATION_WORDS: dict[str, tuple[tuple[str, str], ...]] = {
    "left of": (("RB", "left"), ("IN", "of")),
    "right of": (("RB", "right"), ("IN", "of")),
    "above": (("IN", "above"),),
    "below": (("IN", "below"),),
    "nearest": (("JJS", "nearest"),),
}


class GenerationExhausted(RuntimeError):
    pass


class GroundingError(ValueError):
    pass


class NotUnique(GroundingError):
    pass


class Unsatisfiable(GroundingError):
    pass


@dataclass
class WorldSpec:
    shapes: list[str] = field(default_factory=lambda: ["ball", "cube", "cone", "cylinder", "pyramid"])
    colors: list[str] = field(default_factory=lambda: ["red", "green", "blue", "yellow", "purple"])
    relations: list[str] = field(default_factory=lambda: list(RELATION_WORDS))
    grid: tuple[int, int] = (5, 5)
    cell: float = 64.0
    boxes_per_scene: tuple[int, int] = (4, 7)
    max_depth: int = 3
    noise: float = 0.05
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.grid = tuple(self.grid)  # type: ignore[assignment]
        self.boxes_per_scene = tuple(self.boxes_per_scene)  # type: ignore[assignment]
        if not self.shapes or not self.colors or not self.relations:
            raise ValueError("shape, color and relation vocabularies must be non-empty")
        unknown = set(self.relations) - set(RELATION_WORDS)
        if unknown:
            raise ValueError(f"unknown relations {sorted(unknown)}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        lo, hi = self.boxes_per_scene
        if not 1 <= lo <= hi <= self.grid[0] * self.grid[1]:
            raise ValueError(f"boxes_per_scene {self.boxes_per_scene} does not fit a {self.grid} grid")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    @property
    def visual_dim(self) -> int:
        return len(self.shapes) + len(self.colors)

    @property
    def image_size(self) -> tuple[float, float]:
        return self.grid[1] * self.cell, self.grid[0] * self.cell

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorldSpec:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def from_file(cls, path) -> WorldSpec:
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# -- expressions ------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    """A noun phrase: attributes, optionally refined by a relation to another Ref."""

    shape: str | None
    color: str | None
    relation: str | None = None
    anchor: Ref | None = None

    @property
    def depth(self) -> int:
        return 1 if self.anchor is None else 1 + self.anchor.depth

    def ptb(self) -> str:
        leaves = []
        if self.color is not None:
            leaves.append(f"(JJ {self.color})")
        if self.shape is not None:
            leaves.append(f"(NN {self.shape})")
        head = f"(NP {' '.join(leaves)})"
        if self.anchor is None:
            return head
        rel = " ".join(f"({tag} {word})" for tag, word in RELATION_WORDS[self.relation])  # type: ignore[index]
        return f"(NP {head} (PP {rel} {self.anchor.ptb()}))"


def parse_to_ref(tree: ParseTree, spec: WorldSpec) -> Ref:
    """Read a template parse back into a :class:`Ref` (inverse of ``Ref.ptb``)."""
    if all(c.is_leaf for c in tree.children):
        shape = color = None
        for word in tree.tokens():
            if word in spec.shapes:
                shape = word
            elif word in spec.colors:
                color = word
            else:
                raise GroundingError(f"unknown attribute word {word!r}")
        if shape is None and color is None:
            raise GroundingError("noun phrase without attributes")
        return Ref(shape, color)
    if len(tree.children) != 2 or tree.children[1].label != "PP":
        raise GroundingError(f"unexpected constituent {tree}")
    head = parse_to_ref(tree.children[0], spec)
    pp = tree.children[1]
    words = " ".join(c.token for c in pp.children if c.is_leaf)  # type: ignore[misc]
    anchors = [c for c in pp.children if not c.is_leaf]
    if words not in RELATION_WORDS or len(anchors) != 1:
        raise GroundingError(f"unexpected prepositional phrase {pp}")
    if head.anchor is not None:
        raise GroundingError("relational heads are not part of the template grammar")
    return Ref(head.shape, head.color, words, parse_to_ref(anchors[0], spec))


# -- logical grounding -------------------------------------------------------


def _attrs(box: BoundingBox, spec: WorldSpec) -> tuple[str, str]:
    f = box.features
    n = len(spec.shapes)
    return spec.shapes[int(np.argmax(f[:n]))], spec.colors[int(np.argmax(f[n:]))]


def holds(relation: str, x: BoundingBox, anchor: BoundingBox) -> bool:
    """Binary spatial predicates on box centers (image y grows downwards)."""
    (xx, xy), (ax, ay) = x.center, anchor.center
    if relation == "left of":
        return xx < ax
    if relation == "right of":
        return xx > ax
    if relation == "above":
        return xy < ay
    if relation == "below":
        return xy > ay
    raise ValueError(f"{relation!r} is not a binary predicate")


def _distance(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


def _filter(relation: str, candidates: list[BoundingBox], anchor: BoundingBox) -> list[BoundingBox]:
    candidates = [c for c in candidates if c.id != anchor.id]
    if relation == "nearest":
        if not candidates:
            return []
        best = min(_distance(c, anchor) for c in candidates)
        return [c for c in candidates if _distance(c, anchor) == best]
    return [c for c in candidates if holds(relation, c, anchor)]


def denote(ref: Ref, scene: Scene, spec: WorldSpec, supporting: list[int] | None = None) -> list[BoundingBox]:
    """All boxes satisfying ``ref``; referents of anchors go to ``supporting``."""
    out = []
    for b in scene.boxes:
        shape, color = _attrs(b, spec)
        if (ref.shape is None or ref.shape == shape) and (ref.color is None or ref.color == color):
            out.append(b)
    if ref.anchor is None:
        return out
    anchors = denote(ref.anchor, scene, spec, supporting)
    if len(anchors) != 1:
        kind = NotUnique if anchors else Unsatisfiable
        raise kind(f"embedded phrase {ref.anchor.ptb()} has {len(anchors)} referents")
    if supporting is not None:
        supporting.append(anchors[0].id)
    return _filter(ref.relation, out, anchors[0])  # type: ignore[arg-type]


def logical_ground(expression: ParseTree | str | Ref, scene: Scene, spec: WorldSpec) -> tuple[int, frozenset[int]]:
    """Unique target id and the supporting ids of an expression, by enumeration."""
    if isinstance(expression, str):
        expression = read_ptb(expression)
    ref = expression if isinstance(expression, Ref) else parse_to_ref(expression, spec)
    supporting: list[int] = []
    found = denote(ref, scene, spec, supporting)
    if not found:
        raise Unsatisfiable(f"no box satisfies {ref.ptb()}")
    if len(found) > 1:
        raise NotUnique(f"{len(found)} boxes satisfy {ref.ptb()}")
    return found[0].id, frozenset(supporting)


# -- generation -------------------------------------------------------------

_MIN_BOXES = {1: 1, 2: 3, 3: 5}


def _min_boxes(depth: int) -> int:
    return _MIN_BOXES.get(depth, 2 * depth - 1)


def _place(spec: WorldSpec, rng: np.random.Generator, attrs: list[tuple[int, int]]) -> list[BoundingBox]:
    rows, cols = spec.grid
    cells = rng.choice(rows * cols, size=len(attrs), replace=False)
    boxes = []
    for k, (cell, (shape, color)) in enumerate(zip(cells, attrs)):
        r, c = divmod(int(cell), cols)
        cx, cy = (c + 0.5) * spec.cell, (r + 0.5) * spec.cell
        w, h = rng.uniform(0.5, 0.95, size=2) * spec.cell
        feats = np.zeros(spec.visual_dim)
        feats[shape] = 1.0
        feats[len(spec.shapes) + color] = 1.0
        if spec.noise > 0:
            feats = feats + rng.normal(0.0, spec.noise, size=spec.visual_dim)
        boxes.append(BoundingBox(k, float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2),
                                 tuple(float(v) for v in feats)))
    return boxes


def _expressions(boxes: list[BoundingBox], spec: WorldSpec, depth: int,
                 attrs: list[tuple[str, str]]) -> list[tuple[int, Ref]]:
    """Every uniquely-referring expression of exactly ``depth`` levels."""
    groups: dict[tuple[str, str], list[BoundingBox]] = {}
    for b, a in zip(boxes, attrs):
        groups.setdefault(a, []).append(b)
    level = [(b.id, Ref(a[0], a[1])) for b, a in zip(boxes, attrs) if len(groups[a]) == 1]
    for _ in range(depth - 1):
        nxt = []
        for t, ta in zip(boxes, attrs):
            if len(groups[ta]) < 2:
                continue
            for rel in spec.relations:
                for anchor_id, anchor_ref in level:
                    anchor = boxes[anchor_id]
                    if attrs[anchor_id] == ta:
                        continue
                    hits = _filter(rel, groups[ta], anchor)
                    if len(hits) == 1 and hits[0].id == t.id:
                        nxt.append((t.id, Ref(ta[0], ta[1], rel, anchor_ref)))
        level = nxt
    return level


def gen_scene(spec: WorldSpec, rng: np.random.Generator, scene_id: str = "s0", depth: int | None = None) -> Scene:
    lo, hi = spec.boxes_per_scene
    if depth is None:
        feasible = [d for d in range(1, spec.max_depth + 1) if _min_boxes(d) <= hi]
        depth = int(rng.choice(feasible))
    if _min_boxes(depth) > hi:
        raise GenerationExhausted(f"depth {depth} needs at least {_min_boxes(depth)} boxes")
    n_shapes, n_colors = len(spec.shapes), len(spec.colors)
    width, height = spec.image_size
    for _ in range(spec.max_retries):
        n = int(rng.integers(max(lo, _min_boxes(depth)), hi + 1))
        attrs = [(int(rng.integers(n_shapes)), int(rng.integers(n_colors))) for _ in range(n)]
        # plant look-alikes so each relational level has an ambiguous head
        if depth >= 2:
            attrs[1] = attrs[0]
        if depth >= 3:
            attrs[3] = attrs[2]
        boxes = _place(spec, rng, attrs)
        # read attributes back the way the evaluator does, noise included
        names = [_attrs(b, spec) for b in boxes]
        options = _expressions(boxes, spec, depth, names)
        if not options:
            continue
        target, ref = options[int(rng.integers(len(options)))]
        parse = ref.ptb()
        scene = Scene(scene_id, width, height, tuple(boxes), tuple(read_ptb(parse).tokens()), parse)
        gold, supporting = logical_ground(ref, scene, spec)
        if gold != target:
            raise AssertionError(f"generator and evaluator disagree on {parse}")
        return Scene(scene_id, width, height, tuple(boxes), scene.expression, parse, gold, supporting)
    raise GenerationExhausted(f"no unique depth-{depth} expression after {spec.max_retries} scenes")


def split_sizes(total: int, ratios: Sequence[float] = (0.9, 0.025, 0.075)) -> dict[str, int]:
    sizes = [int(round(total * r)) for r in ratios]
    sizes[0] = total - sizes[1] - sizes[2]
    return dict(zip(SPLITS, sizes))


def gen_dataset(spec: WorldSpec, sizes: dict[str, int]) -> dict[str, list[Scene]]:
    """Scenes for each split; scene ``k`` draws from its own RNG stream."""
    total = sum(sizes.get(s, 0) for s in SPLITS)
    order = rng_stream(spec.seed, 0).permutation(total)
    out: dict[str, list[Scene]] = {}
    start = 0
    for split in SPLITS:
        n = sizes.get(split, 0)
        ids = sorted(int(k) for k in order[start:start + n])
        start += n
        out[split] = [gen_scene(spec, rng_stream(spec.seed, 1 + k), f"s{k:06d}") for k in ids]
    return out


def write_dataset(spec: WorldSpec, sizes: dict[str, int], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = gen_dataset(spec, sizes)
    paths = {}
    for split, scenes in data.items():
        paths[split] = out_dir / f"{split}.jsonl"
        save_dataset(scenes, paths[split])
    with open(out_dir / "world.json", "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return paths


def random_parse(spec: WorldSpec, rng: np.random.Generator, max_depth: int = 3) -> str:
    """A template-grammar tree with relational nesting on either side.

    Used to exercise the compiler; no scene is involved.
    """

    def simple() -> str:
        leaves = []
        if rng.random() < 0.8:
            leaves.append(f"(JJ {spec.colors[rng.integers(len(spec.colors))]})")
        if rng.random() < 0.3:
            leaves.insert(0, "(DT the)")
        leaves.append(f"(NN {spec.shapes[rng.integers(len(spec.shapes))]})")
        return f"(NP {' '.join(leaves)})"

    def build(budget: int) -> str:
        if budget <= 1 or rng.random() < 0.3:
            return simple()
        left_budget = int(rng.integers(1, budget))
        rel = spec.relations[rng.integers(len(spec.relations))]
        words = " ".join(f"({t} {w})" for t, w in RELATION_WORDS[rel])
        return f"(NP {build(left_budget)} (PP {words} {build(budget - left_budget)}))"

    return build(max_depth)
