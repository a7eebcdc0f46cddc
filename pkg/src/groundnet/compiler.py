"""Compile a constituency parse into a graph of Locate/Relate/Intersect nodes.

The recursion looks for the two largest disjoint noun phrases under the
current constituent. With none, the constituent is grounded directly by a
Locate node. With two, the left one is compiled on its own, the right one
is compiled and passed through a Relate node carrying the words between
them, and both branches are joined by an Intersect node::

    (NP (NP red ball) (PP left of (NP blue cube)))
        -> Intersect(Locate[red ball], Relate[left](Locate[blue cube]))
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .treebank import ParseTree, Span, read_ptb

LOCATE = "Locate"
RELATE = "Relate"
INTERSECT = "Intersect"
KINDS = (LOCATE, RELATE, INTERSECT)
ARITY = {LOCATE: 0, RELATE: 1, INTERSECT: 2}

DEFAULT_FUNCTION_WORDS = frozenset({"a", "an", "the", "this", "that", "these", "those", "of"})
NP_PREFIX = "NP"


class CompileError(ValueError):
    pass


class EmptyPhraseAtLocate(CompileError):
    pass


class OverlappingSpans(CompileError):
    pass


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    """Words dropped when decorating nodes with their phrase."""

    function_words: frozenset[str] = DEFAULT_FUNCTION_WORDS

    def content_words(self, words: Iterable[str]) -> list[str]:
        return [w for w in words if w.lower() not in self.function_words]

    @classmethod
    def from_file(cls, path) -> Lexicon:
        """One function word per line; ``#`` starts a comment."""
        words = set()
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    words.add(line.lower())
        return cls(frozenset(words))


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str
    phrase: tuple[str, ...]
    inputs: tuple[int, ...]
    source_span: Span

    def label(self) -> str:
        return f"{self.kind}: {' '.join(self.phrase)}".rstrip()


@dataclass
class ComputationGraph:
    nodes: dict[int, GraphNode]
    root: int
    expression: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.root not in self.nodes:
            raise GraphFormatError(f"root {self.root} is not a node")
        consumers: dict[int, int] = {}
        for node in self.nodes.values():
            if node.kind not in ARITY:
                raise GraphFormatError(f"node {node.id}: unknown kind {node.kind!r}")
            if len(node.inputs) != ARITY[node.kind]:
                raise GraphFormatError(
                    f"node {node.id}: {node.kind} takes {ARITY[node.kind]} inputs, got {len(node.inputs)}"
                )
            if node.kind == LOCATE and not node.phrase:
                raise GraphFormatError(f"node {node.id}: Locate with empty phrase")
            for i in node.inputs:
                if i not in self.nodes:
                    raise GraphFormatError(f"node {node.id}: unknown input {i}")
                if i in consumers:
                    raise GraphFormatError(f"node {i} consumed by both {consumers[i]} and {node.id}")
                consumers[i] = node.id
        if self.root in consumers:
            raise GraphFormatError("root node is consumed by another node")
        orphans = set(self.nodes) - set(consumers) - {self.root}
        if orphans:
            raise GraphFormatError(f"nodes {sorted(orphans)} are not reachable from the root")
        # raises on cycles
        self.topological_order()

    def topological_order(self) -> list[int]:
        """Inputs before consumers; ties resolved by node id."""
        order: list[int] = []
        state: dict[int, int] = {}

        def visit(nid: int) -> None:
            mark = state.get(nid, 0)
            if mark == 2:
                return
            if mark == 1:
                raise GraphFormatError(f"cycle through node {nid}")
            state[nid] = 1
            for i in self.nodes[nid].inputs:
                visit(i)
            state[nid] = 2
            order.append(nid)

        visit(self.root)
        return order

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == kind)

    def depth(self) -> int:
        def d(nid: int) -> int:
            ins = self.nodes[nid].inputs
            return 1 + max((d(i) for i in ins), default=0)

        return d(self.root)


def _rank(node: ParseTree, depth: int) -> tuple[int, int, int]:
    # larger span, then leftmost, then shallowest
    return (-len(node), node.start, depth)


def _is_np(node: ParseTree) -> bool:
    return not node.is_leaf and node.label.startswith(NP_PREFIX)


def find_np(tree: ParseTree, region: Span, *, proper_span: bool = False) -> ParseTree | None:
    """Largest NP among the proper descendants of ``tree`` inside ``region``.

    Ties go to the leftmost start, then the shallowest node. With
    ``proper_span`` set, NPs covering the whole of ``tree`` are skipped.
    """
    lo, hi = region
    best = None
    best_rank = None
    for node, depth in tree.subtrees():
        if depth == 0 or not _is_np(node):
            continue
        if node.start < lo or node.end > hi:
            continue
        if proper_span and node.span == tree.span:
            continue
        r = _rank(node, depth)
        if best_rank is None or r < best_rank:
            best, best_rank = node, r
    return best


def find_pp(tree: ParseTree, left_np: ParseTree, right_np: ParseTree, lexicon: Lexicon | None = None) -> list[str]:
    """Content words strictly between two noun phrases."""
    if left_np.end > right_np.start:
        raise OverlappingSpans(f"NP spans {left_np.span} and {right_np.span} overlap or are out of order")
    lexicon = lexicon or Lexicon()
    words = [leaf.token for leaf in tree.leaves() if left_np.end <= leaf.start and leaf.end <= right_np.start]
    return lexicon.content_words(words)  # type: ignore[arg-type]


def _np_pair(tree: ParseTree) -> tuple[ParseTree | None, ParseTree | None]:
    """The two largest disjoint NP descendants, ordered left to right.

    NPs spanning the whole constituent (unary chains such as ROOT -> NP) are
    skipped so that every recursive call works on a strictly shorter span.
    """
    first = find_np(tree, tree.span, proper_span=True)
    if first is None:
        return None, None
    before = find_np(tree, (tree.start, first.start))
    after = find_np(tree, (first.end, tree.end))
    candidates = [n for n in (before, after) if n is not None]
    if not candidates:
        return first, None
    second = min(candidates, key=lambda n: (-len(n), n.start))
    if second.start < first.start:
        return second, first
    return first, second


class _Builder:
    def __init__(self, tree: ParseTree, lexicon: Lexicon):
        self.root_tree = tree
        self.lexicon = lexicon
        self.nodes: dict[int, GraphNode] = {}

    def emit(self, kind: str, phrase: list[str], inputs: tuple[int, ...], span: Span) -> int:
        nid = len(self.nodes)
        self.nodes[nid] = GraphNode(nid, kind, tuple(phrase), inputs, span)
        return nid

    def locate(self, words: list[str], span: Span) -> int:
        phrase = self.lexicon.content_words(words)
        if not phrase:
            raise EmptyPhraseAtLocate(f"constituent {span} has no content words: {' '.join(words)!r}")
        return self.emit(LOCATE, phrase, (), span)

    def build(self, tree: ParseTree) -> int:
        left, right = _np_pair(tree)
        if left is None:
            return self.locate(tree.tokens(), tree.span)
        if right is None:
            residual = [leaf.token for leaf in tree.leaves() if not (left.start <= leaf.start < left.end)]
            inner = self.build(left)
            if not self.lexicon.content_words(residual):  # type: ignore[arg-type]
                return inner
            loc = self.locate(residual, tree.span)  # type: ignore[arg-type]
            return self.emit(INTERSECT, [], (loc, inner), tree.span)
        relation = find_pp(tree, left, right, self.lexicon)
        left_id = self.build(left)
        right_id = self.build(right)
        rel_id = self.emit(RELATE, relation, (right_id,), (left.end, right.start))
        return self.emit(INTERSECT, [], (left_id, rel_id), tree.span)


def generate_computation_graph(tree: ParseTree, lexicon: Lexicon | None = None) -> ComputationGraph:
    builder = _Builder(tree, lexicon or Lexicon())
    root = builder.build(tree)
    return ComputationGraph(builder.nodes, root, tree.tokens())


# -- serialization ---------------------------------------------------------

GRAPH_FORMAT_VERSION = 1


def graph_to_dict(graph: ComputationGraph) -> dict:
    return {
        "version": GRAPH_FORMAT_VERSION,
        "root": graph.root,
        "expression": list(graph.expression),
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "phrase": list(n.phrase),
                "inputs": list(n.inputs),
                "span": list(n.source_span),
            }
            for n in sorted(graph.nodes.values(), key=lambda n: n.id)
        ],
    }


def graph_from_dict(d: dict) -> ComputationGraph:
    if d.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphFormatError(f"unsupported graph format version {d.get('version')!r}")
    nodes = {}
    for nd in d["nodes"]:
        node = GraphNode(int(nd["id"]), nd["kind"], tuple(nd["phrase"]), tuple(nd["inputs"]), tuple(nd["span"]))
        nodes[node.id] = node
    return ComputationGraph(nodes, int(d["root"]), list(d.get("expression", [])))


def graph_to_json(graph: ComputationGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> ComputationGraph:
    return graph_from_dict(json.loads(text))


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def graph_to_dot(graph: ComputationGraph, annotations: dict[int, str] | None = None,
                 fills: dict[int, str] | None = None) -> str:
    """Graphviz source; edges point from input to consumer.

    ``annotations`` adds a second label line per node, ``fills`` a fill color.
    """
    lines = ["digraph computation_graph {", "  rankdir=BT;", '  node [shape=box, fontname="Helvetica"];']
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        label = node.label()
        if annotations and nid in annotations:
            label += "\\n" + annotations[nid]
        attrs = [f'label="{_dot_escape(label)}"']
        if nid == graph.root:
            attrs.append("peripheries=2")
        if fills and nid in fills:
            attrs.append(f'style=filled, fillcolor="{fills[nid]}"')
        lines.append(f"  n{nid} [{', '.join(attrs)}];")
    for nid in sorted(graph.nodes):
        for i in graph.nodes[nid].inputs:
            lines.append(f"  n{i} -> n{nid};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_graph(graph: ComputationGraph, format: str = "dot") -> str:
    if format == "dot":
        return graph_to_dot(graph)
    if format == "json":
        return graph_to_json(graph)
    raise ValueError(f"unknown format {format!r}")


def compile_ptb(text: str, lexicon: Lexicon | None = None) -> ComputationGraph:
    return generate_computation_graph(read_ptb(text), lexicon)


__all__ = [
    "ARITY", "INTERSECT", "KINDS", "LOCATE", "RELATE", "ComputationGraph", "EmptyPhraseAtLocate",
    "GraphNode", "Lexicon", "OverlappingSpans", "compile_ptb", "export_graph", "find_np", "find_pp",
    "generate_computation_graph", "graph_from_json", "graph_to_dot", "graph_to_json",
]
