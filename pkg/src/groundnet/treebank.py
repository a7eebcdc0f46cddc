"""Reading, writing and querying bracketed constituency trees.

Trees use the Penn Treebank bracket notation, e.g.
``(NP (DT the) (JJ red) (NN ball))``. Token indices (not character offsets)
are the coordinate system: every node carries a half-open ``span``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

Span = tuple[int, int]


class TreeError(ValueError):
    """Malformed bracketed input. ``offset`` is a byte offset into the text."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnbalancedParens(TreeError):
    pass


class EmptyTree(TreeError):
    pass


class LeafWithChildren(TreeError):
    pass


class SpanOutOfRange(ValueError):
    pass


@dataclass(frozen=True, eq=True)
class ParseTree:
    label: str
    children: tuple[ParseTree, ...] = ()
    token: str | None = None
    span: Span = (0, 0)

    @property
    def is_leaf(self) -> bool:
        return self.token is not None

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]

    def __len__(self) -> int:
        return self.span[1] - self.span[0]

    def leaves(self) -> list[ParseTree]:
        if self.is_leaf:
            return [self]
        out: list[ParseTree] = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def tokens(self) -> list[str]:
        return [leaf.token for leaf in self.leaves()]  # type: ignore[misc]

    def subtrees(self, depth: int = 0) -> Iterator[tuple[ParseTree, int]]:
        """Pre-order walk yielding ``(node, depth)`` pairs, self included."""
        yield self, depth
        for child in self.children:
            yield from child.subtrees(depth + 1)

    def __str__(self) -> str:
        return write_ptb(self)


_TOKEN_RE = re.compile(rb"\(|\)|[^()\s]+")


def read_ptb(text: str | bytes) -> ParseTree:
    """Parse one bracketed tree and assign token spans left to right.

    A bare outer bracket with no label, as produced by some treebank
    dumps (``( (NP ...) )``), is unwrapped.
    """
    raw = text.encode("utf-8") if isinstance(text, str) else text
    lexemes = [(m.group(), m.start()) for m in _TOKEN_RE.finditer(raw)]
    if not lexemes:
        raise EmptyTree("no tree found", 0)
    if lexemes[0][0] != b"(":
        raise UnbalancedParens("tree must start with '('", lexemes[0][1])

    pos = 0
    counter = [0]

    def parse_node() -> ParseTree:
        nonlocal pos
        open_offset = lexemes[pos][1]
        pos += 1  # consume "("
        if pos >= len(lexemes):
            raise UnbalancedParens("unexpected end of input", len(raw))
        label = ""
        if lexemes[pos][0] not in (b"(", b")"):
            label = lexemes[pos][0].decode("utf-8")
            pos += 1
        children: list[ParseTree] = []
        token: str | None = None
        start = counter[0]
        while True:
            if pos >= len(lexemes):
                raise UnbalancedParens("unexpected end of input", len(raw))
            lex, off = lexemes[pos]
            if lex == b")":
                pos += 1
                break
            if lex == b"(":
                if token is not None:
                    raise LeafWithChildren("leaf token followed by a subtree", off)
                children.append(parse_node())
            else:
                if children:
                    raise LeafWithChildren("token mixed with subtrees", off)
                if token is not None:
                    raise LeafWithChildren("leaf with more than one token", off)
                token = lex.decode("utf-8")
                pos += 1
        if token is not None:
            counter[0] += 1
            return ParseTree(label, (), token, (start, start + 1))
        if not children:
            raise EmptyTree("constituent without children or token", open_offset)
        if not label and len(children) == 1:
            return children[0]
        return ParseTree(label, tuple(children), None, (start, counter[0]))

    tree = parse_node()
    if pos != len(lexemes):
        raise UnbalancedParens("trailing input after tree", lexemes[pos][1])
    return tree


def write_ptb(tree: ParseTree) -> str:
    """Canonical single-line bracketed form (single spaces, no padding)."""
    if tree.is_leaf:
        return f"({tree.label} {tree.token})"
    inner = " ".join(write_ptb(c) for c in tree.children)
    return f"({tree.label} {inner})"


def yield_tokens(tree: ParseTree, span: Span) -> list[str]:
    start, end = span
    if start > end or start < tree.start or end > tree.end:
        raise SpanOutOfRange(f"span {span} outside tree span {tree.span}")
    return [leaf.token for leaf in tree.leaves() if start <= leaf.start and leaf.end <= end]  # type: ignore[misc]


def read_treebank(path) -> list[ParseTree]:
    """One tree per non-blank line."""
    with open(path, encoding="utf-8") as f:
        return [read_ptb(line) for line in f if line.strip()]
