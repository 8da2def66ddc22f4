"""Span-query expression trees.

A span query is an immutable tree of :class:`Node` records. Leaves carry
message text (system, user, assistant, fragment); interior nodes either
generate tokens (``G``, ``G1``), join their children (``plus`` is the
commutative join, ``join`` the ordered one), or are sugar that the optimizer
removes (``C`` chat completion, ``R`` retrieval).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional


class Op(str, Enum):
    C = "C"
    R = "R"
    F = "F"
    PLUS = "plus"
    JOIN = "join"
    S = "S"
    A = "A"
    U = "U"
    G = "G"
    G1 = "G1"
    SPAN = "Span"

    def __str__(self) -> str:
        return self.value


LEAF_OPS = frozenset({Op.S, Op.A, Op.U, Op.F})
GENERATE_OPS = frozenset({Op.G, Op.G1})
INTERIOR_OPS = frozenset({Op.C, Op.PLUS, Op.JOIN, Op.G, Op.G1, Op.SPAN})
ROLES = {Op.S: "system", Op.U: "user", Op.A: "assistant", Op.F: "fragment"}

Path = tuple[int, ...]


@dataclass(frozen=True)
class GenParams:
    """Generation knobs. ``max_tokens=None`` lets the model pick the length."""

    max_tokens: Optional[int] = None
    temperature: float = 0.0
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.max_tokens is not None and self.max_tokens < 1:
            out.append("max_tokens must be >= 1")
        if self.temperature < 0:
            out.append("temperature must be >= 0")
        return out


ONE_TOKEN = GenParams(max_tokens=1)


@dataclass(frozen=True)
class RetrievalSpec:
    corpus: str
    query: str
    k: int = 1


@dataclass(frozen=True)
class Node:
    op: Op
    children: tuple[Node, ...] = ()
    content: Optional[str] = None
    gen: Optional[GenParams] = None
    retrieval: Optional[RetrievalSpec] = None
    # Set on an executed inner generate: the (cropped) text it produced.
    output: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.op, Op):
            object.__setattr__(self, "op", Op(self.op))
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_leaf(self) -> bool:
        return self.op in LEAF_OPS

    def with_children(self, children) -> Node:
        return replace(self, children=tuple(children))

    def walk(self, path: Path = ()) -> Iterator[tuple[Path, Node]]:
        """Pre-order traversal yielding ``(path, node)``."""
        yield path, self
        for i, child in enumerate(self.children):
            yield from child.walk(path + (i,))

    def at(self, path: Path) -> Node:
        node = self
        for i in path:
            node = node.children[i]
        return node

    def replace_at(self, path: Path, new: Node) -> Node:
        if not path:
            return new
        i, rest = path[0], path[1:]
        kids = list(self.children)
        kids[i] = kids[i].replace_at(rest, new)
        return self.with_children(kids)

    def size(self) -> int:
        return sum(1 for _ in self.walk())

    def clone(self) -> Node:
        """Deep copy; the result shares no node objects with ``self``."""
        return replace(self, children=tuple(c.clone() for c in self.children))


@dataclass(frozen=True)
class SpanQuery:
    """A span query: a thin handle on the root node."""

    root: Node

    def __iter__(self) -> Iterator[tuple[Path, Node]]:
        return self.root.walk()

    def size(self) -> int:
        return self.root.size()

    def count(self, *ops: Op) -> int:
        return sum(1 for _, n in self if n.op in ops)


def as_node(query) -> Node:
    return query.root if isinstance(query, SpanQuery) else query


# -- builders ---------------------------------------------------------------

def S(text: str) -> Node:
    return Node(Op.S, content=text)


def U(text: str) -> Node:
    return Node(Op.U, content=text)


def A(text: str) -> Node:
    return Node(Op.A, content=text)


def F(text: str) -> Node:
    return Node(Op.F, content=text)


def C(*children: Node, gen: Optional[GenParams] = None) -> Node:
    return Node(Op.C, children, gen=gen or GenParams())


def G(*children: Node, gen: Optional[GenParams] = None) -> Node:
    return Node(Op.G, children, gen=gen or GenParams())


def G1(*children: Node) -> Node:
    return Node(Op.G1, children, gen=ONE_TOKEN)


def plus(*children: Node) -> Node:
    return Node(Op.PLUS, children)


def join(*children: Node) -> Node:
    return Node(Op.JOIN, children)


def span(child: Node) -> Node:
    return Node(Op.SPAN, (child,))


def R(corpus: str, query: str, k: int = 1) -> Node:
    return Node(Op.R, retrieval=RetrievalSpec(corpus, query, k))


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    path: Path
    message: str

    def __str__(self) -> str:
        where = "/".join(map(str, self.path)) or "<root>"
        return f"{where}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def validate(query) -> ValidationReport:
    """Check well-formedness. Never raises; problems come back in the report."""
    report = ValidationReport()
    seen: set[int] = set()

    def bad(path: Path, msg: str) -> None:
        report.violations.append(Violation(path, msg))

    def visit(node, path: Path, stack: frozenset[int]) -> None:
        if id(node) in stack:
            bad(path, "cycle detected")
            return
        if id(node) in seen:
            bad(path, "not a tree: node is shared")
            return
        seen.add(id(node))
        if not isinstance(node, Node) or not isinstance(node.op, Op):
            bad(path, f"unknown operator {getattr(node, 'op', node)!r}")
            return
        op = node.op
        if op in LEAF_OPS:
            if node.children:
                bad(path, f"{op} leaf must not have children")
            if not isinstance(node.content, str):
                bad(path, f"{op} leaf without content")
        elif op is Op.R:
            if node.children:
                bad(path, "R must not have children before desugaring")
            if node.retrieval is None:
                bad(path, "R without retrieval request")
            elif node.retrieval.k < 1:
                bad(path, "R needs k >= 1")
        elif not node.children:
            bad(path, "interior node without children")
        if op not in LEAF_OPS and node.content is not None:
            bad(path, f"{op} must not carry content")
        if op in (Op.C, Op.G, Op.G1):
            if node.gen is None:
                bad(path, f"{op} without generation parameters")
            else:
                for p in node.gen.problems():
                    bad(path, p)
                if op is Op.G1 and node.gen.max_tokens != 1:
                    bad(path, "G1 must have max_tokens = 1")
        elif node.gen is not None:
            bad(path, f"{op} must not carry generation parameters")
        if op is not Op.R and node.retrieval is not None:
            bad(path, f"{op} must not carry a retrieval request")
        if node.output is not None and op not in GENERATE_OPS:
            bad(path, f"{op} must not carry generated output")
        if op is Op.SPAN:
            if len(node.children) != 1 or node.children[0].op not in GENERATE_OPS:
                bad(path, "Span must wrap exactly one G or G1")
        inner = stack | {id(node)}
        for i, child in enumerate(node.children):
            visit(child, path + (i,), inner)

    visit(as_node(query), (), frozenset())
    return report


def is_optimized(query) -> bool:
    return not any(n.op in (Op.C, Op.R) for _, n in as_node(query).walk())
