"""Fixed-point tree rewriting for span queries.

The optimizer scans the tree in pre-order, applies the first match of the
highest-priority rule, splices the replacement in, and repeats until nothing
matches. Rule priority is list order; the default set is desugaring, then
``plus`` simplification, then ``plus`` distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

from .query import (
    ONE_TOKEN,
    GenParams,
    Node,
    Op,
    Path,
    RetrievalSpec,
    SpanQuery,
    as_node,
)


class RetrievalError(LookupError):
    def __init__(self, spec: RetrievalSpec, reason: str):
        super().__init__(f"retrieval failed for corpus {spec.corpus!r} ({reason})")
        self.spec = spec


class OptimizeError(RuntimeError):
    """The rule set did not converge within ``max_iters``."""

    def __init__(self, message: str, trace: OptimizeTrace):
        super().__init__(message)
        self.trace = trace


class Retriever(Protocol):
    def retrieve(self, spec: RetrievalSpec) -> Sequence[str]: ...


@dataclass(frozen=True)
class RewriteRule:
    name: str
    matches: Callable[[Node], bool]
    build: Callable[[Node], Node]


@dataclass
class OptimizeTrace:
    steps: list[tuple[str, Path]] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.steps)

    def to_json(self, **kw) -> str:
        data = {
            "iterations": self.iterations,
            "steps": [{"rule": r, "path": list(p)} for r, p in self.steps],
        }
        return json.dumps(data, **kw)


# -- individual rewrites ----------------------------------------------------

def desugar_chat(node: Node) -> Node:
    """C[x...] -> G[join[x...]]; the G keeps the chat node's parameters."""
    assert node.op is Op.C
    return Node(Op.G, (Node(Op.JOIN, node.children),), gen=node.gen or GenParams())


def desugar_retrieval(node: Node, retriever: Optional[Retriever]) -> Node:
    """R -> plus[G1[F1], ..., G1[Fk]].

    Each fragment becomes a one-token generate so it can be prefilled into the
    cache on its own, independent of whatever precedes it in the final prompt.
    """
    assert node.op is Op.R
    spec = node.retrieval
    if retriever is None:
        raise RetrievalError(spec, "no retriever configured")
    fragments = list(retriever.retrieve(spec))
    if not fragments:
        raise RetrievalError(spec, "empty result")
    return Node(
        Op.PLUS,
        tuple(Node(Op.G1, (Node(Op.F, content=f),), gen=ONE_TOKEN) for f in fragments),
    )


def simplify_plus(node: Node) -> Node:
    """Splice nested ``plus`` children into their ``plus`` parent, in order."""
    assert node.op is Op.PLUS
    kids: list[Node] = []
    for child in node.children:
        if child.op is Op.PLUS:
            kids.extend(simplify_plus(child).children)
        else:
            kids.append(child)
    return node.with_children(kids)


def distribute_plus(node: Node) -> Node:
    """Wrap every bare generate under a ``plus`` in a Span.

    The span boundary encloses the generate's input together with its output,
    so wherever the output is reused it arrives prefixed by the same input it
    was generated (and cached) from.
    """
    assert node.op is Op.PLUS
    return node.with_children(
        Node(Op.SPAN, (c,)) if c.op in (Op.G, Op.G1) else c for c in node.children
    )


def _needs_simplify(node: Node) -> bool:
    return node.op is Op.PLUS and any(c.op is Op.PLUS for c in node.children)


def _needs_distribute(node: Node) -> bool:
    return node.op is Op.PLUS and any(c.op in (Op.G, Op.G1) for c in node.children)


def _judge_split(node: Node, k: int):
    """Return (prefix, candidates, suffix) when ``node`` is a judge over > k candidates."""
    if node.op is not Op.G or len(node.children) != 1:
        return None
    body = node.children[0]
    if body.op is not Op.JOIN:
        return None
    for i, c in enumerate(body.children):
        if c.op is Op.PLUS and len(c.children) > k:
            return body.children[:i], c.children, body.children[i + 1 :]
    return None


def reduce_for_attention(query, k: int = 2):
    """Rewrite every judge over n > k commuting candidates into a k-ary tree.

    Candidates are grouped k at a time under intermediate judges that repeat
    the outer judge's instructions; this repeats until at most k remain for
    the outer judge. Leftover singletons pass through a ply unjudged.
    """
    if k < 2:
        raise ValueError("branching factor k must be >= 2")
    out, _ = optimize(query, [attention_rule(k)], max_iters=10_000)
    return out if isinstance(query, SpanQuery) else out.root


def _reduce_judge(node: Node, k: int) -> Node:
    prefix, items, suffix = _judge_split(node, k)
    body = node.children[0]
    items = list(items)

    def judge(group: list[Node]) -> Node:
        inner = (
            *(p.clone() for p in prefix),
            Node(Op.PLUS, tuple(group)),
            *(s.clone() for s in suffix),
        )
        return Node(Op.G, (Node(Op.JOIN, inner),), gen=node.gen)

    while len(items) > k:
        grouped = [items[i : i + k] for i in range(0, len(items), k)]
        items = [g[0] if len(g) == 1 else judge(g) for g in grouped]
    new_body = body.with_children((*prefix, Node(Op.PLUS, tuple(items)), *suffix))
    return node.with_children((new_body,))


# -- rule sets --------------------------------------------------------------

def chat_rule() -> RewriteRule:
    return RewriteRule("desugar_chat", lambda n: n.op is Op.C, desugar_chat)


def retrieval_rule(retriever: Optional[Retriever]) -> RewriteRule:
    return RewriteRule(
        "desugar_retrieval",
        lambda n: n.op is Op.R,
        lambda n: desugar_retrieval(n, retriever),
    )


def simplify_rule() -> RewriteRule:
    return RewriteRule("simplify_plus", _needs_simplify, simplify_plus)


def distribute_rule() -> RewriteRule:
    return RewriteRule("distribute_plus", _needs_distribute, distribute_plus)


def attention_rule(k: int) -> RewriteRule:
    if k < 2:
        raise ValueError("branching factor k must be >= 2")
    return RewriteRule(
        f"reduce_for_attention(k={k})",
        lambda n: _judge_split(n, k) is not None,
        lambda n: _reduce_judge(n, k),
    )


def default_rules(retriever: Optional[Retriever] = None) -> list[RewriteRule]:
    return [chat_rule(), retrieval_rule(retriever), simplify_rule(), distribute_rule()]


RULE_SETS = ("default", "desugar", "attention")


def rules_by_name(name: str, retriever=None, k: int = 2) -> list[RewriteRule]:
    if name == "default":
        return default_rules(retriever)
    if name == "desugar":
        return [chat_rule(), retrieval_rule(retriever)]
    if name == "attention":
        return default_rules(retriever) + [attention_rule(k)]
    raise ValueError(f"unknown rule set {name!r}; choose from {', '.join(RULE_SETS)}")


# -- driver -----------------------------------------------------------------

def _first_match(root: Node, rules: Iterable[RewriteRule]):
    for rule in rules:
        for path, node in root.walk():
            if rule.matches(node):
                return rule, path, node
    return None


def optimize(
    query,
    rules: Optional[Sequence[RewriteRule]] = None,
    max_iters: int = 10_000,
    retriever: Optional[Retriever] = None,
) -> tuple[SpanQuery, OptimizeTrace]:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rules = default_rules(retriever) if rules is None else list(rules)
    root = as_node(query)
    trace = OptimizeTrace()
    for _ in range(max_iters):
        hit = _first_match(root, rules)
        if hit is None:
            return SpanQuery(root), trace
        rule, path, node = hit
        root = root.replace_at(path, rule.build(node))
        trace.steps.append((rule.name, path))
    if _first_match(root, rules) is not None:
        raise OptimizeError(f"no fixed point after {max_iters} rewrites", trace)
    return SpanQuery(root), trace


# -- structural helpers used by tests and the CLI ----------------------------

def judge_nodes(query) -> list[Path]:
    """Paths of G nodes whose input contains a ``plus`` (i.e. judges)."""
    out = []
    for path, node in as_node(query).walk():
        if node.op is Op.G and any(
            c.op is Op.PLUS for child in node.children for c in (child, *child.children)
        ):
            out.append(path)
    return out


def judge_plies(query) -> int:
    """Depth of judge nesting (1 for a single flat judge, 0 for none)."""

    def depth(node: Node) -> int:
        below = max((depth(c) for c in node.children), default=0)
        is_judge = node.op is Op.G and any(
            c.op is Op.PLUS for child in node.children for c in (child, *child.children)
        )
        return below + 1 if is_judge else below

    return depth(as_node(query))


def canonical(node: Node) -> Node:
    """Sort every ``plus`` node's children; two trees equal up to commuting joins
    have the same canonical form."""
    kids = [canonical(c) for c in node.children]
    if node.op is Op.PLUS:
        from .sexpr import render

        kids.sort(key=render)
    return node.with_children(kids)

