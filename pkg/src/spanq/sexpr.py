"""Text exchange formats: a parenthesized s-expression syntax and DOT output.

Grammar::

    node  := "(" NAME attr* item* ")"
    attr  := KEY "=" (ATOM | STRING)
    item  := STRING | node

A bare string is the content of a message leaf (``S``, ``A``, ``U``, ``F``) or
the query text of ``R``. Examples::

    (C (S "sys") (A "prev") (U "q"))
    (C (S "s") (R corpus=docs k=2 "q") (U "u"))
    (G temperature=0.5 seed=3 (join (S "s") (U "u")))
"""

from __future__ import annotations

import json
import re
from typing import Optional

from .query import GenParams, Node, Op, RetrievalSpec, SpanQuery, as_node


class SExprError(ValueError):
    """Syntax error; ``offset`` is a byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.message = message
        self.offset = offset


_NAMES = {op.value: op for op in Op}
_ATOM = re.compile(r"[^\s()\"=]+")


class _Reader:
    def __init__(self, text: str):
        self.text = text
        self.i = 0

    def offset(self, i: Optional[int] = None) -> int:
        i = self.i if i is None else i
        return len(self.text[:i].encode("utf-8"))

    def fail(self, msg: str, i: Optional[int] = None):
        raise SExprError(msg, self.offset(i))

    def skip_ws(self) -> None:
        while self.i < len(self.text):
            ch = self.text[self.i]
            if ch.isspace():
                self.i += 1
            elif ch == ";":
                while self.i < len(self.text) and self.text[self.i] != "\n":
                    self.i += 1
            else:
                break

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.i] if self.i < len(self.text) else ""

    def string(self) -> str:
        start = self.i
        j = self.i + 1
        while j < len(self.text):
            ch = self.text[j]
            if ch == "\\":
                j += 2
                continue
            if ch == '"':
                try:
                    value = json.loads(self.text[start : j + 1])
                except json.JSONDecodeError:
                    self.fail("bad string escape", start)
                self.i = j + 1
                return value
            j += 1
        self.fail("unterminated string", start)

    def atom(self) -> str:
        m = _ATOM.match(self.text, self.i)
        if not m:
            self.fail("expected a name")
        self.i = m.end()
        return m.group()

    def node(self) -> Node:
        if self.peek() != "(":
            self.fail("expected '('")
        open_at = self.i
        self.i += 1
        self.skip_ws()
        name_at = self.i
        name = self.atom()
        if name not in _NAMES:
            self.fail(f"unknown operator {name!r}", name_at)
        op = _NAMES[name]
        attrs: dict[str, tuple[str, int]] = {}
        strings: list[str] = []
        children: list[Node] = []
        while True:
            ch = self.peek()
            if ch == "":
                self.fail("unbalanced parenthesis", open_at)
            if ch == ")":
                self.i += 1
                break
            if ch == "(":
                children.append(self.node())
            elif ch == '"':
                strings.append(self.string())
            else:
                key_at = self.i
                key = self.atom()
                if self.i >= len(self.text) or self.text[self.i] != "=":
                    self.fail(f"expected '=' after {key!r}", key_at)
                self.i += 1
                if self.i < len(self.text) and self.text[self.i] == '"':
                    value = self.string()
                else:
                    value = self.atom()
                attrs[key] = (value, key_at)
        return self._build(op, attrs, strings, children, open_at)

    def _build(self, op, attrs, strings, children, at) -> Node:
        def take(key, conv, default=None):
            if key not in attrs:
                return default
            raw, key_at = attrs.pop(key)
            try:
                return conv(raw)
            except ValueError:
                self.fail(f"bad value for {key}: {raw!r}", key_at)

        content = gen = retrieval = output = None
        if op in (Op.S, Op.A, Op.U, Op.F):
            if len(strings) != 1:
                self.fail(f"{op} takes exactly one string", at)
            content = strings[0]
        elif op is Op.R:
            if len(strings) != 1:
                self.fail("R takes exactly one query string", at)
            corpus = take("corpus", str)
            if corpus is None:
                self.fail("R needs corpus=", at)
            retrieval = RetrievalSpec(corpus, strings[0], take("k", int, 1))
        elif strings:
            self.fail(f"{op} does not take a string", at)
        if op in (Op.C, Op.G, Op.G1):
            default_max = 1 if op is Op.G1 else None
            gen = GenParams(
                max_tokens=take("max_tokens", int, default_max),
                temperature=take("temperature", float, 0.0),
                seed=take("seed", int, 0),
            )
            output = take("output", str)
        if attrs:
            key, (_, key_at) = next(iter(attrs.items()))
            self.fail(f"unknown attribute {key!r} for {op}", key_at)
        return Node(op, tuple(children), content, gen, retrieval, output)


def parse_sexpr(text: str) -> SpanQuery:
    reader = _Reader(text)
    root = reader.node()
    if reader.peek() != "":
        reader.fail("trailing input after query")
    return SpanQuery(root)


def _fmt_num(x: float) -> str:
    return repr(float(x))


def _render_node(node: Node) -> str:
    parts = [node.op.value]
    if node.retrieval is not None:
        parts.append(f"corpus={json.dumps(node.retrieval.corpus)}")
        parts.append(f"k={node.retrieval.k}")
    if node.gen is not None:
        g = node.gen
        default_max = 1 if node.op is Op.G1 else None
        if g.max_tokens != default_max:
            parts.append(f"max_tokens={g.max_tokens}")
        if g.temperature != 0:
            parts.append(f"temperature={_fmt_num(g.temperature)}")
        if g.seed != 0:
            parts.append(f"seed={g.seed}")
    if node.output is not None:
        parts.append(f"output={json.dumps(node.output, ensure_ascii=False)}")
    if node.content is not None:
        parts.append(json.dumps(node.content, ensure_ascii=False))
    if node.retrieval is not None:
        parts.append(json.dumps(node.retrieval.query, ensure_ascii=False))
    parts.extend(_render_node(c) for c in node.children)
    return "(" + " ".join(parts) + ")"


_DOT_LABELS = {Op.PLUS: "⊕", Op.JOIN: "⋈", Op.G1: "G¹"}


def _render_dot(node: Node) -> str:
    lines = ["digraph spanquery {", "  node [shape=circle];"]
    for n, (path, sub) in enumerate(node.walk()):
        label = _DOT_LABELS.get(sub.op, sub.op.value)
        if sub.op is Op.SPAN:
            lines.append(f'  n{n} [label="{label}", shape=box];')
        else:
            lines.append(f'  n{n} [label="{label}"];')
    ids = {path: n for n, (path, _) in enumerate(node.walk())}
    for path, n in ids.items():
        if path:
            lines.append(f"  n{ids[path[:-1]]} -> n{n};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def render(query, format: str = "sexpr") -> str:
    node = as_node(query)
    if format == "sexpr":
        return _render_node(node)
    if format == "dot":
        return _render_dot(node)
    raise ValueError(f"unknown render format {format!r}")
