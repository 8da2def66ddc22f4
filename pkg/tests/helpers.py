"""Random query generators and small oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from spanq.query import (
    A,
    C,
    F,
    G,
    G1,
    GenParams,
    Node,
    Op,
    R,
    S,
    U,
    join,
    plus,
    span,
)
from spanq.tokenizer import CLOSE_ID, OPEN_ID, PAD_ID, SEP_ID

LEAVES = (S, U, A)


class StubRetriever:
    """Returns k deterministic fragments named after the query text."""

    def retrieve(self, spec):
        if spec.corpus == "missing":
            return []
        return [f"{spec.corpus} {spec.query} frag{i}" for i in range(spec.k)]


def _text(rng, words: int = 3) -> str:
    return " ".join(f"w{int(x)}" for x in rng.integers(0, 50, size=int(rng.integers(1, words + 1))))


def _gen(rng) -> GenParams:
    if rng.random() < 0.5:
        return GenParams()
    return GenParams(max_tokens=int(rng.integers(1, 9)),
                     temperature=float(rng.choice([0.0, 0.5, 1.0])),
                     seed=int(rng.integers(0, 100)))


def random_query(rng: np.random.Generator, depth: int = 4, fanout: int = 4,
                 sugar: bool = True, budget: list | None = None) -> Node:
    """A valid span query over every operator (C and R only when ``sugar``)."""
    budget = budget if budget is not None else [60]
    budget[0] -= 1
    if depth <= 0 or budget[0] <= 0 or rng.random() < 0.25:
        r = rng.random()
        if sugar and r < 0.1:
            return R("docs", _text(rng), k=int(rng.integers(1, 4)))
        if r < 0.2:
            return F(_text(rng))
        return LEAVES[int(rng.integers(0, 3))](_text(rng))
    kids = [random_query(rng, depth - 1, fanout, sugar, budget)
            for _ in range(int(rng.integers(1, fanout + 1)))]
    ops = ["plus", "join", "G", "G1", "span"] + (["C"] if sugar else [])
    op = ops[int(rng.integers(0, len(ops)))]
    if op == "plus":
        return plus(*kids)
    if op == "join":
        return join(*kids)
    if op == "G":
        return G(*kids, gen=_gen(rng))
    if op == "G1":
        return G1(*kids)
    if op == "C":
        return C(*kids, gen=_gen(rng))
    inner = G(*kids, gen=_gen(rng)) if rng.random() < 0.5 else G1(*kids)
    return span(inner)


def random_tokenizable(rng: np.random.Generator, depth: int = 3, fanout: int = 3) -> Node:
    """Optimized-form queries: generates only inside spans, root generate tail."""

    def body(d: int) -> Node:
        if d <= 0 or rng.random() < 0.3:
            return LEAVES[int(rng.integers(0, 3))](_text(rng, 4))
        kids = [body(d - 1) for _ in range(int(rng.integers(1, fanout + 1)))]
        r = rng.random()
        if r < 0.4:
            return join(*kids)
        if r < 0.8:
            return plus(*(span(G(k, gen=GenParams(max_tokens=4))) if rng.random() < 0.3 else k
                          for k in kids))
        return span(G1(*kids))

    return G(body(depth), gen=GenParams(max_tokens=4))


def block_of(rng, bs):
    return [int(x) for x in rng.integers(16, 1000, size=bs)]


def span_bodies(rng, bs, n, max_blocks=3):
    """n span bodies, each a whole number of blocks starting with the open/sep slot."""
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_blocks + 1))
        body = []
        for b in range(k):
            blk = block_of(rng, bs)
            if b == 0:
                blk = [None] + blk[1:]  # filled with open or sep by the caller
            body += blk
        out.append(body)
    return out


def plus_region(bodies, bs):
    seq = []
    for i, body in enumerate(bodies):
        seq += [OPEN_ID if i == 0 else SEP_ID] + body[1:]
    return seq + [CLOSE_ID] + [PAD_ID] * (bs - 1)


def judge_count_oracle(n: int, k: int) -> tuple[int, int]:
    """(plies, judge nodes) of a k-ary reduction over n candidates, by counting groups."""
    plies, judges, m = 1, 1, n
    while m > k:
        groups = math.ceil(m / k)
        judges += sum(1 for g in range(groups) if min(k, m - g * k) > 1)
        plies += 1
        m = groups
    return plies, judges


def leaf_texts(node: Node) -> list[str]:
    return [n.content for _, n in node.walk() if n.op in (Op.S, Op.U, Op.A, Op.F)]


# -- acceptance bookkeeping ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, float, str]] = {}


def record(number: int, title: str, ok: bool, seconds: float, detail: str) -> str:
    ACCEPTANCE[number] = (title, ok, seconds, detail)
    return f"criterion {number:2d} {'PASS' if ok else 'FAIL'} ({seconds:5.1f}s) {title}: {detail}"
