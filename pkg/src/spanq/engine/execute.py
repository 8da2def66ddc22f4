"""Execute optimized span queries against the mock model and cache simulator.

Every generate becomes one request to the (mock) model server. Span-marked
generates are issued as standalone requests whose layout matches the span's
layout inside any enclosing prompt, so their blocks are found again later
wherever the span is placed. Cost is accounted per request with a TTFT proxy:

    ttft = c_attn * attended_pairs + c_repo * repositioned_tokens
           + c_hash * blocks_scanned

Attention pairs count, for every recomputed content token, the prior content
tokens it attends to. With sparse attention a token inside a span sees only
its own span; tokens outside all spans see everything before them. Pads and
span markers are never counted.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..kvcache import CacheState, block_hashes
from ..query import LEAF_OPS, ONE_TOKEN, GenParams, Node, Op, Path, SpanQuery, as_node, validate
from ..tokenizer import (
    CLOSE_ID,
    FIRST_CONTENT_ID,
    OPEN_ID,
    SEP_ID,
    VocabError,
    align_blocks,
    crop_trailing_partial,
    span_request,
    tokenize_query,
)
from .model import MockModel

log = logging.getLogger(__name__)


class ExecuteError(RuntimeError):
    pass


class CapacityError(ExecuteError):
    pass


@dataclass(frozen=True)
class CostCoeffs:
    c_attn: float = 1.0
    c_repo: float = 1.0
    c_hash: float = 0.1


@dataclass(frozen=True)
class ExecParams:
    block_size: int = 16
    span_aware: bool = True  # span-suspending hashes in the cache
    sparse_attention: bool = True  # span interiors attend only within their span
    count_inner_decode: bool = True
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)

    @classmethod
    def baseline(cls, block_size: int = 16, coeffs: Optional[CostCoeffs] = None) -> ExecParams:
        return cls(block_size, False, False, True, coeffs or CostCoeffs())


@dataclass
class RequestCost:
    kind: str  # prepare | inner | plain | root
    path: Path = ()
    input_tokens: int = 0
    prefill_tokens: int = 0
    hit_tokens: int = 0
    attended_pairs: int = 0
    repositioned_tokens: int = 0
    blocks_scanned: int = 0
    generated_tokens: int = 0

    def ttft(self, c: CostCoeffs) -> float:
        return (c.c_attn * self.attended_pairs + c.c_repo * self.repositioned_tokens
                + c.c_hash * self.blocks_scanned)


_COUNTERS = ("input_tokens", "prefill_tokens", "hit_tokens", "attended_pairs",
             "repositioned_tokens", "blocks_scanned", "generated_tokens")


@dataclass
class CostReport:
    requests: list[RequestCost] = field(default_factory=list)
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)

    def _sum(self, name: str) -> int:
        return sum(getattr(r, name) for r in self.requests)

    @property
    def input_tokens(self) -> int:
        return self._sum("input_tokens")

    @property
    def prefill_tokens(self) -> int:
        return self._sum("prefill_tokens")

    @property
    def hit_tokens(self) -> int:
        return self._sum("hit_tokens")

    @property
    def attended_pairs(self) -> int:
        return self._sum("attended_pairs")

    @property
    def repositioned_tokens(self) -> int:
        return self._sum("repositioned_tokens")

    @property
    def blocks_scanned(self) -> int:
        return self._sum("blocks_scanned")

    @property
    def ttft_proxy(self) -> float:
        return sum(r.ttft(self.coeffs) for r in self.requests)

    @property
    def hit_rate(self) -> float:
        n = self.input_tokens
        return self.hit_tokens / n if n else 0.0

    def merge(self, other: CostReport) -> CostReport:
        if other.coeffs != self.coeffs:
            raise ValueError("cannot merge reports with different cost coefficients")
        return CostReport(self.requests + other.requests, self.coeffs)

    def to_dict(self, per_request: bool = False) -> dict:
        d = {name: getattr(self, name) for name in _COUNTERS if name != "generated_tokens"}
        d["ttft_proxy"] = self.ttft_proxy
        d["hit_rate"] = self.hit_rate
        if per_request:
            d["requests"] = [asdict(r) for r in self.requests]
        return d


# -- attention accounting -----------------------------------------------------------

def _scopes(ids: np.ndarray, sparse: bool) -> np.ndarray:
    """Index where each token's attention scope starts, and one trailing entry
    for whatever would be generated after the last token."""
    n = len(ids)
    scope = np.zeros(n + 1, dtype=np.int64)
    if not sparse:
        return scope
    stack: list[int] = []
    cur, last = 0, 0
    for i in np.flatnonzero((ids == OPEN_ID) | (ids == SEP_ID) | (ids == CLOSE_ID)):
        scope[last:i] = cur
        tid = ids[i]
        if tid == OPEN_ID:
            stack.append(i)
        elif tid == SEP_ID and stack:
            stack[-1] = i
        elif tid == CLOSE_ID and stack:
            stack.pop()
        cur = stack[-1] if stack else 0
        scope[i] = cur
        last = i + 1
    scope[last:] = cur
    return scope


def attention_cost(ids: Sequence[int], *, sparse: bool, start: int = 0) -> tuple[int, int]:
    """(pairs attended by content tokens at ``start`` and later, content tokens
    visible to a token generated right after the sequence)."""
    ids = np.asarray(ids, dtype=np.int64)
    content = ids >= FIRST_CONTENT_ID
    before = np.concatenate(([0], np.cumsum(content)))  # content count in [0, j)
    scope = _scopes(ids, sparse)
    j = np.arange(start, len(ids))
    per_token = before[j] - before[scope[j]]
    pairs = int(per_token[content[j]].sum())
    visible = int(before[len(ids)] - before[scope[len(ids)]])
    return pairs, visible


def decode_pairs(m: int, context: int) -> int:
    """Pairs attended while decoding ``m`` tokens after ``context`` visible ones;
    the first token comes out of prefill."""
    if m < 2:
        return 0
    return (m - 1) * context + (m - 1) * (m - 2) // 2


# -- executor -----------------------------------------------------------------------

@dataclass
class _Executor:
    cache: CacheState
    model: MockModel
    params: ExecParams
    report: CostReport

    @property
    def bs(self) -> int:
        return self.params.block_size

    def check_capacity(self, n_blocks: int) -> None:
        if n_blocks > self.cache.capacity:
            raise CapacityError(
                f"request needs {n_blocks} blocks but the cache holds {self.cache.capacity}"
            )

    def request(
        self,
        kind: str,
        path: Path,
        prompt: list[int],
        gen: Optional[GenParams],
        *,
        crop: bool = False,
        keep_output: bool = True,
        skip_if_cached: bool = False,
    ) -> list[int]:
        bs, p = self.bs, self.params
        n = len(prompt)
        self.check_capacity(-(-n // bs))
        hashes = block_hashes(prompt, bs, span_aware=p.span_aware)
        hit = self.cache.lookup(hashes, n_tokens=n)
        cost = RequestCost(kind, path, input_tokens=n,
                           hit_tokens=hit.hit_tokens(bs, n))
        cost.blocks_scanned = hit.hit_blocks + (1 if hit.hit_blocks < len(hashes) else 0)
        cost.repositioned_tokens = bs * sum(
            1 for b, pos in enumerate(hit.cached_positions) if pos != b * bs
        )
        if skip_if_cached and hashes and hit.hit_blocks == len(hashes) and n % bs == 0:
            # already prepared: nothing to compute or move
            cost.repositioned_tokens = 0
            self.report.requests.append(cost)
            return []
        start = min(cost.hit_tokens, max(n - 1, 0))
        pairs, visible = attention_cost(prompt, sparse=p.sparse_attention, start=start)
        cost.prefill_tokens = n - start
        cost.attended_pairs = pairs
        out: list[int] = []
        if gen is not None:
            out = self.model.generate(prompt, gen, bs)
            cost.generated_tokens = len(out)
            if p.count_inner_decode and kind != "root":
                # decoding cost is paid for everything generated, cropped or not
                cost.attended_pairs += decode_pairs(len(out), visible)
            if crop:
                out = crop_trailing_partial(out, bs)
        stored = prompt + out if keep_output else prompt
        self.check_capacity(len(stored) // bs)
        self.cache.insert(stored, block_hashes(stored, bs, span_aware=p.span_aware))
        self.report.requests.append(cost)
        return out if keep_output else []

    def decode(self, ids: list[int]) -> str:
        try:
            return self.model.vocab.decode(ids)
        except VocabError as e:
            raise ExecuteError(f"model/vocab mismatch: {e}") from e

    def span(self, gen: Node, path: Path) -> Node:
        try:
            tq = span_request(gen, self.model.vocab, self.bs)
        except VocabError as e:
            raise ExecuteError(f"model/vocab mismatch: {e}") from e
        if gen.op is Op.G1:
            self.request("prepare", path, tq.ids, ONE_TOKEN, keep_output=False,
                         skip_if_cached=True)
            return replace(gen, output="")
        out = self.request("inner", path, tq.ids, gen.gen, crop=True)
        return replace(gen, output=self.decode(out))

    def plain(self, gen: Node, path: Path, kind: str) -> Node:
        try:
            tq = align_blocks(tokenize_query(gen, self.model.vocab, self.bs))
        except VocabError as e:
            raise ExecuteError(f"model/vocab mismatch: {e}") from e
        out = self.request(kind, path, tq.ids, gen.gen)
        return Node(Op.A, content=self.decode(out))

    def node(self, node: Node, path: Path) -> Node:
        op = node.op
        if op in LEAF_OPS:
            return node
        if op is Op.SPAN:
            gen, gpath = node.children[0], path + (0,)
            gen = gen.with_children(
                [self.node(c, gpath + (i,)) for i, c in enumerate(gen.children)]
            )
            return node.with_children((self.span(gen, gpath),))
        kids = [self.node(c, path + (i,)) for i, c in enumerate(node.children)]
        if op in (Op.PLUS, Op.JOIN):
            return node.with_children(kids)
        if op in (Op.G, Op.G1):
            kind = "root" if not path else "plain"
            return self.plain(node.with_children(kids), path, kind)
        raise ExecuteError(f"{op} must be desugared before execution (run optimize first)")


def execute(
    query,
    cache: CacheState,
    model: MockModel,
    params: Optional[ExecParams] = None,
) -> tuple[SpanQuery, CostReport]:
    """Run ``query`` and return the executed tree plus its cost.

    Sub-trees are independent and could be dispatched concurrently; here they
    run sequentially in pre-order, which is one valid serialization of the
    cache as the single shared resource. Inner spans keep their generated
    text in ``output``; every other generate becomes an assistant leaf.
    """
    params = params or ExecParams(block_size=cache.block_size)
    if params.block_size != cache.block_size:
        raise ExecuteError(
            f"block size {params.block_size} differs from the cache's {cache.block_size}"
        )
    root = as_node(query)
    report = validate(root)
    if not report.ok:
        raise ExecuteError("invalid span query: " + "; ".join(report.messages()))
    if any(n.op in (Op.C, Op.R) for _, n in root.walk()):
        raise ExecuteError("query contains C or R; run optimize first")
    costs = CostReport(coeffs=params.coeffs)
    result = _Executor(cache, model, params, costs).node(root, ())
    return SpanQuery(result), costs


def to_baseline(query) -> Node:
    """The same work phrased for a stock server: no spans, no commutativity."""

    def conv(node: Node) -> Node:
        kids = [conv(c) for c in node.children]
        if node.op is Op.PLUS:
            return Node(Op.JOIN, tuple(kids))
        if node.op is Op.SPAN:
            inner = kids[0]
            if inner.op is Op.G1:
                return _unwrap(inner)
            return inner
        if node.op is Op.G1:
            return _unwrap(node.with_children(kids))
        return node.with_children(kids)

    return conv(as_node(query))


def _unwrap(g1: Node) -> Node:
    kids = g1.children
    return kids[0] if len(kids) == 1 else Node(Op.JOIN, kids)
