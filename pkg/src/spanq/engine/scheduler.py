"""Greedy reordering of a bulk of RAG-style queries for cache locality."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..kvcache import BlockHash, CacheState, block_hashes
from ..query import F, G1
from ..tokenizer import MockVocab, span_request


@dataclass(frozen=True)
class BulkQuery:
    qid: int
    fragments: tuple[str, ...]


@dataclass
class BulkSchedule:
    queries: list[BulkQuery]
    order: list[int]  # qids in execution order
    predicted_hit_tokens: int
    input_order_hit_tokens: int
    fell_back: bool = False


@dataclass
class _FragmentTable:
    vocab: MockVocab
    block_size: int
    _memo: dict[str, tuple[list[int], list[BlockHash]]] = field(default_factory=dict)

    def __call__(self, text: str) -> tuple[list[int], list[BlockHash]]:
        if text not in self._memo:
            ids = span_request(G1(F(text)), self.vocab, self.block_size).ids
            self._memo[text] = (ids, block_hashes(ids, self.block_size))
        return self._memo[text]


def _run(cache: CacheState, q: BulkQuery, table: _FragmentTable) -> int:
    hit = 0
    for frag in q.fragments:
        ids, hashes = table(frag)
        r = cache.lookup(hashes, n_tokens=len(ids))
        hit += r.hit_tokens(cache.block_size, len(ids))
        cache.insert(ids, hashes)
    return hit


def replay_bulk(
    queries: Sequence[BulkQuery],
    order: Sequence[int],
    cache_capacity: int,
    block_size: int = 16,
    vocab: Optional[MockVocab] = None,
    _table: Optional[_FragmentTable] = None,
) -> int:
    """Hit tokens when every fragment is prepared as its own span request, query by query."""
    table = _table or _FragmentTable(vocab or MockVocab(), block_size)
    by_id = {q.qid: q for q in queries}
    cache = CacheState(cache_capacity, block_size)
    return sum(_run(cache, by_id[i], table) for i in order)


def _overlap(cache: CacheState, q: BulkQuery, table: _FragmentTable) -> int:
    """Blocks of ``q`` a prefix scan would find right now (no LRU side effects)."""
    total = 0
    for frag in q.fragments:
        for h in table(frag)[1]:
            if h not in cache:
                break
            total += 1
    return total


def schedule_bulk(
    queries: Sequence[BulkQuery],
    cache_capacity: int,
    block_size: int = 16,
    vocab: Optional[MockVocab] = None,
    *,
    guard: bool = True,
) -> BulkSchedule:
    """Greedy clustering: start with the query with the most fragments, then
    keep appending the query with the most blocks already in the simulated
    cache. Ties go to the lower query id.

    When no two queries share a fragment there is nothing to cluster and the
    input order is kept. With ``guard`` (the default) the input order is also
    kept whenever the simulation predicts the greedy order would hit less;
    small bulks under a tight cache can make the greedy order thrash.
    """
    queries = list(queries)
    table = _FragmentTable(vocab or MockVocab(), block_size)
    input_order = [q.qid for q in queries]
    baseline = replay_bulk(queries, input_order, cache_capacity, block_size, _table=table)
    seen: set[str] = set()
    shared = False
    for q in queries:
        frags = set(q.fragments)
        shared |= bool(frags & seen)
        seen |= frags
    if not shared:
        return BulkSchedule(queries, input_order, baseline, baseline)

    cache = CacheState(cache_capacity, block_size)
    remaining = sorted(queries, key=lambda q: q.qid)
    first = min(remaining, key=lambda q: (-len(q.fragments), q.qid))
    order, hit = [first.qid], _run(cache, first, table)
    remaining.remove(first)
    while remaining:
        nxt = min(remaining, key=lambda q: (-_overlap(cache, q, table), q.qid))
        remaining.remove(nxt)
        order.append(nxt.qid)
        hit += _run(cache, nxt, table)
    if guard and hit < baseline:
        return BulkSchedule(queries, input_order, baseline, baseline, fell_back=True)
    return BulkSchedule(queries, order, hit, baseline)


def random_bulk(
    rng,
    n_queries: int,
    n_fragments: int,
    per_query: tuple[int, int] = (2, 6),
    words: int = 100,
) -> list[BulkQuery]:
    """Queries drawing fragments from a shared pool with skewed popularity."""
    pool = [" ".join(f"b{f}w{j}" for j in range(words)) for f in range(n_fragments)]
    weights = 1.0 / (1.0 + rng.permutation(n_fragments))
    weights /= weights.sum()
    out = []
    for qid in range(n_queries):
        k = int(rng.integers(per_query[0], per_query[1] + 1))
        picks = rng.choice(n_fragments, size=min(k, n_fragments), replace=False, p=weights)
        out.append(BulkQuery(qid, tuple(pool[i] for i in picks)))
    return out
