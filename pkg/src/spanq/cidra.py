"""Concurrent in-place duplicating repositioning of cached KV blocks.

Concurrent requests ask for cached blocks at new sequence positions. Each
request resolves to a move ``src slot -> dest slot`` plus a position delta.
A block wanted by several requests is duplicated first, so the remaining
move graph is a strict permutation graph (in- and out-degree at most one).
That graph splits into cycles and chains: chains are executed from their
terminal end with no extra memory, each cycle needs exactly one scratch
block. Independent components are bin-packed into batches; components too
large for a batch fall back to sequential execution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .rope import RopeParams, rerope, rope_apply


class PlanError(RuntimeError):
    pass


class ScratchExceeded(PlanError):
    pass


class MoveRequest(NamedTuple):
    block: int  # physical slot holding the cached content
    position: int  # required base position of the block
    query: int  # requesting query id


Tag = tuple[int, int]  # (query id, base position)


@dataclass
class KvStore:
    """Synthetic paged KV memory.

    ``keys``/``values`` have shape ``(slots, layers, block_size, head_dim)``;
    keys are stored already rotary-encoded at their block's positions. Every
    live slot is tagged with the (query, base position) it serves.
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    tags: dict[int, Tag]
    free: list[int]
    scratch_budget: int = 8

    @property
    def block_size(self) -> int:
        return self.keys.shape[2]

    @property
    def n_slots(self) -> int:
        return self.keys.shape[0]

    def slot_for(self) -> dict[Tag, int]:
        return {tag: s for s, tag in self.tags.items()}

    def live_slots(self) -> list[int]:
        return sorted(self.tags)

    def copy(self) -> KvStore:
        return KvStore(self.keys.copy(), self.values.copy(), self.positions.copy(),
                       dict(self.tags), list(self.free), self.scratch_budget)

    @classmethod
    def synthetic(
        cls,
        tags: Sequence[Tag],
        n_free: int,
        params: RopeParams,
        block_size: int = 16,
        layers: int = 2,
        seed: int = 0,
        scratch_budget: int = 8,
    ) -> KvStore:
        """Live slots ``0..len(tags)-1`` tagged as given, then ``n_free`` free slots.

        Each block's raw vectors come from a generator seeded by (block digest,
        layer), and keys are encoded at the block's positions.
        """
        n = len(tags) + n_free
        d = params.head_dim
        keys = np.zeros((n, layers, block_size, d))
        values = np.zeros_like(keys)
        positions = np.full(n, -1, dtype=np.int64)
        for s, (q, pos) in enumerate(tags):
            digest = hashlib.blake2b(f"{seed}:{s}:{q}".encode(), digest_size=8).digest()
            for layer in range(layers):
                rng = np.random.default_rng([int.from_bytes(digest, "little"), layer])
                raw = rng.standard_normal((2, block_size, d))
                keys[s, layer] = rope_apply(raw[0], pos + np.arange(block_size), params)
                values[s, layer] = raw[1]
            positions[s] = pos
        return cls(keys, values, positions, dict(enumerate(tags)),
                   list(range(len(tags), n)), scratch_budget)


@dataclass(frozen=True)
class Move:
    src: int
    dst: int
    delta: int
    tag: Tag


@dataclass
class Resolution:
    moves: list[Move]  # includes zero-delta in-place entries
    duplications: list[tuple[int, int]]  # (original slot, copy slot)


def resolve(requests: Iterable[MoveRequest], store: KvStore) -> Resolution:
    """Decide where each request's block ends up.

    Rules: the lowest (query, position) demand on a block keeps the original;
    every further demand gets a copy in the lowest free slot. A demand lands
    in the slot already tagged with its (query, position) when there is one,
    otherwise in place, unless that slot is another move's destination, in
    which case a free slot is taken.
    """
    reqs = sorted(set(requests), key=lambda r: (r.block, r.query, r.position))
    for r in reqs:
        if r.block not in store.tags:
            raise PlanError(f"request for block {r.block}, which is not live")
    tagged = store.slot_for()
    targeted: dict[int, MoveRequest] = {}
    for r in reqs:
        t = tagged.get((r.query, r.position))
        if t is not None:
            if t in targeted and targeted[t] != r:
                raise PlanError(f"two requests want slot {t} ({r.query}, {r.position})")
            targeted[t] = r
    free = sorted(store.free)

    def take() -> int:
        if not free:
            raise PlanError("free list exhausted; cannot duplicate or relocate")
        return free.pop(0)

    moves: list[Move] = []
    dups: list[tuple[int, int]] = []
    claimed = set(targeted)
    prev_block = None
    for r in reqs:
        if r.block != prev_block:
            src = r.block
        else:
            src = take()
            dups.append((r.block, src))
        prev_block = r.block
        dst = tagged.get((r.query, r.position))
        if dst is None:
            if src in claimed:
                dst = take()
            else:
                dst = src
            claimed.add(dst)
        delta = r.position - int(store.positions[r.block])
        moves.append(Move(src, dst, delta, (r.query, r.position)))
    return Resolution(moves, dups)


@dataclass
class Component:
    kind: str  # "cycle" or "chain"
    moves: list[Move]  # cycle: v0->v1->...->v0 ; chain: head first

    @property
    def needs_scratch(self) -> bool:
        return self.kind == "cycle" and len(self.moves) > 1


@dataclass
class MovePlan:
    moves: list[Move]
    duplications: list[tuple[int, int]]
    components: list[Component]
    batches: list[list[int]]  # component indices
    fallback: list[int]
    retags: list[Move]  # zero-delta in-place entries: metadata only
    batch_size: int = 64

    @property
    def cycles(self) -> list[Component]:
        return [c for c in self.components if c.kind == "cycle"]

    @property
    def chains(self) -> list[Component]:
        return [c for c in self.components if c.kind == "chain"]

    def to_json(self, **kw) -> str:
        def mv(m: Move):
            return {"src": m.src, "dst": m.dst, "delta": m.delta}

        data = {
            "nodes": sorted({m.src for m in self.moves} | {m.dst for m in self.moves}),
            "edges": [mv(m) for m in self.moves],
            "duplications": [list(d) for d in self.duplications],
            "components": [{"kind": c.kind, "moves": [mv(m) for m in c.moves]}
                           for c in self.components],
            "batches": self.batches,
            "fallback": self.fallback,
            "batch_size": self.batch_size,
        }
        return json.dumps(data, **kw)


def strongly_connected(nodes: Iterable[int], succ: dict[int, list[int]]) -> list[list[int]]:
    """Tarjan's algorithm, iterative. Components come out in reverse topological order."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    out: list[list[int]] = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(comp)
    return out


def _decompose(moves: list[Move]) -> list[Component]:
    by_src = {m.src: m for m in moves}
    dsts = {m.dst for m in moves}
    nodes = sorted({m.src for m in moves} | dsts)
    succ = {m.src: [m.dst] for m in moves}
    components: list[Component] = []
    in_cycle: set[int] = set()
    for scc in strongly_connected(nodes, succ):
        if len(scc) > 1 or (scc[0] in by_src and by_src[scc[0]].dst == scc[0]):
            start = min(scc)
            cyc, v = [], start
            while True:
                m = by_src[v]
                cyc.append(m)
                v = m.dst
                if v == start:
                    break
            components.append(Component("cycle", cyc))
            in_cycle.update(scc)
    for head in nodes:
        if head in in_cycle or head in dsts or head not in by_src:
            continue
        chain, v = [], head
        while v in by_src:
            chain.append(by_src[v])
            v = by_src[v].dst
        components.append(Component("chain", chain))
    return components


def plan_moves(
    requests: Iterable[MoveRequest], store: KvStore, batch_size: int = 64
) -> MovePlan:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    res = resolve(requests, store)
    real = [m for m in res.moves if not (m.src == m.dst and m.delta == 0)]
    retags = [m for m in res.moves if m.src == m.dst and m.delta == 0]
    components = _decompose(real)
    # First-fit decreasing on move count; a batch also may not hold more
    # scratch-needing cycles than the scratch budget.
    order = sorted(range(len(components)), key=lambda i: (-len(components[i].moves), i))
    batches: list[list[int]] = []
    loads: list[tuple[int, int]] = []
    fallback: list[int] = []
    budget = max(1, store.scratch_budget)
    for i in order:
        comp = components[i]
        size, scratch = len(comp.moves), int(comp.needs_scratch)
        if size > batch_size:
            fallback.append(i)
            continue
        for b, (load, used) in enumerate(loads):
            if load + size <= batch_size and used + scratch <= budget:
                batches[b].append(i)
                loads[b] = (load + size, used + scratch)
                break
        else:
            batches.append([i])
            loads.append((size, scratch))
    return MovePlan(real, res.duplications, components, batches, sorted(fallback), retags,
                    batch_size)


@dataclass
class ExecStats:
    moved_tokens: int = 0
    duplicated_blocks: int = 0
    scratch_peak: int = 0
    batches: int = 0
    fallback: int = 0
    moves: int = 0


def _move(store: KvStore, src_keys: np.ndarray, src_vals: np.ndarray, m: Move,
          params: RopeParams) -> None:
    # all layers and tokens of the block share one delta: a single call
    store.keys[m.dst] = rerope(src_keys, 0, m.delta, params)
    store.values[m.dst] = src_vals


def _run_component(store: KvStore, comp: Component, params: RopeParams) -> None:
    if comp.kind == "chain":
        for m in reversed(comp.moves):
            _move(store, store.keys[m.src], store.values[m.src], m, params)
        return
    if len(comp.moves) == 1:
        m = comp.moves[0]
        _move(store, store.keys[m.src], store.values[m.src], m, params)
        return
    last = comp.moves[-1]  # v_{L-1} -> v0
    scratch_k = store.keys[last.src].copy()
    scratch_v = store.values[last.src].copy()
    for m in reversed(comp.moves[:-1]):
        _move(store, store.keys[m.src], store.values[m.src], m, params)
    _move(store, scratch_k, scratch_v, last, params)


def _retag(store: KvStore, plan: MovePlan) -> None:
    everything = plan.moves + plan.retags
    dests = {m.dst for m in everything}
    sources = {m.src for m in everything} | {c for _, c in plan.duplications}
    for s in sources | dests:
        store.tags.pop(s, None)
    for m in everything:
        store.tags[m.dst] = m.tag
        store.positions[m.dst] = m.tag[1]
    vacated = sources - dests
    taken = dests | {c for _, c in plan.duplications}
    store.free = sorted((set(store.free) - taken) | vacated)
    for s in vacated:
        store.positions[s] = -1


def execute_plan(
    plan: MovePlan, store: KvStore, params: RopeParams, *, concurrent: bool = True
) -> tuple[KvStore, ExecStats]:
    """Apply ``plan`` to ``store`` in place and return it with statistics.

    With ``concurrent`` the cycles of one batch are in flight together, so the
    scratch peak is the largest number of cycles in a batch; otherwise cycles
    run one at a time and the peak is at most one block.
    """
    stats = ExecStats(duplicated_blocks=len(plan.duplications), batches=len(plan.batches),
                      fallback=len(plan.fallback), moves=len(plan.moves))
    stats.moved_tokens = len(plan.moves) * store.block_size
    for orig, copy in plan.duplications:
        store.keys[copy] = store.keys[orig]
        store.values[copy] = store.values[orig]
    for batch in plan.batches:
        comps = [plan.components[i] for i in batch]
        in_flight = sum(c.needs_scratch for c in comps)
        peak = in_flight if concurrent else min(1, in_flight)
        if peak > store.scratch_budget:
            raise ScratchExceeded(f"batch needs {peak} scratch blocks, budget {store.scratch_budget}")
        stats.scratch_peak = max(stats.scratch_peak, peak)
        for c in comps:
            _run_component(store, c, params)
    for i in plan.fallback:
        c = plan.components[i]
        if c.needs_scratch:
            if store.scratch_budget < 1:
                raise ScratchExceeded("fallback cycle needs one scratch block")
            stats.scratch_peak = max(stats.scratch_peak, 1)
        _run_component(store, c, params)
    _retag(store, plan)
    return store, stats


def oracle_reposition(
    requests: Iterable[MoveRequest], store: KvStore, params: RopeParams
) -> KvStore:
    """Reference result: every destination computed from a pristine copy by
    decoding each key at its old position and encoding it at the new one."""
    res = resolve(requests, store)
    out = store.copy()
    for m in res.moves:
        orig = _origin(m.src, res.duplications)
        k = store.keys[orig]
        for layer in range(k.shape[0]):
            old = int(store.positions[orig]) + np.arange(store.block_size)
            raw = rope_apply(k[layer], -old, params)
            out.keys[m.dst, layer] = rope_apply(raw, old + m.delta, params)
        out.values[m.dst] = store.values[orig]
    plan_like = MovePlan(res.moves, res.duplications, [], [], [], [])
    _retag(out, plan_like)
    return out


def _origin(slot: int, dups: list[tuple[int, int]]) -> int:
    for orig, copy in dups:
        if copy == slot:
            return orig
    return slot


def raw_duplication_count(requests: Iterable[MoveRequest]) -> int:
    """Sum over blocks of max(0, out-degree - 1) in the undeduplicated demand graph."""
    per_block: dict[int, int] = {}
    for r in set(requests):
        per_block[r.block] = per_block.get(r.block, 0) + 1
    return sum(max(0, n - 1) for n in per_block.values())


def random_instance(
    rng: np.random.Generator,
    n_blocks: int,
    n_queries: int,
    conflict_rate: float,
    block_size: int = 16,
) -> tuple[list[Tag], list[MoveRequest]]:
    """Random live-block tagging plus a request set with permutations inside
    each query and cross-query conflicts at rate ``conflict_rate``."""
    owners = rng.integers(0, n_queries, size=n_blocks)
    tags: list[Tag] = []
    next_pos = [0] * n_queries
    for q in owners:
        q = int(q)
        tags.append((q, next_pos[q] * block_size))
        next_pos[q] += 1
    requests: list[MoveRequest] = []
    for q in range(n_queries):
        mine = [s for s, t in enumerate(tags) if t[0] == q]
        if not mine:
            continue
        chosen = [s for s in mine if rng.random() < 0.8]
        positions = [tags[s][1] for s in chosen]
        perm = rng.permutation(len(chosen))
        for s, j in zip(chosen, perm):
            pos = positions[j]
            if rng.random() < 0.2:
                # move to a position this query does not occupy yet
                pos = (next_pos[q] + int(rng.integers(0, 4))) * block_size
                next_pos[q] += 4
            requests.append(MoveRequest(s, pos, q))
    for r in list(requests):
        if n_queries > 1 and rng.random() < conflict_rate:
            other = int((r.query + 1 + rng.integers(0, n_queries - 1)) % n_queries)
            pos = (next_pos[other] + 1) * block_size
            next_pos[other] += 2
            requests.append(MoveRequest(r.block, pos, other))
    # a position-changing request whose target tag is demanded twice is invalid
    seen: set[Tag] = set()
    unique = []
    for r in requests:
        if (r.query, r.position) in seen:
            continue
        seen.add((r.query, r.position))
        unique.append(r)
    return tags, unique
