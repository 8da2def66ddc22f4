"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (also collected into the pytest terminal
summary). Runtime budgets are part of each criterion.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from spanq.cidra import KvStore, execute_plan, oracle_reposition, plan_moves, random_instance
from spanq.cidra import raw_duplication_count
from spanq.engine import ExecParams, MockModel, execute, replay_chat, schedule_bulk
from spanq.engine.bench import (
    ChatConfig,
    NestedConfig,
    RagConfig,
    bench_nested,
    bench_rag,
    fit_r2,
    replay_chat_figure,
    replay_nested_figure,
    replay_rag_figure,
)
from spanq.engine.scheduler import random_bulk
from spanq.kvcache import CacheState, block_hashes
from spanq.optimizer import (
    OptimizeError, canonical, judge_nodes, judge_plies, optimize, rules_by_name,
)
from spanq.query import ONE_TOKEN, C, F, G, GenParams, Node, Op, R, S, U, A, join, plus, span
from spanq.rope import RopeParams, rerope, rope_apply
from spanq.tokenizer import CLOSE_ID, OPEN_ID, MockVocab, align_blocks, span_request
from spanq.tokenizer import tokenize_query

from helpers import StubRetriever, block_of, plus_region, random_query, record, span_bodies


def _criterion(number, title, budget, body):
    failures: list[str] = []
    start = time.perf_counter()
    try:
        detail = body(failures)
    except Exception as e:  # an exception is a failed criterion, reported as such
        detail = f"raised {type(e).__name__}: {e}"
        failures.append("exception")
    seconds = time.perf_counter() - start
    if seconds > budget:
        failures.append(f"runtime {seconds:.1f}s exceeds {budget:g}s")
    ok = not failures
    line = record(number, title, ok, seconds, detail if ok else f"{detail} [{'; '.join(failures)}]")
    print(line)
    assert ok, line


def _words(prefix, n):
    return " ".join(f"{prefix}{i}" for i in range(n))


# 1 ---------------------------------------------------------------------------------

def test_criterion_01_figure_hit_rates():
    def body(fail):
        got = (replay_chat_figure(), replay_rag_figure(), replay_nested_figure())
        want = (Fraction(4, 5), Fraction(1, 3), Fraction(2, 7))
        if got != want:
            fail.append(f"got {got}")
        return "chat {} rag {} nested {}".format(*got)

    _criterion(1, "figure-exact hit rates", 1.0, body)


# 2 ---------------------------------------------------------------------------------

def test_criterion_02_chat_asymptote():
    def body(fail):
        rows = replay_chat(ChatConfig(turns=20, block_size=16, system_tokens=32,
                                      user_tokens=32, assistant_tokens=32))
        rates = [r["hit_rate"] for r in rows]
        if any(b < a for a, b in zip(rates, rates[1:])):
            fail.append("hit rate decreased")
        if rates[9] < 0.90:
            fail.append(f"turn 10 hit rate {rates[9]:.3f} < 0.90")
        return f"turn 10 {rates[9]:.3f}, turn 20 {rates[-1]:.3f}, monotone"

    _criterion(2, "chat hit rate asymptote", 1.0, body)


# 3 ---------------------------------------------------------------------------------

def _stock_reorder_hit(frag_blocks, bs=16):
    """Two requests with two fragments swapped, plain chained hashes."""
    sys_ids = list(range(16, 16 + bs))
    f1 = list(range(1000, 1000 + frag_blocks * bs))
    f2 = list(range(5000, 5000 + frag_blocks * bs))
    q1, q2 = list(range(9000, 9000 + bs)), list(range(9500, 9500 + bs))
    cache = CacheState(1 << 16, bs)
    first = sys_ids + f1 + f2 + q1
    cache.insert(first, block_hashes(first, bs, span_aware=False))
    second = sys_ids + f2 + f1 + q2
    hit = cache.lookup(block_hashes(second, bs, span_aware=False), n_tokens=len(second))
    return hit.hit_tokens(bs, len(second)), len(second)


def _rag(docs, bs):
    q = G(join(S(_words("sys", bs)), plus(*(Node(Op.G1, (F(d),), gen=ONE_TOKEN) for d in docs)),
               U(_words("ask", bs))), gen=GenParams(max_tokens=4))
    return optimize(q)[0]


def test_criterion_03_reorder_decay_and_span_recovery():
    def body(fail):
        bs = 16
        rates = []
        for blocks in range(1, 17):
            hit, n = _stock_reorder_hit(blocks, bs)
            if hit != bs:  # only the system block survives the swap
                fail.append(f"{blocks} blocks: stock hit {hit} tokens, expected {bs}")
            rates.append(Fraction(hit, n))
        if any(b > a for a, b in zip(rates, rates[1:])):
            fail.append("stock hit rate grew with fragment length")
        late = [float(r) for r in rates[8:]]
        if max(late) >= 0.10:
            fail.append(f"stock hit rate {max(late):.3f} past 8 blocks")

        rng = np.random.default_rng(0)
        model, trials, span_blocks = MockModel(), 0, 0
        for blocks in (1, 4, 9, 16):
            for n_docs in (2, 3, 5):
                docs = [_words(f"d{blocks}x{d}w", blocks * bs - 1) for d in range(n_docs)]
                cache = CacheState(1 << 16, bs)
                execute(_rag(docs, bs), cache, model, ExecParams(bs))
                for _ in range(6):
                    perm = [docs[i] for i in rng.permutation(n_docs)]
                    q = _rag(perm, bs)
                    _, rep = execute(q, cache, model, ExecParams(bs))
                    root = [r for r in rep.requests if r.kind == "root"][0]
                    ids = align_blocks(tokenize_query(q, model.vocab, bs)).ids
                    first, close = ids.index(OPEN_ID), ids.index(CLOSE_ID)
                    need = (close - first) // bs + 1
                    got = min(need, max(0, root.hit_tokens // bs - first // bs))
                    span_blocks += need
                    trials += 1
                    if got != need:
                        fail.append(f"{n_docs}x{blocks} blocks: {got}/{need} span blocks hit")
        return (f"stock rate at 9 blocks {float(rates[8]):.3f}, at 16 {float(rates[-1]):.3f}; "
                f"span-aware hit {span_blocks}/{span_blocks} span blocks over {trials} "
                "permutations")

    _criterion(3, "reordered fragments: stock decay vs span recovery", 5.0, body)


# 4 ---------------------------------------------------------------------------------

def test_criterion_04_growth_laws():
    def body(fail):
        rows = bench_rag(RagConfig(docs=list(range(1, 33)), doc_tokens=2857)).rows
        x = [r["total_tokens"] for r in rows]
        r2_base = fit_r2(x, [r["baseline_attended_pairs"] for r in rows], 2)
        r2_hit = fit_r2(x, [r["span_hit_ttft_proxy"] for r in rows], 1)
        last = rows[-1]
        if r2_base < 0.99:
            fail.append(f"baseline quadratic R2 {r2_base:.4f}")
        if r2_hit < 0.99:
            fail.append(f"span-hit linear R2 {r2_hit:.4f}")
        if last["miss_pair_ratio"] < 3:
            fail.append(f"miss pair ratio {last['miss_pair_ratio']:.2f}")
        if last["hit_proxy_ratio"] < 10:
            fail.append(f"hit proxy ratio {last['hit_proxy_ratio']:.2f}")
        return (f"R2 quad {r2_base:.4f}, R2 lin {r2_hit:.4f}, 32 docs: pair ratio "
                f"{last['miss_pair_ratio']:.2f}, proxy ratio {last['hit_proxy_ratio']:.0f}")

    _criterion(4, "RAG growth laws", 30.0, body)


# 5 ---------------------------------------------------------------------------------

def test_criterion_05_nested_generation_sweep():
    def body(fail):
        rows = bench_nested(NestedConfig()).rows
        cold = [r["proxy_ratio"] for r in rows if r["temperature"] == 0]
        hot = [r["proxy_ratio"] for r in rows if r["temperature"] > 0 and r["fanout"] == 24]
        outside = [r["fanout"] for r in rows
                   if r["temperature"] == 0 and not 0.95 <= r["proxy_ratio"] <= 1.05]
        if outside:
            fail.append(f"temperature 0 ratio outside [0.95, 1.05] at fan-outs {outside}")
        if min(hot) < 5:
            fail.append(f"fan-out 24 ratio {min(hot):.2f} < 5")
        return (f"temperature 0 ratios {min(cold):.3f}..{max(cold):.3f}; "
                f"fan-out 24 sampled ratios {min(hot):.2f}..{max(hot):.2f}")

    _criterion(5, "nested generation sweep", 60.0, body)


# 6 ---------------------------------------------------------------------------------

def test_criterion_06_cidra_matches_oracle():
    def body(fail):
        rng = np.random.default_rng(2024)
        params = RopeParams(64)
        worst, bad, cycles = 0.0, 0, 0
        for trial in range(1000):
            n_blocks = int(rng.integers(1, 129))
            n_queries = int(rng.integers(1, 9))
            rate = (0.0, 0.2, 0.5)[trial % 3]
            tags, reqs = random_instance(rng, n_blocks, n_queries, rate, 16)
            store = KvStore.synthetic(tags, 2 * n_blocks, params, 16, seed=trial)
            plan = plan_moves(reqs, store)
            expect = oracle_reposition(reqs, store, params)
            got, stats = execute_plan(plan, store.copy(), params)
            live = got.live_slots()
            same = live == expect.live_slots() and got.tags == expect.tags
            err = float(np.abs(got.keys[live] - expect.keys[live]).max(initial=0)) if same else 1
            same = same and err <= 1e-5 and np.array_equal(got.values[live], expect.values[live])
            worst = max(worst, err)
            bound = max((sum(plan.components[i].needs_scratch for i in b)
                         for b in plan.batches), default=0)
            if plan.fallback and any(plan.components[i].needs_scratch for i in plan.fallback):
                bound = max(bound, 1)
            cycles += len(plan.cycles)
            if not same or stats.duplicated_blocks != raw_duplication_count(reqs) \
                    or stats.scratch_peak > bound:
                bad += 1
        if bad:
            fail.append(f"{bad} instances disagree")
        return f"1000 instances, {cycles} cycles, max abs error {worst:.2e}"

    _criterion(6, "repositioning plan equals oracle", 60.0, body)


# 7 ---------------------------------------------------------------------------------

def test_criterion_07_rerope_properties():
    def body(fail):
        rng = np.random.default_rng(7)
        worst = 0.0
        for d in (8, 64, 128):
            p = RopeParams(d)
            x = rng.standard_normal((10_000, d))
            a, b, c = (rng.integers(0, 8192, size=10_000) for _ in range(3))
            if not np.array_equal(rerope(x, a, a, p), x):
                fail.append(f"d={d}: zero shift is not the identity")
            direct = np.abs(rerope(rope_apply(x, a, p), a, b, p) - rope_apply(x, b, p)).max()
            comp = np.abs(rerope(rerope(x, a, b, p), b, c, p) - rerope(x, a, c, p)).max()
            worst = max(worst, direct, comp)
            if max(direct, comp) > 1e-5:
                fail.append(f"d={d}: error {max(direct, comp):.2e}")
        return f"d in (8, 64, 128), 10000 vectors each, max error {worst:.2e}"

    _criterion(7, "rotary re-encoding properties", 10.0, body)


# 8 ---------------------------------------------------------------------------------

def test_criterion_08_optimizer_structure():
    def body(fail):
        g1 = lambda t: Node(Op.G1, (F(t),), gen=ONE_TOKEN)  # noqa: E731
        chat, _ = optimize(C(S("s"), A("a"), U("u")))
        if chat.root != G(join(S("s"), A("a"), U("u")), gen=GenParams()):
            fail.append("chat shape")
        rag, _ = optimize(C(S("s"), R("docs", "q", k=2), U("u")), retriever=StubRetriever())
        want = G(join(S("s"), plus(span(g1("docs q frag0")), span(g1("docs q frag1"))),
                      U("u")), gen=GenParams())
        if canonical(rag.root) != canonical(want):
            fail.append("rag shape")
        nested, _ = optimize(C(S("j"), plus(C(S("s1"), U("u1")), C(S("s1"), U("u2"))), U("p")))
        inner = [span(G(join(S("s1"), U(u)), gen=GenParams())) for u in ("u1", "u2")]
        if canonical(nested.root) != canonical(G(join(S("j"), plus(*inner), U("p")),
                                                 gen=GenParams())):
            fail.append("nested shape")
        judge = C(S("judge"), plus(*(C(S("s"), U(f"c{i}")) for i in range(8))), U("pick"))
        tree, _ = optimize(judge, rules_by_name("attention", k=2))
        shape = (judge_plies(tree), len(judge_nodes(tree)))
        if shape != (3, 7):
            fail.append(f"8-way binary reduction gave {shape}")
        rng = np.random.default_rng(8)
        retriever = StubRetriever()
        for i in range(10_000):
            q = random_query(rng)
            try:
                once, _ = optimize(q, retriever=retriever)
            except OptimizeError:
                fail.append(f"tree {i} did not converge")
                break
            twice, trace = optimize(once, retriever=retriever)
            if twice.root != once.root or trace.steps:
                fail.append(f"tree {i} not idempotent")
                break
        return f"shapes ok, 8-way k=2 -> {shape[0]} plies / {shape[1]} judges, 10000 trees"

    _criterion(8, "optimizer structure", 30.0, body)


# 9 ---------------------------------------------------------------------------------

def test_criterion_09_hash_suspension():
    def body(fail):
        rng = np.random.default_rng(9)
        ctx = perm = 0
        for _ in range(1000):
            bs = int(rng.integers(1, 17))
            bodies = span_bodies(rng, bs, int(rng.integers(1, 6)))
            region = plus_region(bodies, bs)
            p1 = [t for _ in range(int(rng.integers(0, 4))) for t in block_of(rng, bs)]
            p2 = [t for _ in range(int(rng.integers(1, 4))) for t in block_of(rng, bs)]
            inside = (len(region) - bs) // bs
            a = block_hashes(p1 + region, bs)[len(p1) // bs:][:inside]
            b = block_hashes(p2 + region, bs)[len(p2) // bs:][:inside]
            ctx += a == b
            order = [bodies[i] for i in rng.permutation(len(bodies))]
            suffix = block_of(rng, bs) + block_of(rng, bs)
            x = block_hashes(p1 + region + suffix, bs)[-3:]
            y = block_hashes(p1 + plus_region(order, bs) + suffix, bs)[-3:]
            perm += x == y
        if ctx != 1000:
            fail.append(f"context independence held in {ctx}/1000")
        if perm != 1000:
            fail.append(f"permutation invariance held in {perm}/1000")
        return f"context independence {ctx}/1000, permutation invariance {perm}/1000"

    _criterion(9, "hash suspension properties", 10.0, body)


# 10 --------------------------------------------------------------------------------

def test_criterion_10_bulk_scheduler():
    def body(fail):
        rng = np.random.default_rng(10)
        vocab = MockVocab()
        gains, worst = [], None
        for b in range(100):
            qs = random_bulk(rng, 30, 40, words=100)
            distinct = {f for q in qs for f in q.fragments}
            working = sum(len(span_request(Node(Op.G1, (F(f),), gen=ONE_TOKEN), vocab, 16).ids)
                          // 16 for f in distinct)
            cap = int(working / rng.uniform(2.0, 4.0))
            if not working > cap:
                fail.append(f"bulk {b}: working set does not exceed capacity")
            # the plain greedy order, without the fallback to input order
            sched = schedule_bulk(qs, cap, 16, vocab, guard=False)
            g, base = sched.predicted_hit_tokens, sched.input_order_hit_tokens
            gains.append(g / base if base else float("inf"))
            if g < base:
                fail.append(f"bulk {b}: greedy {g} < input order {base}")
            worst = min(gains)
        return f"100 bulks, greedy/input hit ratio min {worst:.2f} mean {np.mean(gains):.2f}"

    _criterion(10, "bulk scheduler dominance", 30.0, body)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
