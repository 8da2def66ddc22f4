"""Benchmark scenarios and replays of small illustrative traces.

Every scenario runs a stock baseline (no spans, full causal attention, plain
prefix cache) next to span-query variants and reports one row per sweep
point. Speedups are ratios of the TTFT cost proxy, not wall-clock times.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..cidra import (
    KvStore,
    PlanError,
    execute_plan,
    oracle_reposition,
    plan_moves,
    random_instance,
    raw_duplication_count,
)
from ..kvcache import CacheState, block_hashes
from ..optimizer import optimize
from ..query import C, F, G, G1, GenParams, Node, S, U, join, plus
from ..rope import RopeParams
from .execute import CostCoeffs, CostReport, ExecParams, execute, to_baseline
from .model import MockModel
from .scheduler import random_bulk, schedule_bulk

log = logging.getLogger(__name__)

SCENARIOS = ("chat", "rag", "nested", "bulk", "cidra")


class ConfigError(ValueError):
    pass


def _words(prefix: str, n: int) -> str:
    return " ".join(f"{prefix}{j}" for j in range(n))


# -- configs ------------------------------------------------------------------------

@dataclass
class RagConfig:
    docs: list[int] = field(default_factory=lambda: list(range(1, 33)))
    doc_tokens: int = 2857
    system_tokens: int = 32
    question_tokens: int = 32
    block_size: int = 16
    capacity: int = 1 << 16
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)

    def check(self) -> None:
        if not self.docs or min(self.docs) < 1:
            raise ConfigError("docs must be a non-empty list of positive counts")
        if self.doc_tokens < 1 or self.block_size < 1 or self.capacity < 1:
            raise ConfigError("doc_tokens, block_size and capacity must be >= 1")


@dataclass
class NestedConfig:
    fanouts: list[int] = field(default_factory=lambda: list(range(1, 25)))
    temperatures: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    runs: int = 2  # measured runs after one warm-up run
    system_tokens: int = 32
    user_tokens: int = 32
    block_size: int = 16
    capacity: int = 1 << 16
    seed: int = 0
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)

    def check(self) -> None:
        if not self.fanouts or min(self.fanouts) < 1:
            raise ConfigError("fanouts must be positive")
        if any(t < 0 for t in self.temperatures):
            raise ConfigError("temperatures must be >= 0")
        if self.runs < 1 or self.block_size < 1 or self.capacity < 1:
            raise ConfigError("runs, block_size and capacity must be >= 1")


@dataclass
class ChatConfig:
    turns: int = 20
    system_tokens: int = 32
    user_tokens: int = 32
    assistant_tokens: int = 32
    block_size: int = 16
    capacity: int = 1 << 14

    def check(self) -> None:
        if self.turns < 1 or self.block_size < 1 or self.capacity < 1:
            raise ConfigError("turns, block_size and capacity must be >= 1")
        if min(self.system_tokens, self.user_tokens, self.assistant_tokens) < 1:
            raise ConfigError("message lengths must be >= 1")


@dataclass
class BulkConfig:
    bulks: int = 20
    queries: int = 30
    fragments: int = 40
    working_set_ratio: tuple[float, float] = (2.0, 4.0)
    block_size: int = 16
    seed: int = 0

    def check(self) -> None:
        lo, hi = self.working_set_ratio
        if not 1.0 <= lo <= hi:
            raise ConfigError("working_set_ratio must satisfy 1 <= lo <= hi")
        if min(self.bulks, self.queries, self.fragments, self.block_size) < 1:
            raise ConfigError("bulk sizes must be >= 1")


@dataclass
class CidraConfig:
    instances: int = 20
    blocks: int = 64
    queries: int = 4
    conflict_rate: float = 0.2
    block_size: int = 16
    head_dim: int = 64
    batch_size: int = 64
    scratch_budget: int = 8
    seed: int = 0

    def check(self) -> None:
        if not 0.0 <= self.conflict_rate <= 1.0:
            raise ConfigError("conflict_rate must be in [0, 1]")
        if min(self.instances, self.blocks, self.queries, self.block_size, self.batch_size) < 1:
            raise ConfigError("sizes must be >= 1")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError("head_dim must be even")


CONFIGS = {"chat": ChatConfig, "rag": RagConfig, "nested": NestedConfig,
           "bulk": BulkConfig, "cidra": CidraConfig}


def make_config(scenario: str, values: Optional[dict] = None):
    """Build a scenario config from a plain dict, rejecting unknown keys."""
    if scenario not in CONFIGS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    cls = CONFIGS[scenario]
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {scenario} config keys: {', '.join(unknown)}")
    if isinstance(values.get("coeffs"), dict):
        values["coeffs"] = CostCoeffs(**values["coeffs"])
    if "working_set_ratio" in values:
        values["working_set_ratio"] = tuple(values["working_set_ratio"])
    try:
        cfg = cls(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg.check()
    return cfg


# -- results ------------------------------------------------------------------------

@dataclass
class BenchResult:
    scenario: str
    config: Any
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "config": asdict(self.config), "rows": self.rows}

    def to_json(self, pretty: bool = True) -> str:
        if pretty:
            return json.dumps(self.to_dict(), indent=2, sort_keys=True)
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.rows:
            return ""
        cols = list(self.rows[0])
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()


def fit_r2(x: Sequence[float], y: Sequence[float], degree: int) -> float:
    """Coefficient of determination of a least-squares polynomial fit."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot else 1.0


def _sweep(fn: Callable, args: list[tuple], jobs: int = 1) -> list:
    """Evaluate sweep points, optionally in worker processes. Results keep
    sweep order whatever order the workers finish in."""
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*args)))


def _ratio(a: float, b: float) -> float:
    return a / b if b else float("inf")


# -- rag ----------------------------------------------------------------------------

def rag_query(docs: Sequence[str], system: str, question: str) -> Node:
    return G(
        join(S(system), plus(*(G1(F(d)) for d in docs)), U(question)),
        gen=GenParams(max_tokens=16),
    )


def rag_point(n_docs: int, cfg: RagConfig, model: MockModel) -> dict:
    docs = [_words(f"r{d}w", cfg.doc_tokens) for d in range(n_docs)]
    system, question = _words("sys", cfg.system_tokens), _words("q", cfg.question_tokens)
    q, _ = optimize(rag_query(docs, system, question))
    warm, _ = optimize(rag_query(docs[::-1], system, question))
    bs = cfg.block_size

    def fresh() -> CacheState:
        return CacheState(cfg.capacity, bs)

    span = ExecParams(bs, coeffs=cfg.coeffs)
    _, base = execute(to_baseline(q), fresh(), model, ExecParams.baseline(bs, cfg.coeffs))
    _, miss = execute(q, fresh(), model, span)
    cache = fresh()
    execute(warm, cache, model, span)
    _, hit = execute(q, cache, model, span)
    total = n_docs * cfg.doc_tokens + cfg.system_tokens + cfg.question_tokens
    row: dict = {"docs": n_docs, "total_tokens": total}
    for name, rep in (("baseline", base), ("span_miss", miss), ("span_hit", hit)):
        row[f"{name}_attended_pairs"] = rep.attended_pairs
        row[f"{name}_repositioned_tokens"] = rep.repositioned_tokens
        row[f"{name}_hit_tokens"] = rep.hit_tokens
        row[f"{name}_ttft_proxy"] = rep.ttft_proxy
    row["miss_pair_ratio"] = _ratio(base.attended_pairs, miss.attended_pairs)
    row["hit_proxy_ratio"] = _ratio(base.ttft_proxy, hit.ttft_proxy)
    return row


def bench_rag(cfg: RagConfig, model: Optional[MockModel] = None, jobs: int = 1) -> BenchResult:
    model = model or MockModel()
    return BenchResult("rag", cfg, _sweep(rag_point, [(n, cfg, model) for n in cfg.docs], jobs))


# -- nested generation ------------------------------------------------------------

def nested_query(fanout: int, temperature: float, run: int, cfg: NestedConfig) -> Node:
    def seed(i: int) -> int:
        return cfg.seed * 1_000_003 + run * 1009 + i

    inner = [
        G(join(S(_words("gsys", cfg.system_tokens)), U(_words(f"ask{i}w", cfg.user_tokens))),
          gen=GenParams(temperature=temperature, seed=seed(i)))
        for i in range(fanout)
    ]
    return G(join(S(_words("judge", cfg.system_tokens)), plus(*inner), U(_words("pick", 8))),
             gen=GenParams(max_tokens=8))


def nested_point(fanout: int, temperature: float, cfg: NestedConfig, model: MockModel) -> dict:
    bs = cfg.block_size
    variants = {
        "baseline": (lambda q: to_baseline(q), ExecParams.baseline(bs, cfg.coeffs)),
        "span": (lambda q: q, ExecParams(bs, coeffs=cfg.coeffs)),
    }
    row: dict = {"fanout": fanout, "temperature": temperature}
    for name, (shape, params) in variants.items():
        cache = CacheState(cfg.capacity, bs)
        total = CostReport(coeffs=cfg.coeffs)
        for run in range(cfg.runs + 1):
            q, _ = optimize(nested_query(fanout, temperature, run, cfg))
            _, rep = execute(shape(q), cache, model, params)
            if run:
                total = total.merge(rep)
        row[f"{name}_attended_pairs"] = total.attended_pairs
        row[f"{name}_repositioned_tokens"] = total.repositioned_tokens
        row[f"{name}_hit_rate"] = total.hit_rate
        row[f"{name}_ttft_proxy"] = total.ttft_proxy
    row["proxy_ratio"] = _ratio(row["baseline_ttft_proxy"], row["span_ttft_proxy"])
    return row


def bench_nested(cfg: NestedConfig, model: Optional[MockModel] = None,
                 jobs: int = 1) -> BenchResult:
    model = model or MockModel()
    points = [(f, t, cfg, model) for f in cfg.fanouts for t in cfg.temperatures]
    return BenchResult("nested", cfg, _sweep(nested_point, points, jobs))


# -- chat ---------------------------------------------------------------------------

def replay_chat(cfg: ChatConfig, model: Optional[MockModel] = None) -> list[dict]:
    """Multi-turn chat where each request resends the whole history."""
    model = model or MockModel()
    cache = CacheState(cfg.capacity, cfg.block_size)
    history: list[Node] = [S(_words("csys", cfg.system_tokens))]
    rows = []
    for turn in range(1, cfg.turns + 1):
        history.append(U(_words(f"turn{turn}w", cfg.user_tokens)))
        q, _ = optimize(C(*(h.clone() for h in history),
                          gen=GenParams(max_tokens=cfg.assistant_tokens)))
        out, rep = execute(q, cache, model, ExecParams(cfg.block_size))
        history.append(out.root)
        rows.append({"turn": turn, "input_tokens": rep.input_tokens,
                     "hit_tokens": rep.hit_tokens, "hit_rate": rep.hit_rate})
    return rows


def bench_chat(cfg: ChatConfig, model: Optional[MockModel] = None) -> BenchResult:
    return BenchResult("chat", cfg, replay_chat(cfg, model))


# -- bulk ---------------------------------------------------------------------------

def bench_bulk(cfg: BulkConfig) -> BenchResult:
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for b in range(cfg.bulks):
        qs = random_bulk(rng, cfg.queries, cfg.fragments)
        distinct = len({f for q in qs for f in q.fragments})
        blocks = distinct * -(-101 // cfg.block_size)
        ratio = float(rng.uniform(*cfg.working_set_ratio))
        cap = max(1, int(blocks / ratio))
        greedy = schedule_bulk(qs, cap, cfg.block_size, guard=False)
        guarded = schedule_bulk(qs, cap, cfg.block_size)
        rows.append({
            "bulk": b, "capacity_blocks": cap, "working_set_blocks": blocks,
            "greedy_hit_tokens": greedy.predicted_hit_tokens,
            "scheduled_hit_tokens": guarded.predicted_hit_tokens,
            "input_order_hit_tokens": greedy.input_order_hit_tokens,
            "fell_back": guarded.fell_back,
            "gain": _ratio(guarded.predicted_hit_tokens, guarded.input_order_hit_tokens),
        })
    return BenchResult("bulk", cfg, rows)


# -- cidra --------------------------------------------------------------------------

def cidra_trial(cfg: CidraConfig, rng: np.random.Generator, trial: int = 0) -> dict:
    params = RopeParams(cfg.head_dim)
    tags, reqs = random_instance(rng, cfg.blocks, cfg.queries, cfg.conflict_rate, cfg.block_size)
    store = KvStore.synthetic(tags, 2 * cfg.blocks, params, cfg.block_size,
                              seed=trial, scratch_budget=cfg.scratch_budget)
    plan = plan_moves(reqs, store, cfg.batch_size)
    expect = oracle_reposition(reqs, store, params)
    got, stats = execute_plan(plan, store.copy(), params)
    live = got.live_slots()
    match = live == expect.live_slots() and got.tags == expect.tags
    err = float(np.abs(got.keys[live] - expect.keys[live]).max()) if live and match else 0.0
    match = match and err <= 1e-5 and np.array_equal(got.values[live], expect.values[live])
    bound = max((sum(plan.components[i].needs_scratch for i in b) for b in plan.batches),
                default=0)
    if plan.fallback:
        bound = max(bound, 1)
    return {
        "trial": trial, "requests": len(reqs), "moves": len(plan.moves),
        "cycles": len(plan.cycles), "chains": len(plan.chains),
        "batches": stats.batches, "fallback": stats.fallback,
        "duplicated_blocks": stats.duplicated_blocks,
        "expected_duplications": raw_duplication_count(reqs),
        "scratch_peak": stats.scratch_peak, "scratch_bound": bound,
        "moved_tokens": stats.moved_tokens, "max_abs_err": err, "oracle_match": bool(match),
    }


def bench_cidra(cfg: CidraConfig) -> BenchResult:
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for t in range(cfg.instances):
        try:
            rows.append(cidra_trial(cfg, rng, t))
        except PlanError as e:
            raise ConfigError(f"instance {t}: {e}") from e
    return BenchResult("cidra", cfg, rows)


def run_benchmark(scenario: str, config=None, model: Optional[MockModel] = None,
                  jobs: int = 1) -> BenchResult:
    cfg = config if config is not None and not isinstance(config, dict) else make_config(
        scenario, config)
    runners: dict[str, Callable[[], BenchResult]] = {
        "chat": lambda: bench_chat(cfg, model),
        "rag": lambda: bench_rag(cfg, model, jobs),
        "nested": lambda: bench_nested(cfg, model, jobs),
        "bulk": lambda: bench_bulk(cfg),
        "cidra": lambda: bench_cidra(cfg),
    }
    if scenario not in runners:
        raise ConfigError(f"unknown scenario {scenario!r}")
    log.info("running %s benchmark", scenario)
    return runners[scenario]()


# -- figure-scale replays (block size 2, stock prefix cache) ------------------------

def _ids(names: str, table: dict[str, int]) -> list[int]:
    return [table.setdefault(w, 16 + len(table)) for w in names.split()]


def _replay(requests: Sequence[tuple[str, str]], block_size: int = 2) -> list[tuple[int, int]]:
    """Run ``(prompt, output)`` word lists through a stock prefix cache.

    Returns ``(hit tokens, prompt tokens)`` per request. Outputs are appended
    to the cached sequence, as a server caches what it generates.
    """
    table: dict[str, int] = {}
    cache = CacheState(1024, block_size)
    out = []
    for prompt, output in requests:
        p = _ids(prompt, table)
        full = p + _ids(output, table)
        hit = cache.lookup(block_hashes(p, block_size, span_aware=False), n_tokens=len(p))
        out.append((hit.hit_tokens(block_size, len(p)), len(p)))
        cache.insert(full, block_hashes(full, block_size, span_aware=False))
    return out


def replay_chat_figure() -> Fraction:
    """Second chat turn: cached share of the five history tokens."""
    reqs = [("hello", "how are you ?"), ("hello how are you ? i am fine", "")]
    hit, _ = _replay(reqs)[1]
    return Fraction(hit, 5)


def replay_rag_figure() -> Fraction:
    """Second RAG request with the two fragments retrieved in reverse order."""
    reqs = [("s1a s1b f1 f2 u1a u1b", "x"), ("s1a s1b f2 f1 u2a u2b", "")]
    hit, n = _replay(reqs)[1]
    return Fraction(hit, n)


def replay_nested_figure() -> Fraction:
    """Judge request over two generated candidates; its instructions were seen before."""
    reqs = [
        ("s2a s2b", ""),  # earlier judge call warmed the judge instructions
        ("s1a s1b u1a u1b", "a1a a1b"),
        ("s1a s1b u2a u2b", "a2a a2b"),
        ("s2a s2b a1a a1b a2a a2b u3", ""),
    ]
    hit, n = _replay(reqs)[3]
    return Fraction(hit, n)
