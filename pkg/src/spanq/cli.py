"""``spanq`` command-line entry point.

Exit status: 0 on success, 1 for unreadable input, parse errors and bad
configuration, 2 when the optimizer does not converge or a query still holds
sugar that must be optimized away first.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .kvcache import CacheState, SnapshotError, restore, snapshot
from .optimizer import OptimizeError, RetrievalError, optimize, rules_by_name, RULE_SETS
from .sexpr import SExprError, parse_sexpr, render
from .tokenizer import MockVocab, TokenizeError, align_blocks, format_listing, tokenize_query
from .engine.bench import SCENARIOS, ConfigError, make_config, run_benchmark
from .engine.execute import CostCoeffs, ExecParams, ExecuteError, execute, to_baseline
from .engine.model import Corpus, LexicalRetriever, MockModel

log = logging.getLogger("spanq")

EXIT_OK, EXIT_INPUT, EXIT_QUERY = 0, 1, 2


class UsageError(Exception):
    """Bad input or configuration; exit status 1."""


@dataclass
class RunConfig:
    block_size: int = 16
    cache_capacity: int = 1 << 16
    seed: int = 0
    coeffs: CostCoeffs = field(default_factory=CostCoeffs)
    rules: str = "default"
    k: int = 2
    format: str = "json"

    def check(self) -> None:
        if self.block_size < 1:
            raise UsageError("block_size must be >= 1")
        if self.cache_capacity < 1:
            raise UsageError("cache_capacity must be >= 1")
        if self.rules not in RULE_SETS:
            raise UsageError(f"unknown rule set {self.rules!r}")


def load_run_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Defaults, then the config file, then flags given on the command line."""
    values: dict = {}
    if path:
        values.update(_read_json(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if isinstance(values.get("coeffs"), dict):
        values["coeffs"] = CostCoeffs(**values["coeffs"])
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


# -- helpers ------------------------------------------------------------------------

def _read_text(path: str) -> str:
    try:
        return sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror or e}") from e


def _read_json(path: str) -> dict:
    try:
        data = json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON at offset {e.pos}: {e.msg}") from e
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _parse_query(path: str):
    text = _read_text(path)
    try:
        return parse_sexpr(text)
    except SExprError as e:
        raise UsageError(f"{path}: {e}") from e


def _retriever(specs: Sequence[str]) -> Optional[LexicalRetriever]:
    if not specs:
        return None
    r = LexicalRetriever()
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise UsageError(f"--corpus expects NAME=PATH, got {spec!r}")
        r.add(Corpus.from_documents(name, [_read_text(path)]))
    return r


def _int_list(text: str) -> list[int]:
    """``"1..32"`` or ``"1,2,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError as e:
        raise UsageError(f"bad integer list {text!r}") from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError as e:
        raise UsageError(f"bad number list {text!r}") from e


def _emit(text: str, out: Optional[str]) -> None:
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(data: dict, fmt: str, deterministic: bool) -> str:
    if not deterministic:
        data = {**data, "timestamp": datetime.now(timezone.utc).isoformat()}
    if fmt == "json-compact":
        return json.dumps(data, sort_keys=True, separators=(",", ":")) + "\n"
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


# -- commands -----------------------------------------------------------------------

def cmd_optimize(args) -> int:
    cfg = load_run_config(args.config, {"rules": args.rules, "k": args.k})
    query = _parse_query(args.input)
    rules = rules_by_name(cfg.rules, _retriever(args.corpus), cfg.k)
    try:
        out, trace = optimize(query, rules, max_iters=args.max_iters)
    except OptimizeError as e:
        log.error("%s", e)
        if args.trace:
            _emit(e.trace.to_json(indent=2) + "\n", args.trace)
        return EXIT_QUERY
    except RetrievalError as e:
        raise UsageError(str(e)) from e
    _emit(render(out, args.format) + "\n", args.output)
    if args.trace:
        _emit(trace.to_json(indent=2) + "\n", args.trace)
    return EXIT_OK


def cmd_tokenize(args) -> int:
    cfg = load_run_config(args.config, {"block_size": args.block_size})
    query = _parse_query(args.input)
    try:
        tq = tokenize_query(query, MockVocab(), cfg.block_size, compress=args.compress)
    except TokenizeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_QUERY
    if not args.no_align:
        tq = align_blocks(tq)
    _emit(format_listing(tq), args.output)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, {"block_size": args.block_size,
                                        "cache_capacity": args.capacity})
    query = _parse_query(args.input)
    try:
        opt, _ = optimize(query, rules_by_name(cfg.rules, _retriever(args.corpus), cfg.k))
    except OptimizeError as e:
        log.error("%s", e)
        return EXIT_QUERY
    except RetrievalError as e:
        raise UsageError(str(e)) from e
    cache = _load_cache(args.cache) if args.cache else CacheState(cfg.cache_capacity,
                                                                   cfg.block_size)
    if cache.block_size != cfg.block_size:
        raise UsageError(f"snapshot block size {cache.block_size} != {cfg.block_size}")
    if args.baseline:
        params = ExecParams.baseline(cfg.block_size, cfg.coeffs)
        opt = to_baseline(opt)
    else:
        params = ExecParams(cfg.block_size, coeffs=cfg.coeffs)
    try:
        result, report = execute(opt, cache, MockModel(), params)
    except ExecuteError as e:
        raise UsageError(str(e)) from e
    if args.save_cache:
        Path(args.save_cache).write_bytes(snapshot(cache))
    data = {"result": render(result), "cost": report.to_dict(per_request=True),
            "cache": json.loads(cache.stats_json())}
    _emit(_dump(data, args.format, args.deterministic), args.output)
    return EXIT_OK


def _bench_overrides(args) -> dict:
    o: dict = {}
    sc = args.scenario
    if sc == "rag":
        if args.docs:
            o["docs"] = _int_list(args.docs)
        if args.doc_tokens is not None:
            o["doc_tokens"] = args.doc_tokens
    elif sc == "nested":
        if args.fanout:
            o["fanouts"] = _int_list(args.fanout)
        if args.temp:
            o["temperatures"] = _float_list(args.temp)
        if args.runs is not None:
            o["runs"] = args.runs
    elif sc == "chat":
        if args.turns is not None:
            o["turns"] = args.turns
    elif sc == "bulk":
        if args.bulks is not None:
            o["bulks"] = args.bulks
    elif sc == "cidra":
        for name in ("blocks", "queries", "instances", "batch_size"):
            if getattr(args, name, None) is not None:
                o[name] = getattr(args, name)
        if args.conflict_rate is not None:
            o["conflict_rate"] = args.conflict_rate
    if args.block_size is not None:
        o["block_size"] = args.block_size
    if args.seed is not None and sc in ("nested", "bulk", "cidra"):
        o["seed"] = args.seed
    return o


def cmd_bench(args) -> int:
    values = _read_json(args.config) if args.config else {}
    values.update(_bench_overrides(args))
    try:
        cfg = make_config(args.scenario, values)
        result = run_benchmark(args.scenario, cfg, jobs=args.jobs)
    except (ConfigError, TypeError) as e:
        raise UsageError(str(e)) from e
    if args.format == "csv":
        text = result.to_csv()
    else:
        text = _dump(result.to_dict(), args.format, args.deterministic)
    _emit(text, args.output)
    return EXIT_OK


def _load_cache(path: str) -> CacheState:
    try:
        return restore(Path(path).read_bytes())
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror or e}") from e
    except SnapshotError as e:
        raise UsageError(f"{path}: {e}") from e


def cmd_cache(args) -> int:
    if args.cache_cmd == "snapshot":
        cfg = load_run_config(args.config, {"block_size": args.block_size,
                                            "cache_capacity": args.capacity})
        cache = CacheState(cfg.cache_capacity, cfg.block_size)
        model = MockModel()
        for path in args.queries:
            try:
                opt, _ = optimize(_parse_query(path))
                execute(opt, cache, model, ExecParams(cfg.block_size, coeffs=cfg.coeffs))
            except (OptimizeError, ExecuteError, RetrievalError) as e:
                raise UsageError(f"{path}: {e}") from e
        Path(args.out).write_bytes(snapshot(cache))
        print(cache.stats_json(sort_keys=True))
        return EXIT_OK
    cache = _load_cache(args.snapshot)
    if args.cache_cmd == "restore":
        # round-trip check: a restored cache must re-serialize to the same bytes
        ok = snapshot(cache) == Path(args.snapshot).read_bytes()
        if args.out:
            Path(args.out).write_bytes(snapshot(cache))
        print(json.dumps({"restored": ok, "blocks": len(cache)}, sort_keys=True))
        return EXIT_OK if ok else EXIT_INPUT
    print(cache.stats_json(indent=2, sort_keys=True))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spanq", description="Span query toolkit.")
    p.add_argument("--config", help="JSON config file (flags override its values)")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="rewrite a query to its optimized form")
    o.add_argument("input", help="s-expression file, or - for stdin")
    o.add_argument("--rules", choices=RULE_SETS, default=None)
    o.add_argument("--k", type=int, default=None, help="judge branching factor")
    o.add_argument("--max-iters", type=int, default=10_000)
    o.add_argument("--format", choices=("sexpr", "dot"), default="sexpr")
    o.add_argument("--trace", help="write the rewrite trace JSON here (- for stdout)")
    o.add_argument("--corpus", action="append", default=[], metavar="NAME=PATH")
    o.add_argument("-o", "--output")
    o.set_defaults(func=cmd_optimize)

    t = sub.add_parser("tokenize", help="print the block-aligned token listing")
    t.add_argument("input")
    t.add_argument("--block-size", type=int, default=None)
    t.add_argument("--compress", action="store_true", help="reuse the open id for separators")
    t.add_argument("--no-align", action="store_true")
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_tokenize)

    r = sub.add_parser("run", help="optimize and execute a query on the simulator")
    r.add_argument("input")
    r.add_argument("--block-size", type=int, default=None)
    r.add_argument("--capacity", type=int, default=None, help="cache capacity in blocks")
    r.add_argument("--cache", help="start from this cache snapshot")
    r.add_argument("--save-cache", help="write the final cache snapshot here")
    r.add_argument("--baseline", action="store_true", help="run without spans")
    r.add_argument("--corpus", action="append", default=[], metavar="NAME=PATH")
    r.add_argument("--format", choices=("json", "json-compact"), default="json")
    r.add_argument("--deterministic", action="store_true", help="omit the timestamp")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a benchmark sweep")
    b.add_argument("scenario", choices=SCENARIOS)
    b.add_argument("--docs", help="rag: document counts, e.g. 1..32")
    b.add_argument("--doc-tokens", type=int)
    b.add_argument("--fanout", help="nested: fan-outs, e.g. 1..24 or 24")
    b.add_argument("--temp", help="nested: temperatures, e.g. 0,0.5")
    b.add_argument("--runs", type=int)
    b.add_argument("--turns", type=int)
    b.add_argument("--bulks", type=int)
    b.add_argument("--blocks", type=int)
    b.add_argument("--queries", type=int)
    b.add_argument("--instances", type=int)
    b.add_argument("--batch-size", type=int)
    b.add_argument("--conflict-rate", type=float)
    b.add_argument("--block-size", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    b.add_argument("--format", choices=("json", "json-compact", "csv"), default="json")
    b.add_argument("--deterministic", action="store_true", help="omit the timestamp")
    b.add_argument("-o", "--output")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("cache", help="cache snapshots")
    csub = c.add_subparsers(dest="cache_cmd", required=True)
    cs = csub.add_parser("snapshot", help="run queries into a fresh cache and save it")
    cs.add_argument("queries", nargs="+")
    cs.add_argument("--out", required=True)
    cs.add_argument("--block-size", type=int, default=None)
    cs.add_argument("--capacity", type=int, default=None)
    cr = csub.add_parser("restore", help="load and verify a snapshot")
    cr.add_argument("snapshot")
    cr.add_argument("--out", help="re-write the restored cache here")
    st = csub.add_parser("stats", help="print a snapshot's statistics")
    st.add_argument("snapshot")
    c.set_defaults(func=cmd_cache)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = getattr(logging, os.environ.get("SPANQ_LOG", "WARNING").upper(), None)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
