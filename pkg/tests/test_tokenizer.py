import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spanq import parse_sexpr
from spanq.kvcache import CacheState, block_hashes
from spanq.query import A, C, F, G, G1, GenParams, Op, S, U, join, plus, span
from spanq.tokenizer import (
    CLOSE,
    CLOSE_ID,
    OPEN_ID,
    PAD,
    SEP_ID,
    STRUCTURAL,
    MockVocab,
    SpanParseError,
    Token,
    TokenizeError,
    VocabError,
    align_blocks,
    crop_trailing_partial,
    format_listing,
    parse_listing,
    parse_spans,
    span_request,
    tokenize_query,
)

from helpers import random_tokenizable

GOLDEN = Path(__file__).parent / "golden"
VOCAB = MockVocab()


def _rag_bs2():
    return parse_sexpr((GOLDEN / "rag_bs2.sexpr").read_text()).root


def test_rag_listing_matches_golden():
    tq = align_blocks(tokenize_query(_rag_bs2(), VOCAB, 2))
    assert format_listing(tq) == (GOLDEN / "rag_bs2.txt").read_text()


def test_rag_layout_by_hand():
    raw = tokenize_query(_rag_bs2(), VOCAB, 2)
    kinds = [t.kind for t in raw.tokens]
    assert kinds == ["content", "open", "content", "content", "sep", "content", "close",
                     "content"]
    assert raw.tokens[6].back_ptr == 1
    aligned = align_blocks(raw)
    # s1 pad ( f1a f1b pad )( f2 )2 u1
    assert [t.kind for t in aligned.tokens] == [
        "content", "pad", "open", "content", "content", "pad", "sep", "content", "close",
        "content"]
    close = aligned.tokens[8]
    assert close.back_ptr == 2 and aligned.tokens[close.back_ptr].id == OPEN_ID


def test_listing_round_trips():
    tq = align_blocks(tokenize_query(_rag_bs2(), VOCAB, 2))
    assert [(t.id, t.kind, t.back_ptr) for t in parse_listing(format_listing(tq))] == [
        (t.id, t.kind, t.back_ptr) for t in tq.tokens]


def test_query_without_plus_has_no_span_tokens():
    tq = tokenize_query(G(join(S("sys prompt"), A("hi there"), U("question")),
                          gen=GenParams()), VOCAB, 4)
    assert all(t.kind not in STRUCTURAL for t in tq.tokens)
    assert tq.spans == ()


def test_nested_regions_close_inside_out():
    inner = plus(U("a"), U("b"))
    q = G(join(S("s"), plus(span(G1(join(inner, U("c")))), span(G1(F("d"))))),
          gen=GenParams())
    tq = align_blocks(tokenize_query(q, VOCAB, 2))
    closes = [t for t in tq.tokens if t.kind == CLOSE]
    assert len(closes) == 2
    # the inner region closes first and was opened later
    assert closes[0].back_ptr > closes[1].back_ptr


def test_generate_outside_span_is_rejected():
    with pytest.raises(TokenizeError, match="run optimize first"):
        tokenize_query(G(join(U("a"), G(U("b"), gen=GenParams())), gen=GenParams()), VOCAB)
    with pytest.raises(TokenizeError, match="run optimize first"):
        tokenize_query(C(U("a")), VOCAB)


def test_alignment_is_idempotent():
    tq = align_blocks(tokenize_query(_rag_bs2(), VOCAB, 2))
    assert align_blocks(tq) == tq


def test_block_size_one_never_pads():
    q = random_tokenizable(np.random.default_rng(3))
    tq = align_blocks(tokenize_query(q, VOCAB, 1))
    assert all(t.kind != PAD for t in tq.tokens)


def test_crop_examples(caplog):
    assert crop_trailing_partial([16, 17, 18], 2) == [16, 17]
    assert crop_trailing_partial([16, 17, 18, 19], 2) == [16, 17, 18, 19]
    with caplog.at_level(logging.WARNING, logger="spanq.tokenizer"):
        assert crop_trailing_partial([16], 2) == []
    assert "cropped to empty" in caplog.text


def test_crop_with_offset():
    assert crop_trailing_partial([16, 17, 18], 2, offset=1) == [16, 17, 18]
    assert crop_trailing_partial([16, 17], 2, offset=1) == [16]


def test_cropped_span_is_fully_cached():
    for n_out in range(0, 9):
        gen = G(U("what is up"), gen=GenParams(max_tokens=n_out or 1))
        prompt = span_request(span(gen), VOCAB, 4).ids
        out = crop_trailing_partial(list(range(100, 100 + n_out)), 4)
        stored = prompt + out
        cache = CacheState(64, 4)
        cache.insert(stored, block_hashes(stored, 4))
        hit = cache.lookup(block_hashes(stored, 4), n_tokens=len(stored))
        assert hit.hit_tokens(4, len(stored)) == len(stored)


def test_parse_spans_without_specials():
    toks = [Token(i) for i in range(16, 24)]
    assert parse_spans(toks, 2) == ()


def test_misaligned_boundary_is_rejected():
    toks = [Token(16), Token(OPEN_ID, "open"), Token(17), Token(CLOSE_ID, "close", back_ptr=1)]
    with pytest.raises(SpanParseError, match="misaligned span boundary"):
        parse_spans(toks, 2)


def test_bad_back_pointer_is_rejected():
    toks = [Token(OPEN_ID, "open"), Token(16), Token(CLOSE_ID, "close", back_ptr=1), Token(17)]
    with pytest.raises(SpanParseError):
        parse_spans(toks, 2)


def test_vocab_rejects_out_of_range_literal():
    with pytest.raises(VocabError):
        MockVocab(1000).encode("t5000")
    assert MockVocab().decode(MockVocab().encode("t20 t21")) == "t20 t21"


def _leaf_ids(node):
    ids = []
    for _, n in node.walk():
        if n.op in (Op.S, Op.U, Op.A, Op.F):
            ids += VOCAB.encode(n.content)
    return ids


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bs=st.integers(1, 8), compress=st.booleans())
def test_serialization_properties(seed, bs, compress):
    q = random_tokenizable(np.random.default_rng(seed))
    raw = tokenize_query(q, VOCAB, bs, compress=compress)
    tq = align_blocks(raw)
    # content is preserved in order
    assert tq.content_ids() == _leaf_ids(q)
    # every structural token and output start begins a block
    assert all(i % bs == 0 for i, t in enumerate(tq.tokens) if t.kind in STRUCTURAL)
    assert all(s % bs == 0 for s in tq.output_starts)
    # the span table can be rebuilt from first-of-block tokens alone
    assert parse_spans(tq.tokens, bs, compressed=compress) == tq.spans
    # back pointers point at the region's open and nested regions close inside out
    opens: list[int] = []
    for i, t in enumerate(tq.tokens):
        if t.id == OPEN_ID and t.kind == "open":
            opens.append(i)
        elif t.kind == CLOSE:
            assert t.back_ptr == opens.pop()
    assert not opens
    # re-indexing: each aligned span maps to a raw span with the same content
    for a, r in zip(tq.spans, raw.spans):
        assert a.depth == r.depth
        inner_a = [t.id for t in tq.tokens[a.start + 1:a.end] if t.kind == "content"]
        inner_r = [t.id for t in raw.tokens[r.start + 1:r.end] if t.kind == "content"]
        assert inner_a == inner_r


def test_compressed_mode_reuses_open_id():
    q = _rag_bs2()
    tq = align_blocks(tokenize_query(q, VOCAB, 2, compress=True))
    ids = tq.ids
    assert SEP_ID not in ids and ids.count(OPEN_ID) == 2
    assert parse_spans(tq.tokens, 2, compressed=True) == tq.spans


def test_span_request_layout_matches_embedding():
    # the blocks of a standalone preparation are the blocks inside a larger prompt
    frag = span(G1(F("alpha beta gamma")))
    req = span_request(frag, VOCAB, 2)
    assert req.ids[0] == OPEN_ID and len(req.ids) % 2 == 0
    q = G(join(S("x y z"), plus(frag, span(G1(F("delta"))))), gen=GenParams())
    full = align_blocks(tokenize_query(q, VOCAB, 2))
    start = full.ids.index(OPEN_ID)
    got = block_hashes(full.ids, 2)[start // 2:start // 2 + len(req.ids) // 2]
    assert [h.digest for h in got] == [h.digest for h in block_hashes(req.ids, 2)]
