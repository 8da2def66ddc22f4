"""Serialize optimized span queries into block-aligned token sequences.

Each commutative join becomes a parenthesized region::

    (  child_1  )(  child_2  )(  ...  child_n  )p

where ``p`` (the close token's back pointer) is the index of the region's
opening token. After :func:`align_blocks` every structural token starts a
block, so a cache can find span boundaries by looking only at the first token
of each block.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from .query import GenParams, Node, Op, Path, ROLES, as_node

log = logging.getLogger(__name__)

PAD_ID, OPEN_ID, SEP_ID, CLOSE_ID = 0, 1, 2, 3
FIRST_CONTENT_ID = 16
SPECIAL_IDS = frozenset({OPEN_ID, SEP_ID, CLOSE_ID})

CONTENT, PAD, OPEN, SEP, CLOSE = "content", "pad", "open", "sep", "close"
STRUCTURAL = frozenset({OPEN, SEP, CLOSE})


class TokenizeError(ValueError):
    pass


class VocabError(TokenizeError):
    pass


class SpanParseError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    id: int
    kind: str = CONTENT
    role: str = "none"
    back_ptr: Optional[int] = None


PAD_TOKEN = Token(PAD_ID, PAD)


@dataclass(frozen=True)
class SpanEntry:
    """One child region of a commutative join, inclusive of both boundary tokens."""

    start: int
    end: int
    depth: int
    path: Optional[Path] = field(default=None, compare=False)


@dataclass(frozen=True)
class TokenizedQuery:
    tokens: tuple[Token, ...]
    block_size: int
    spans: tuple[SpanEntry, ...] = ()
    generate_tail: Optional[GenParams] = None
    # Indices where an inner generate's output begins (or will be appended);
    # alignment pads these to block boundaries too.
    output_starts: tuple[int, ...] = ()
    compressed: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.tokens]

    def content_ids(self) -> list[int]:
        return [t.id for t in self.tokens if t.kind == CONTENT]


class MockVocab:
    """Deterministic whitespace-word vocabulary.

    Words of the form ``t<N>`` map to id N (this is how generated tokens are
    written back as text); any other word hashes into the content id range.
    Ids below ``FIRST_CONTENT_ID`` are reserved for pad and span tokens.
    """

    _LITERAL = re.compile(r"t(\d+)\Z")

    def __init__(self, size: int = 1 << 20):
        if size <= FIRST_CONTENT_ID:
            raise VocabError("vocab too small")
        self.size = size
        self._word = lru_cache(maxsize=1 << 18)(self._word_id)
        self._tokens = lru_cache(maxsize=1 << 12)(self._text_tokens)

    def __reduce__(self):
        # the memo tables are per process; worker processes rebuild them
        return (MockVocab, (self.size,))

    def __eq__(self, other) -> bool:
        return isinstance(other, MockVocab) and other.size == self.size

    def __hash__(self) -> int:
        return hash(("MockVocab", self.size))

    def _word_id(self, word: str) -> int:
        m = self._LITERAL.match(word)
        if m:
            n = int(m.group(1))
            if not FIRST_CONTENT_ID <= n < self.size:
                raise VocabError(f"token id {n} outside content range of vocab size {self.size}")
            return n
        h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")
        return FIRST_CONTENT_ID + h % (self.size - FIRST_CONTENT_ID)

    def encode(self, text: str) -> list[int]:
        return [self._word(w) for w in text.split()]

    def _text_tokens(self, text: str, role: str) -> tuple[Token, ...]:
        return tuple(Token(i, CONTENT, role) for i in self.encode(text))

    def tokens(self, text: str, role: str) -> tuple[Token, ...]:
        """Content tokens for ``text``; memoized since fragments recur across requests."""
        return self._tokens(text, role)

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if not FIRST_CONTENT_ID <= i < self.size:
                raise VocabError(f"cannot decode id {i}")
            out.append(f"t{i}")
        return " ".join(out)


# -- serialization ------------------------------------------------------------

class _Serializer:
    def __init__(self, vocab: MockVocab, compress: bool):
        self.vocab = vocab
        self.compress = compress
        self.tokens: list[Token] = []
        self.spans: list[SpanEntry] = []
        self.output_starts: list[int] = []
        self.depth = 0

    def emit(self, tok: Token) -> int:
        self.tokens.append(tok)
        return len(self.tokens) - 1

    def text(self, text: str, role: str) -> None:
        self.tokens.extend(self.vocab.tokens(text, role))

    def node(self, node: Node, path: Path) -> None:
        op = node.op
        if op in ROLES:
            self.text(node.content, ROLES[op])
        elif op is Op.JOIN:
            for i, c in enumerate(node.children):
                self.node(c, path + (i,))
        elif op is Op.PLUS:
            self.plus(node, path)
        elif op is Op.SPAN:
            self.span_body(node.children[0], path + (0,))
        elif op in (Op.G, Op.G1):
            raise TokenizeError(
                f"generate at {'/'.join(map(str, path))} is outside a span; "
                "run optimize first (or execute it)"
            )
        else:
            raise TokenizeError(f"{op} must be desugared before tokenization (run optimize first)")

    def span_body(self, gen: Node, path: Path) -> None:
        """A span-marked generate: its input, then room for its output."""
        for i, c in enumerate(gen.children):
            self.node(c, path + (i,))
        if gen.op is Op.G1:
            return
        if gen.output is None:
            self.output_starts.append(len(self.tokens))
        elif gen.output:
            self.output_starts.append(len(self.tokens))
            self.text(gen.output, "assistant")

    def plus(self, node: Node, path: Path) -> None:
        region = self.emit(Token(OPEN_ID, OPEN))
        self.depth += 1
        boundary = region
        for i, child in enumerate(node.children):
            if i:
                sep_id = OPEN_ID if self.compress else SEP_ID
                nxt = self.emit(Token(sep_id, SEP))
                self.spans.append(SpanEntry(boundary, nxt, self.depth, path + (i - 1,)))
                boundary = nxt
            self.node(child, path + (i,))
        self.depth -= 1
        close = self.emit(Token(CLOSE_ID, CLOSE, back_ptr=region))
        self.spans.append(
            SpanEntry(boundary, close, self.depth + 1, path + (len(node.children) - 1,))
        )


def tokenize_query(
    query, vocab: MockVocab, block_size: int = 16, *, compress: bool = False
) -> TokenizedQuery:
    """Depth-first serialization; the root generate becomes the generate tail.

    The result is not yet block-aligned; see :func:`align_blocks`.
    """
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    root = as_node(query)
    ser = _Serializer(vocab, compress)
    tail = None
    if root.op in (Op.G, Op.G1):
        tail = root.gen
        for i, c in enumerate(root.children):
            ser.node(c, (i,))
    else:
        ser.node(root, ())
    spans = tuple(sorted(ser.spans, key=lambda s: (s.start, s.end)))
    return TokenizedQuery(
        tuple(ser.tokens), block_size, spans, tail, tuple(ser.output_starts), compress
    )


def span_request(node: Node, vocab: MockVocab, block_size: int) -> TokenizedQuery:
    """The standalone request that computes a span-marked generate (or fragment).

    Layout is ``( input`` padded out to a block boundary, exactly as the span
    appears inside a larger serialization, so the blocks cached here are the
    blocks a later request looks up.
    """
    gen = node.children[0] if node.op is Op.SPAN else node
    ser = _Serializer(vocab, compress=False)
    ser.emit(Token(OPEN_ID, OPEN))
    ser.depth = 1
    for i, c in enumerate(gen.children):
        ser.node(c, (i,))
    tq = TokenizedQuery(tuple(ser.tokens), block_size, (), gen.gen)
    tq = align_blocks(tq)
    return pad_to_block(tq)


def pad_to_block(tq: TokenizedQuery) -> TokenizedQuery:
    short = -len(tq.tokens) % tq.block_size
    if not short:
        return tq
    return replace(tq, tokens=tq.tokens + (PAD_TOKEN,) * short)


def align_blocks(tq: TokenizedQuery) -> TokenizedQuery:
    """Insert pad tokens so every structural token (and every inner-generate
    output) starts a block. Back pointers and the span table are re-indexed."""
    bs = tq.block_size
    starts = set(tq.output_starts)
    src = tq.tokens
    out: list[Token] = []
    remap = [0] * len(src)
    breaks = sorted({i for i, t in enumerate(src) if t.kind in STRUCTURAL} | {
        s for s in starts if s < len(src)})
    prev = 0
    for i in [*breaks, len(src)]:
        # copy the run before the break unchanged, then pad up to a boundary
        base = len(out) - prev
        out.extend(src[prev:i])
        remap[prev:i] = range(base + prev, base + i)
        if i == len(src):
            break
        out.extend([PAD_TOKEN] * (-len(out) % bs))
        prev = i
    end = len(out)
    for s in sorted(starts):
        # an output start at the very end marks where generation will append
        if s >= len(tq.tokens):
            out.extend([PAD_TOKEN] * (-len(out) % bs))
            end = len(out)

    def at(i: int) -> int:
        return remap[i] if i < len(remap) else end

    tokens = tuple(
        replace(t, back_ptr=at(t.back_ptr)) if t.back_ptr is not None else t for t in out
    )
    spans = tuple(replace(s, start=at(s.start), end=at(s.end)) for s in tq.spans)
    return replace(
        tq, tokens=tokens, spans=spans, output_starts=tuple(at(s) for s in tq.output_starts)
    )


def crop_trailing_partial(tokens: Sequence, block_size: int, offset: int = 0) -> list:
    """Drop generated tokens that would land in a trailing partial block.

    ``offset`` is how far into a block the output starts (0 when aligned).
    """
    keep = (offset + len(tokens)) // block_size * block_size - offset
    keep = max(0, keep)
    if keep == 0 and tokens:
        log.warning("generated span of %d tokens cropped to empty (block size %d)",
                    len(tokens), block_size)
    return list(tokens[:keep])


def parse_spans(
    tokens: Sequence[Token], block_size: int, *, compressed: bool = False
) -> tuple[SpanEntry, ...]:
    """Rebuild the span table by looking only at the first token of each block.

    Works on token ids and back pointers alone (the ``kind`` field is not
    consulted), which is all a cache sees.
    """
    for i, tok in enumerate(tokens):
        if tok.id in SPECIAL_IDS and i % block_size:
            raise SpanParseError(f"misaligned span boundary at index {i}")
    if compressed:
        return _parse_compressed(tokens, block_size)
    spans: list[SpanEntry] = []
    stack: list[int] = []  # boundary index of the currently open child region
    for i in range(0, len(tokens), block_size):
        tid = tokens[i].id
        if tid == OPEN_ID:
            stack.append(i)
        elif tid == SEP_ID:
            if not stack:
                raise SpanParseError(f"separator without open region at index {i}")
            spans.append(SpanEntry(stack[-1], i, len(stack)))
            stack[-1] = i
        elif tid == CLOSE_ID:
            if not stack:
                raise SpanParseError(f"unbalanced close at index {i}")
            ptr = tokens[i].back_ptr
            spans.append(SpanEntry(stack.pop(), i, len(stack) + 1))
            if ptr is None or ptr >= i or tokens[ptr].id != OPEN_ID:
                raise SpanParseError(f"close at {i} has a bad back pointer {ptr}")
    if stack:
        raise SpanParseError(f"unclosed span opened at index {stack[-1]}")
    return tuple(sorted(spans, key=lambda s: (s.start, s.end)))


def _parse_compressed(tokens: Sequence[Token], block_size: int) -> tuple[SpanEntry, ...]:
    # With one shared open/separator id, a close's back pointer delimits its
    # region; open tokens inside it not claimed by an inner region are separators.
    pending: list[int] = []
    spans: list[SpanEntry] = []
    closes: list[tuple[int, list[int]]] = []
    for i in range(0, len(tokens), block_size):
        tid = tokens[i].id
        if tid == OPEN_ID:
            pending.append(i)
        elif tid == CLOSE_ID:
            ptr = tokens[i].back_ptr
            if ptr is None or ptr not in pending:
                raise SpanParseError(f"close at {i} has a bad back pointer {ptr}")
            k = pending.index(ptr)
            bounds = pending[k:] + [i]
            del pending[k:]
            closes.append((i, bounds))
    if pending:
        raise SpanParseError(f"unclosed span opened at index {pending[-1]}")
    # depth = number of enclosing regions
    regions = [(b[0], c) for c, b in closes]
    for _, bounds in closes:
        for a, b in zip(bounds, bounds[1:]):
            depth = sum(1 for s, e in regions if s <= a and b <= e)
            spans.append(SpanEntry(a, b, depth))
    return tuple(sorted(spans, key=lambda s: (s.start, s.end)))


# -- golden listing -------------------------------------------------------------

def format_listing(tq: TokenizedQuery) -> str:
    """One token per line: ``index kind id [back_ptr]``."""
    lines = []
    for i, t in enumerate(tq.tokens):
        line = f"{i} {t.kind} {t.id}"
        if t.back_ptr is not None:
            line += f" {t.back_ptr}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_listing(text: str) -> list[Token]:
    tokens = []
    for n, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if int(parts[0]) != len(tokens):
            raise ValueError(f"listing line {n + 1}: index out of sequence")
        back = int(parts[3]) if len(parts) > 3 else None
        tokens.append(Token(int(parts[2]), parts[1], back_ptr=back))
    return tokens


def strip_structure(tq: TokenizedQuery) -> list[int]:
    return tq.content_ids()
