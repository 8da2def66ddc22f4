"""Block-granular prefix cache with chained hashing and span-aware suspension.

Outside spans every block digest chains on the previous one, as in a stock
prefix cache. A block that starts with an open or separator token restarts
the chain from a fixed seed, so the digests inside a span depend only on the
span's own tokens. When the closing token arrives the outer chain resumes,
folded with an order-insensitive combination of the sibling spans' digests;
permuting commuting siblings therefore leaves every later digest unchanged.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

from .tokenizer import CLOSE_ID, OPEN_ID, SEP_ID, SPECIAL_IDS

DIGEST_BYTES = 16
SEED = b"\x00" * DIGEST_BYTES


class UnbalancedSpans(ValueError):
    pass


class BlockHash(NamedTuple):
    digest: bytes
    context_free: bool = False


def _h(parent: bytes, ids: Sequence[int], tag: bytes = b"B") -> bytes:
    m = hashlib.blake2b(digest_size=DIGEST_BYTES)
    m.update(tag)
    m.update(parent)
    m.update(struct.pack(f"<{len(ids)}q", *ids))
    return m.digest()


def _combine(digests: Sequence[bytes]) -> bytes:
    m = hashlib.blake2b(digest_size=DIGEST_BYTES)
    m.update(b"PLUS")
    for d in sorted(digests):
        m.update(d)
    return m.digest()


def _ids(tokens) -> list[int]:
    if tokens and not isinstance(tokens[0], int):
        return [t.id for t in tokens]
    return list(tokens)


def block_hashes(tokens, block_size: int, *, span_aware: bool = True) -> list[BlockHash]:
    """Digests for every full block of ``tokens`` (ids or Token objects).

    A trailing partial block gets no digest; it can never be cached. A span
    left open at the end is allowed (that is what a fragment-preparation
    request looks like); a close or separator without an open is an error.
    """
    ids = _ids(tokens)
    out: list[BlockHash] = []
    acc = SEED
    # (outer accumulator, digests of finished siblings) per open region
    stack: list[tuple[bytes, list[bytes]]] = []
    n_full = len(ids) // block_size
    for b in range(n_full):
        block = ids[b * block_size : (b + 1) * block_size]
        if span_aware:
            if any(t in SPECIAL_IDS for t in block[1:]):
                raise UnbalancedSpans(f"span token inside block {b}; align blocks first")
            first = block[0]
            if first == OPEN_ID:
                stack.append((acc, []))
                acc = SEED
            elif first == SEP_ID:
                if not stack:
                    raise UnbalancedSpans(f"separator without open span at block {b}")
                stack[-1][1].append(acc)
                acc = SEED
            elif first == CLOSE_ID:
                if not stack:
                    raise UnbalancedSpans(f"close without open span at block {b}")
                outer, siblings = stack.pop()
                siblings.append(acc)
                acc = _h(outer, (), b"R" + _combine(siblings))
            if first in (OPEN_ID, SEP_ID):
                # open and separator start a sibling identically, so a span's
                # digest does not depend on whether it came first
                block = [OPEN_ID] + block[1:]
        acc = _h(acc, block)
        out.append(BlockHash(acc, bool(stack)))
    return out


# -- cache state ----------------------------------------------------------------

@dataclass
class CacheStats:
    lookups: int = 0
    hit_blocks: int = 0
    miss_blocks: int = 0
    hit_tokens: int = 0
    input_tokens: int = 0
    evictions: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hit_tokens / self.input_tokens if self.input_tokens else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "hit_rate": self.hit_rate}


@dataclass
class CacheEntry:
    physical_id: int
    position: int  # sequence position of the block's first token when cached
    last_use: int


class LookupResult(NamedTuple):
    hit_blocks: int
    physical_ids: list[int]
    cached_positions: list[int]

    def hit_tokens(self, block_size: int, n_tokens: int) -> int:
        return min(self.hit_blocks * block_size, n_tokens)


@dataclass
class CacheState:
    """LRU pool of full blocks keyed by digest.

    ``entries`` is kept in LRU order (oldest first). Not thread-safe: one owner
    serializes lookups and inserts.
    """

    capacity: int
    block_size: int = 16
    entries: OrderedDict[bytes, CacheEntry] = field(default_factory=OrderedDict)
    stats: CacheStats = field(default_factory=CacheStats)
    tick: int = 0
    next_id: int = 0
    free_ids: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, digest) -> bool:
        if isinstance(digest, BlockHash):
            digest = digest.digest
        return digest in self.entries

    def _touch(self, digest: bytes) -> CacheEntry:
        self.tick += 1
        entry = self.entries[digest]
        entry.last_use = self.tick
        self.entries.move_to_end(digest)
        return entry

    def lookup(self, hashes: Sequence[BlockHash], n_tokens: int | None = None) -> LookupResult:
        """Longest cached prefix of ``hashes``; scanning stops at the first miss."""
        if n_tokens is None:
            n_tokens = len(hashes) * self.block_size
        ids: list[int] = []
        positions: list[int] = []
        for h in hashes:
            if h.digest not in self.entries:
                break
            entry = self._touch(h.digest)
            ids.append(entry.physical_id)
            positions.append(entry.position)
        hit = len(ids)
        self.stats.lookups += 1
        self.stats.hit_blocks += hit
        self.stats.miss_blocks += len(hashes) - hit
        self.stats.hit_tokens += min(hit * self.block_size, n_tokens)
        self.stats.input_tokens += n_tokens
        return LookupResult(hit, ids, positions)

    def insert(self, tokens, hashes: Sequence[BlockHash], start_pos: int = 0) -> int:
        """Insert every full block; the trailing partial block is skipped.

        Blocks already present are refreshed (LRU and position). Returns the
        number of newly stored blocks.
        """
        n_full = min(len(tokens) // self.block_size, len(hashes))
        inserted = 0
        for b in range(n_full):
            digest = hashes[b].digest
            pos = start_pos + b * self.block_size
            if digest in self.entries:
                self._touch(digest).position = pos
                continue
            while len(self.entries) >= self.capacity:
                self._evict()
            self.tick += 1
            self.entries[digest] = CacheEntry(self._alloc(), pos, self.tick)
            inserted += 1
        return inserted

    def _alloc(self) -> int:
        if self.free_ids:
            return self.free_ids.pop()
        self.next_id += 1
        return self.next_id - 1

    def _evict(self) -> bytes:
        digest, entry = self.entries.popitem(last=False)
        self.free_ids.append(entry.physical_id)
        self.stats.evictions += 1
        return digest

    def contents(self) -> list[bytes]:
        return list(self.entries)

    def stats_json(self, **kw) -> str:
        data = {"capacity": self.capacity, "block_size": self.block_size,
                "blocks": len(self.entries), **self.stats.to_dict()}
        return json.dumps(data, **kw)


# -- snapshots -------------------------------------------------------------------

MAGIC = b"SPQC"
VERSION = 1
_HEADER = struct.Struct("<4sHIIQQQI" + "Q" * 6 + "I")
_ENTRY = struct.Struct(f"<{DIGEST_BYTES}sIQQ")


class SnapshotError(ValueError):
    pass


class SnapshotVersionError(SnapshotError):
    pass


class SnapshotCorrupt(SnapshotError):
    pass


def snapshot(state: CacheState) -> bytes:
    """Serialize to a versioned, CRC-checked binary blob.

    Layout: fixed header (magic, version, geometry, counters, stats, free-id
    count, CRC32 of everything else) followed by free ids and then entries in
    LRU order. An empty cache is just the header.
    """
    s = state.stats
    body = b"".join(struct.pack("<I", i) for i in state.free_ids)
    body += b"".join(
        _ENTRY.pack(d, e.physical_id, e.position, e.last_use) for d, e in state.entries.items()
    )
    fields = (MAGIC, VERSION, state.block_size, state.capacity, state.tick, state.next_id,
              len(state.entries), len(state.free_ids), s.lookups, s.hit_blocks, s.miss_blocks,
              s.hit_tokens, s.input_tokens, s.evictions)
    crc = zlib.crc32(_HEADER.pack(*fields, 0) + body)
    return _HEADER.pack(*fields, crc) + body


def restore(blob: bytes) -> CacheState:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise SnapshotCorrupt("not a cache snapshot")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise SnapshotVersionError(f"snapshot version {version}, expected {VERSION}")
    if len(blob) < _HEADER.size:
        raise SnapshotCorrupt("checksum mismatch: truncated header")
    (_, _, bs, cap, tick, next_id, n_entries, n_free, *stats, crc) = _HEADER.unpack_from(blob)
    body = blob[_HEADER.size :]
    fields = (MAGIC, version, bs, cap, tick, next_id, n_entries, n_free, *stats)
    if zlib.crc32(_HEADER.pack(*fields, 0) + body) != crc:
        raise SnapshotCorrupt("checksum mismatch")
    if len(body) != 4 * n_free + _ENTRY.size * n_entries:
        raise SnapshotCorrupt("payload length does not match header")
    free = list(struct.unpack_from(f"<{n_free}I", body, 0))
    entries: OrderedDict[bytes, CacheEntry] = OrderedDict()
    for off in range(4 * n_free, len(body), _ENTRY.size):
        d, pid, pos, last = _ENTRY.unpack_from(body, off)
        entries[d] = CacheEntry(pid, pos, last)
    return CacheState(cap, bs, entries, CacheStats(*stats), tick, next_id, free)
