"""Deterministic stand-ins for the model server and the retrieval index."""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ..optimizer import RetrievalError
from ..query import GenParams, RetrievalSpec
from ..tokenizer import FIRST_CONTENT_ID, MockVocab


def _content(ids: Iterable[int]) -> list[int]:
    return [i for i in ids if i >= FIRST_CONTENT_ID]


def mock_generate(
    input_ids: Sequence[int],
    gen: GenParams,
    vocab: MockVocab,
    block_size: int = 16,
) -> list[int]:
    """Tokens drawn from a digest stream of the input.

    Only content ids feed the digest, so padding and span markers do not
    change what the model "says". At temperature 0 the seed is ignored. An
    unset ``max_tokens`` draws a length in ``[block_size, 8 * block_size]``.
    """
    if gen.max_tokens is not None and gen.max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    ids = _content(input_ids)
    m = hashlib.blake2b(digest_size=16)
    m.update(struct.pack(f"<{len(ids)}q", *ids))
    if gen.temperature > 0:
        m.update(struct.pack("<dq", gen.temperature, gen.seed))
    rng = np.random.default_rng(int.from_bytes(m.digest(), "little"))
    n = gen.max_tokens
    if n is None:
        n = int(rng.integers(block_size, 8 * block_size + 1))
    return rng.integers(FIRST_CONTENT_ID, vocab.size, size=n).tolist()


@dataclass(frozen=True)
class MockModel:
    vocab: MockVocab = field(default_factory=MockVocab)

    def generate(self, input_ids: Sequence[int], gen: GenParams, block_size: int = 16) -> list[int]:
        return mock_generate(input_ids, gen, self.vocab, block_size)


# -- corpus and retrieval ----------------------------------------------------------

_WORD = re.compile(r"\S+")


@dataclass(frozen=True)
class Corpus:
    name: str
    fragments: tuple[str, ...]

    @classmethod
    def from_documents(cls, name: str, docs: Iterable[str], words_per_fragment: int = 100) -> Corpus:
        """Cut each document into contiguous runs of ``words_per_fragment`` words."""
        if words_per_fragment < 1:
            raise ValueError("words_per_fragment must be >= 1")
        frags = []
        for doc in docs:
            words = _WORD.findall(doc)
            for i in range(0, len(words), words_per_fragment):
                frags.append(" ".join(words[i : i + words_per_fragment]))
        return cls(name, tuple(frags))

    @classmethod
    def synthetic(cls, name: str, n_fragments: int, words: int = 100, vocab_words: int = 5000,
                  seed: int = 0) -> Corpus:
        rng = np.random.default_rng(seed)
        frags = tuple(
            " ".join(f"w{x}" for x in rng.integers(0, vocab_words, size=words))
            for _ in range(n_fragments)
        )
        return cls(name, frags)


@dataclass
class LexicalRetriever:
    """Top-k fragments by count of shared distinct words; ties go to the lower fragment id."""

    corpora: dict[str, Corpus] = field(default_factory=dict)

    def add(self, corpus: Corpus) -> None:
        self.corpora[corpus.name] = corpus

    def ranked(self, spec: RetrievalSpec) -> list[int]:
        corpus = self.corpora.get(spec.corpus)
        if corpus is None:
            raise RetrievalError(spec, "unknown corpus")
        q = set(_WORD.findall(spec.query))
        scores = [len(q & set(_WORD.findall(f))) for f in corpus.fragments]
        return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[: spec.k]

    def retrieve(self, spec: RetrievalSpec) -> list[str]:
        frags = self.corpora[spec.corpus].fragments if spec.corpus in self.corpora else ()
        return [frags[i] for i in self.ranked(spec)]
