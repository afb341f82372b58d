"""Merge-based subword tokenizer trained on normalized functions."""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PUNCTUATION = "[]:+-,"
DEFAULT_VOCAB_SIZE = 30_000

_PUNCT_SPLIT = re.compile(r"[\[\]:+\-,]|[^\[\]:+\-,]+")


class TokenizerError(ValueError):
    pass


def pre_split(text: str, punctuation_split: bool = False) -> list[str]:
    words = text.split()
    if not punctuation_split:
        return words
    out = []
    for w in words:
        out.extend(_PUNCT_SPLIT.findall(w))
    return out


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    n_real: int


@dataclass
class TokenizerModel:
    vocab: list[str]
    merges: list[tuple[str, str]]
    punctuation_split: bool = False
    vocab_size_target: int = DEFAULT_VOCAB_SIZE
    _index: dict[str, int] = field(default_factory=dict, init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, init=False, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise TokenizerError("duplicate tokens in vocab")
        for s in SPECIALS:
            if s not in self._index:
                raise TokenizerError(f"missing special token {s}")
        for a, b in self.merges:
            if a + b not in self._index:
                raise TokenizerError(f"merge output {a + b!r} not in vocab")
        self._ranks = {m: i for i, m in enumerate(self.merges)}

    @property
    def specials(self) -> dict[str, int]:
        return {"pad": self._index[PAD], "unk": self._index[UNK],
                "cls": self._index[CLS], "sep": self._index[SEP]}

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    def __len__(self):
        return len(self.vocab)

    def token_id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def _merge_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = [c if c in self._index else UNK for c in word]
        ranks = self._ranks
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def tokenize(self, text: str) -> list[str]:
        tokens = []
        for w in pre_split(text, self.punctuation_split):
            tokens.extend(self._merge_word(w))
        return tokens

    def encode(self, text: str, max_len: int) -> TokenSequence:
        ids = self.encode_ids(text, max_len)
        n_real = int(np.count_nonzero(ids != self.pad_id))
        mask = np.zeros(max_len, dtype=np.int64)
        mask[:n_real] = 1
        return TokenSequence(ids, mask, n_real)

    def encode_ids(self, text: str, max_len: int) -> np.ndarray:
        if max_len < 2:
            raise TokenizerError("max_len must leave room for cls and sep")
        body = [self.token_id(t) for t in self.tokenize(text)][: max_len - 2]
        ids = np.full(max_len, self.pad_id, dtype=np.int64)
        ids[0] = self._index[CLS]
        ids[1:1 + len(body)] = body
        ids[1 + len(body)] = self._index[SEP]
        return ids

    def encode_batch(self, texts: Iterable[str], max_len: int) -> np.ndarray:
        texts = list(texts)
        out = np.empty((len(texts), max_len), dtype=np.int64)
        for i, t in enumerate(texts):
            out[i] = self.encode_ids(t, max_len)
        return out

    def decode(self, ids) -> list[str]:
        return [self.vocab[i] for i in ids]

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "vocab": self.vocab,
            "merges": [list(m) for m in self.merges],
            "specials": self.specials,
            "punctuation_split": self.punctuation_split,
            "vocab_size_target": self.vocab_size_target,
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_json().encode("ascii"))

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        doc = json.loads(Path(path).read_text(encoding="ascii"))
        model = cls(vocab=doc["vocab"], merges=doc["merges"],
                    punctuation_split=doc["punctuation_split"],
                    vocab_size_target=doc.get("vocab_size_target", len(doc["vocab"])))
        if model.specials != doc["specials"]:
            raise TokenizerError("special token ids do not match vocab")
        return model

    @classmethod
    def character_only(cls, corpus: Iterable[str], punctuation_split: bool = False) -> "TokenizerModel":
        chars = sorted({c for text in corpus for w in pre_split(text, punctuation_split) for c in w})
        vocab = list(SPECIALS) + chars
        return cls(vocab, [], punctuation_split, len(vocab))


def train_tokenizer(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE,
                    punctuation_split: bool = False) -> TokenizerModel:
    """Greedy pair-merge training.

    Pre-tokens start as single characters; the most frequent adjacent pair is
    merged until the vocabulary reaches ``vocab_size`` or no pair occurs at
    least twice. Equal counts go to the lexicographically smallest pair.
    """
    word_counts: Counter = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        word_counts.update(pre_split(text, punctuation_split))
    if n_texts == 0 or not word_counts:
        raise TokenizerError("cannot train a tokenizer on an empty corpus")

    chars = sorted({c for w in word_counts for c in w})
    minimum = len(chars) + len(SPECIALS) + 1
    if vocab_size < minimum:
        raise TokenizerError(f"vocab_size {vocab_size} too small; minimum is {minimum} "
                             f"({len(chars)} characters + {len(SPECIALS)} specials + 1)")

    vocab = list(SPECIALS) + chars
    known = set(vocab)
    merges: list[tuple[str, str]] = []

    words = sorted(word_counts)
    freqs = [word_counts[w] for w in words]
    symbols = [list(w) for w in words]
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, syms in enumerate(symbols):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[idx]
            where[pair].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    while len(vocab) < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg:
            continue  # stale entry
        if count < 2:
            break
        a, b = pair
        new = a + b
        merges.append(pair)
        if new not in known:
            vocab.append(new)
            known.add(new)
        touched = set()
        for idx in sorted(where.pop(pair, ())):
            syms = symbols[idx]
            f = freqs[idx]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched.add(p)
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    merged.append(new)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            symbols[idx] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += f
                where[p].add(idx)
                touched.add(p)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
                where.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p))

    return TokenizerModel(vocab, merges, punctuation_split, vocab_size)


def fragmentation_rate(model: TokenizerModel, corpus: Iterable[str]) -> float:
    """Mean number of tokens per whitespace-delimited word (specials excluded)."""
    n_words = n_tokens = 0
    for text in corpus:
        for w in text.split():
            n_words += 1
            n_tokens += len(model.tokenize(w))
    if n_words == 0:
        raise TokenizerError("empty corpus")
    return n_tokens / n_words
