"""Tokenization, byte-pair encoding, joint vocabulary and length-bucketed batching."""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MARKER = "@@"

PAD, BOS, EOS, ANNOT_OPEN, ANNOT_SEP, ANNOT_CLOSE, UNK = range(7)
RESERVED = ("<pad>", "<s>", "</s>", "<ann>", "<sep>", "</ann>", "<unk>")
MARKER_IDS = frozenset((ANNOT_OPEN, ANNOT_SEP, ANNOT_CLOSE))

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split on whitespace and detach punctuation.

    >>> tokenize("Hello, world")
    ['Hello', ',', 'world']
    """
    return _TOKEN_RE.findall(text)


@dataclass
class BpeCodes:
    merges: list[tuple[str, str]]
    n_ops: int

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate merge in BPE codes")
        if len(self.merges) > self.n_ops:
            raise ValueError(f"{len(self.merges)} merges exceed n_ops={self.n_ops}")

    def save(self, path):
        lines = [f"bpe-codes v1 {self.n_ops}"]
        lines += [f"{a}\t{b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeCodes":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty BPE codes file")
        head = lines[0].split()
        if len(head) != 3 or head[:2] != ["bpe-codes", "v1"]:
            raise ValueError(f"{path}:1: bad header {lines[0]!r}")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise ValueError(f"{path}:{lineno}: expected 'left<TAB>right'")
            merges.append((parts[0], parts[1]))
        return cls(merges, int(head[2]))

    def symbols(self) -> set[str]:
        """Every piece a word can be segmented into, apart from raw characters."""
        return {a + b for a, b in self.merges}


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[str], n_ops: int, min_frequency: int = 2) -> BpeCodes:
    """Learn merge operations from a stream of word tokens.

    Pairs are counted inside words only. The most frequent pair is merged at
    each step; ties go to the lexicographically smallest pair. Learning stops
    early when no pair reaches ``min_frequency``.
    """
    if n_ops < 0:
        raise ValueError("n_ops must be >= 0")
    word_counts = Counter(corpus)
    if not word_counts:
        raise ValueError("cannot learn BPE from an empty corpus")
    words = {tuple(w): c for w, c in word_counts.items()}
    merges: list[tuple[str, str]] = []
    while len(merges) < n_ops:
        counts = _pair_counts(words)
        if not counts:
            break
        best = min(counts, key=lambda p: (-counts[p], p))
        if counts[best] < min_frequency:
            break
        merges.append(best)
        merged: dict[tuple[str, ...], int] = defaultdict(int)
        for symbols, freq in words.items():
            merged[_merge_word(symbols, best)] += freq
        words = merged
    return BpeCodes(merges, n_ops)


def segment_word(word: str, codes: BpeCodes) -> list[str]:
    """Split one word into subword pieces (no continuation markers)."""
    symbols = tuple(word)
    ranks = codes.ranks
    while len(symbols) > 1:
        candidates = [ranks[p] for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        symbols = _merge_word(symbols, codes.merges[min(candidates)])
    return list(symbols)


def apply_bpe(
    tokens: Sequence[str],
    codes: BpeCodes,
    marker: str = DEFAULT_MARKER,
    protected: Iterable[str] = (),
) -> list[str]:
    """Segment words; every non-final piece of a word carries ``marker``."""
    protected = set(protected)
    out: list[str] = []
    for tok in tokens:
        if tok in protected:
            out.append(tok)
            continue
        pieces = segment_word(tok, codes)
        out.extend(p + marker for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def join_bpe(pieces: Sequence[str], marker: str = DEFAULT_MARKER) -> list[str]:
    """Inverse of :func:`apply_bpe`."""
    words: list[str] = []
    buf = ""
    for piece in pieces:
        if piece.endswith(marker) and len(piece) > len(marker):
            buf += piece[: -len(marker)]
        else:
            words.append(buf + piece)
            buf = ""
    if buf:
        words.append(buf)
    return words


@dataclass
class Vocabulary:
    tokens: list[str]
    freq: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("reserved symbols must occupy the first ids")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens are not unique")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, pieces: Iterable[str]) -> list[int]:
        return [self.index.get(p, UNK) for p in pieces]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def count(self, token: str) -> int:
        i = self.index.get(token)
        return 0 if i is None else self.freq[i]

    def save(self, path):
        lines = [f"{i}\t{t}\t{f}" for i, (t, f) in enumerate(zip(self.tokens, self.freq))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freq = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 3 or int(parts[0]) != lineno - 1:
                raise ValueError(f"{path}:{lineno}: expected 'id<TAB>token<TAB>frequency'")
            tokens.append(parts[1])
            freq.append(int(parts[2]))
        return cls(tokens, freq)


def build_vocab(
    corpora: Iterable[Iterable[Sequence[str]]],
    codes: BpeCodes | None = None,
    marker: str = DEFAULT_MARKER,
) -> Vocabulary:
    """Joint vocabulary over every sentence of every corpus.

    Ids follow the reserved symbols in order of descending frequency, ties
    broken lexicographically. Passing ``codes`` also adds every piece the
    codes can produce (marked and unmarked, zero count if unseen), so that
    held-out words never segment into unknown pieces.
    """
    counts: Counter = Counter()
    for corpus in corpora:
        for sentence in corpus:
            counts.update(sentence)
    for tok in RESERVED:
        counts.pop(tok, None)
    if codes is not None:
        alphabet = {ch for tok in counts for ch in tok.removesuffix(marker)}
        for sym in codes.symbols() | alphabet:
            counts.setdefault(sym, 0)
            counts.setdefault(sym + marker, 0)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(
        list(RESERVED) + [t for t, _ in ordered],
        [0] * len(RESERVED) + [c for _, c in ordered],
    )


@dataclass
class ParallelBatch:
    """Sentence pairs sharing one source length."""

    indices: list[int]
    src: np.ndarray
    tgt: list[list[int]]

    def __len__(self):
        return len(self.indices)


def make_batches(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_size: int, seed: int
) -> list[ParallelBatch]:
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    groups: dict[int, list[int]] = defaultdict(list)
    for i, (src, _) in enumerate(pairs):
        groups[len(src)].append(i)
    chunks = []
    for length in sorted(groups):
        members = groups[length]
        for start in range(0, len(members), max_size):
            chunks.append(members[start : start + max_size])
    order = np.random.default_rng(seed).permutation(len(chunks))
    batches = []
    for k in order:
        idx = chunks[k]
        src = np.array([pairs[i][0] for i in idx], dtype=np.int64).reshape(len(idx), -1)
        batches.append(ParallelBatch(list(idx), src, [list(pairs[i][1]) for i in idx]))
    return batches


def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def read_parallel(src_path, tgt_path) -> tuple[list[list[str]], list[list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return [tokenize(s) for s in src], [tokenize(t) for t in tgt]


def ids_to_words(ids: Iterable[int], vocab: Vocabulary, marker: str = DEFAULT_MARKER) -> list[str]:
    """Decoder output ids to words: specials and annotation markers dropped, BPE joined."""
    pieces = [vocab.tokens[i] for i in ids if i >= len(RESERVED) or i == UNK]
    return join_bpe(pieces, marker)
