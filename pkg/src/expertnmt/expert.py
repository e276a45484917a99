"""Phrase-table expert: rare-word detection and inline source annotation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

from .corpus import (
    ANNOT_CLOSE,
    ANNOT_OPEN,
    ANNOT_SEP,
    DEFAULT_MARKER,
    BpeCodes,
    Vocabulary,
    apply_bpe,
)

# Surfaces used in annotated text files. OPEN and CLOSE share a surface, so
# text is parsed with a small state machine; the vocabulary keeps them apart.
OPEN_SURFACE = "#"
SEP_SURFACE = "##"
CLOSE_SURFACE = "#"

DEFAULT_THRESHOLD = 5


class PhraseTableError(ValueError):
    pass


class Candidate(NamedTuple):
    target: str
    scores: tuple[float, float, float, float]

    @property
    def mean(self) -> float:
        return sum(self.scores) / len(self.scores)


class PhraseTable(dict):
    """Maps a space-joined source phrase to its candidate translations."""

    def add(self, source: str, target: str, scores: Sequence[float]):
        if len(scores) != 4:
            raise PhraseTableError(f"expected 4 scores, got {len(scores)}")
        if not all(math.isfinite(s) and s >= 0 for s in scores):
            raise PhraseTableError(f"scores must be finite and non-negative: {scores}")
        cand = Candidate(target, tuple(float(s) for s in scores))
        entries = self.setdefault(source, [])
        for i, old in enumerate(entries):
            if old.target == target:
                if cand.mean > old.mean:
                    entries[i] = cand
                return
        entries.append(cand)

    def save(self, path):
        lines = []
        for src in sorted(self):
            for cand in self[src]:
                scores = " ".join(repr(s) for s in cand.scores)
                lines.append(f"{src} ||| {cand.target} ||| {scores}")
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_phrase_table(path) -> PhraseTable:
    """Parse ``src ||| tgt ||| s1 s2 s3 s4`` lines.

    Fields after the scores (alignments, counts in Moses tables) are ignored.
    """
    table = PhraseTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = [f.strip() for f in line.split("|||")]
            if len(fields) < 3 or not fields[0] or not fields[1]:
                raise PhraseTableError(f"{path}:{lineno}: malformed phrase-table line {line!r}")
            try:
                scores = [float(s) for s in fields[2].split()]
            except ValueError:
                raise PhraseTableError(f"{path}:{lineno}: non-numeric score in {fields[2]!r}") from None
            try:
                table.add(" ".join(fields[0].split()), " ".join(fields[1].split()), scores)
            except PhraseTableError as exc:
                raise PhraseTableError(f"{path}:{lineno}: {exc}") from None
    return table


def best_translation(table: Mapping[str, list[Candidate]], phrase: str) -> str | None:
    """Candidate with the highest mean score; ties go to the smaller target."""
    candidates = table.get(phrase)
    if not candidates:
        return None
    return min(candidates, key=lambda c: (-c.mean, c.target)).target


def find_rare_spans(
    sentence: Sequence[str],
    freq: Mapping[str, int],
    threshold: int = DEFAULT_THRESHOLD,
    table: Mapping[str, list[Candidate]] | None = None,
) -> list[tuple[int, int]]:
    """Half-open spans around words seen fewer than ``threshold`` times.

    Scanning left to right, each rare word not already covered is grown to
    the longest phrase-table entry containing it (leftmost on ties) that
    does not overlap an earlier span.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    n = len(sentence)
    max_len = max((len(k.split()) for k in table), default=0) if table else 0
    spans: list[tuple[int, int]] = []
    last_end = 0
    i = 0
    while i < n:
        if freq.get(sentence[i], 0) >= threshold:
            i += 1
            continue
        best = (i, i + 1)
        for length in range(max_len, 1, -1):
            hit = None
            for b in range(max(last_end, i - length + 1), i + 1):
                e = b + length
                if e <= n and " ".join(sentence[b:e]) in table:
                    hit = (b, e)
                    break
            if hit:
                best = hit
                break
        spans.append(best)
        last_end = i = best[1]
    return spans


@dataclass(frozen=True)
class AnnotationRecord:
    begin: int
    end: int
    suggestion: tuple[str, ...]
    suggestion_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.begin < self.end:
            raise ValueError(f"empty span [{self.begin}, {self.end})")
        if not self.suggestion:
            raise ValueError("empty suggestion")


@dataclass
class AnnotatedSentence:
    ids: list[int]
    records: list[AnnotationRecord]


def annotate(
    sentence: Sequence[str],
    spans: Sequence[tuple[int, int]],
    table: Mapping[str, list[Candidate]],
    codes: BpeCodes,
    vocab: Vocabulary,
    marker: str = DEFAULT_MARKER,
) -> AnnotatedSentence:
    """BPE-encode a sentence, inserting ``OPEN src SEP suggestion CLOSE`` for table hits."""
    ids: list[int] = []
    records: list[AnnotationRecord] = []
    pos = 0
    for begin, end in spans:
        if begin < pos or end > len(sentence):
            raise ValueError(f"span ({begin}, {end}) overlaps or exceeds the sentence")
        ids += vocab.encode(apply_bpe(sentence[pos:begin], codes, marker))
        source_ids = vocab.encode(apply_bpe(sentence[begin:end], codes, marker))
        suggestion = best_translation(table, " ".join(sentence[begin:end]))
        if suggestion is None:
            ids += source_ids
        else:
            words = tuple(suggestion.split())
            sug_ids = tuple(vocab.encode(apply_bpe(words, codes, marker)))
            ids += [ANNOT_OPEN, *source_ids, ANNOT_SEP, *sug_ids, ANNOT_CLOSE]
            records.append(AnnotationRecord(begin, end, words, sug_ids))
        pos = end
    ids += vocab.encode(apply_bpe(sentence[pos:], codes, marker))
    return AnnotatedSentence(ids, records)


def strip_annotations(ids: Sequence[int]) -> list[int]:
    """Drop markers and suggestions, keeping the annotated source pieces."""
    out = []
    in_suggestion = False
    for i in ids:
        if i == ANNOT_OPEN:
            continue
        if i == ANNOT_SEP:
            in_suggestion = True
        elif i == ANNOT_CLOSE:
            in_suggestion = False
        elif not in_suggestion:
            out.append(i)
    return out


def markers_balanced(ids: Sequence[int]) -> bool:
    expect = ANNOT_OPEN
    for i in ids:
        if i in (ANNOT_OPEN, ANNOT_SEP, ANNOT_CLOSE):
            if i != expect:
                return False
            expect = {ANNOT_OPEN: ANNOT_SEP, ANNOT_SEP: ANNOT_CLOSE, ANNOT_CLOSE: ANNOT_OPEN}[i]
    return expect == ANNOT_OPEN


def render_annotated(sentence: Sequence[str], records: Sequence[AnnotationRecord]) -> list[str]:
    """Word-level annotated text with literal marker tokens."""
    out: list[str] = []
    pos = 0
    for rec in records:
        out += sentence[pos : rec.begin]
        out += [OPEN_SURFACE, *sentence[rec.begin : rec.end], SEP_SURFACE, *rec.suggestion, CLOSE_SURFACE]
        pos = rec.end
    out += sentence[pos:]
    return out


def parse_annotated(tokens: Sequence[str]) -> tuple[list[str], list[AnnotationRecord]]:
    """Inverse of :func:`render_annotated`: plain words plus records."""
    words: list[str] = []
    records: list[AnnotationRecord] = []
    state = "out"
    begin = 0
    suggestion: list[str] = []
    for tok in tokens:
        if state == "out":
            if tok == OPEN_SURFACE:
                state, begin = "src", len(words)
            else:
                words.append(tok)
        elif state == "src":
            if tok == SEP_SURFACE:
                state, suggestion = "sug", []
            else:
                words.append(tok)
        elif tok == CLOSE_SURFACE:
            records.append(AnnotationRecord(begin, len(words), tuple(suggestion)))
            state = "out"
        else:
            suggestion.append(tok)
    if state != "out":
        raise ValueError(f"unterminated annotation in {' '.join(tokens)!r}")
    return words, records


def coverage_stats(
    corpus: Sequence[Sequence[str]],
    table: Mapping[str, list[Candidate]],
    references: Sequence[Sequence[str]],
    freq: Mapping[str, int],
    threshold: int = DEFAULT_THRESHOLD,
) -> tuple[int, float]:
    """Count rare words and the fraction whose suggestion is confirmed by the reference.

    A rare word is covered when the span it was grown into has a suggestion
    whose words all occur in the aligned reference.
    """
    if len(corpus) != len(references):
        raise ValueError(f"{len(corpus)} sentences but {len(references)} references")
    n_rare = covered = 0
    for sentence, ref in zip(corpus, references):
        ref_counts = Counter(ref)
        for begin, end in find_rare_spans(sentence, freq, threshold, table):
            rare = sum(freq.get(w, 0) < threshold for w in sentence[begin:end])
            n_rare += rare
            suggestion = best_translation(table, " ".join(sentence[begin:end]))
            if suggestion and not Counter(suggestion.split()) - ref_counts:
                covered += rare
    return n_rare, (covered / n_rare if n_rare else 0.0)
