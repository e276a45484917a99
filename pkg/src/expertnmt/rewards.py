"""Sentence-level rewards for self-critical training: HIT, GLEU and their mixture."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .expert import AnnotationRecord

GLEU_MAX_ORDER = 4


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def suggestion_words(records: Iterable[AnnotationRecord]) -> Counter:
    out: Counter = Counter()
    for rec in records:
        out.update(rec.suggestion)
    return out


def hit(hypothesis: Sequence[str], records: Sequence[AnnotationRecord]) -> float:
    """Fraction of suggested words (with multiplicity) that occur in the hypothesis.

    Returns 1.0 when there is nothing to copy; :func:`reward` does not use
    that value.
    """
    wanted = suggestion_words(records)
    total = sum(wanted.values())
    if total == 0:
        return 1.0
    return sum((wanted & Counter(hypothesis)).values()) / total


def gleu(hypothesis: Sequence[str], reference: Sequence[str], max_order: int = GLEU_MAX_ORDER, pooled: bool = True) -> float:
    """min(precision, recall) over clipped n-gram matches, n = 1..max_order.

    Pooled mode sums matches and totals over all orders first; otherwise
    the per-order minima are averaged over orders that occur in either side.
    """
    if not hypothesis or not reference:
        return 0.0
    matched = hyp_total = ref_total = 0
    per_order = []
    for n in range(1, max_order + 1):
        h, r = ngrams(hypothesis, n), ngrams(reference, n)
        m = sum((h & r).values())
        th, tr = sum(h.values()), sum(r.values())
        matched += m
        hyp_total += th
        ref_total += tr
        if th or tr:
            per_order.append(min(m / th if th else 0.0, m / tr if tr else 0.0))
    if not pooled:
        return sum(per_order) / len(per_order)
    return min(matched / hyp_total, matched / ref_total)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    max_order: int = GLEU_MAX_ORDER
    pooled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class RewardValue:
    r: float
    hit: float | None
    gleu: float


def reward(sample: Sequence[str], reference: Sequence[str], records: Sequence[AnnotationRecord], config: RewardConfig) -> RewardValue:
    """alpha * HIT + (1 - alpha) * GLEU; plain GLEU for sentences without annotations."""
    g = gleu(sample, reference, config.max_order, config.pooled)
    if not records:
        return RewardValue(g, None, g)
    h = hit(sample, records)
    if config.alpha == 1.0:
        return RewardValue(h, h, g)
    if config.alpha == 0.0:
        return RewardValue(g, h, g)
    return RewardValue(config.alpha * h + (1.0 - config.alpha) * g, h, g)
