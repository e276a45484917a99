"""Corpus metrics (BLEU, SUG, SAC) and attention export."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expert import AnnotationRecord
from .model import ModelParams, forward_logprob
from .rewards import ngrams, suggestion_words

BLEU_MAX_ORDER = 4


@dataclass
class CorpusScore:
    name: str
    value: float | None
    numerator: float
    denominator: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        value = "n/a" if self.value is None else f"{self.value:.6f}"
        return f"{self.name}\t{value}\t{self.numerator:g}\t{self.denominator:g}"


def _check_aligned(*corpora):
    sizes = {len(c) for c in corpora}
    if len(sizes) > 1:
        raise ValueError(f"corpora are not aligned: sizes {sorted(sizes)}")


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_order: int = BLEU_MAX_ORDER) -> CorpusScore:
    """Unsmoothed corpus BLEU with brevity penalty.

    ``numerator``/``denominator`` hold hypothesis and reference lengths; the
    pooled n-gram counts are in ``details``.
    """
    _check_aligned(hypotheses, references)
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h = ngrams(hyp, n)
            matches[n - 1] += sum((h & ngrams(ref, n)).values())
            totals[n - 1] += sum(h.values())
    details = {"matches": matches, "totals": totals}
    if hyp_len == 0 or min(matches) == 0:
        value = 0.0
    else:
        log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
        details["bp"] = bp
        value = bp * math.exp(log_p)
    return CorpusScore("bleu", value, hyp_len, ref_len, details)


def sug(hypotheses: Sequence[Sequence[str]], records: Sequence[Sequence[AnnotationRecord]], unique: bool = False) -> CorpusScore:
    """Share of suggested words that the system output contains."""
    _check_aligned(hypotheses, records)
    num = den = 0
    for hyp, recs in zip(hypotheses, records):
        wanted = suggestion_words(recs)
        if unique:
            wanted = Counter(set(wanted))
        num += sum((wanted & Counter(hyp)).values())
        den += sum(wanted.values())
    return CorpusScore("sug", num / den if den else None, num, den)


def sac(
    hypotheses: Sequence[Sequence[str]],
    records: Sequence[Sequence[AnnotationRecord]],
    references: Sequence[Sequence[str]],
) -> CorpusScore:
    """Of the suggested words confirmed by the reference, the share also in the output."""
    _check_aligned(hypotheses, records, references)
    num = den = 0
    for hyp, recs, ref in zip(hypotheses, records, references):
        confirmed = suggestion_words(recs) & Counter(ref)
        den += sum(confirmed.values())
        num += sum((confirmed & Counter(hyp)).values())
    return CorpusScore("sac", num / den if den else None, num, den)


def attention_matrix(params: ModelParams, src, tgt) -> tuple[np.ndarray, np.ndarray]:
    """Attention rows (target steps x source positions) and per-step gate values."""
    _, steps = forward_logprob(params, src, tgt)
    if not steps:
        return np.zeros((0, len(src))), np.zeros(0)
    return np.stack([s.attention for s in steps]), np.array([float(s.gamma) for s in steps])


def attention_dump(params: ModelParams, src, tgt, path, src_tokens: Sequence[str], tgt_tokens: Sequence[str]) -> np.ndarray:
    """Write a tab-separated attention heat map with token and gate headers."""
    matrix, gammas = attention_matrix(params, src, tgt)
    lines = [
        "# attention v1",
        "# source\t" + "\t".join(src_tokens),
        "# target\t" + "\t".join(tgt_tokens),
        "# gamma\t" + "\t".join(f"{g:.6f}" for g in gammas),
    ]
    lines += ["\t".join(f"{x:.8f}" for x in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return matrix


def read_attention_dump(path) -> dict:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "# attention v1":
        raise ValueError(f"{path}: not an attention dump")
    header = {}
    for line in lines[1:4]:
        key, *vals = line[2:].split("\t")
        header[key] = vals
    rows = [[float(x) for x in line.split("\t")] for line in lines[4:] if line]
    header["matrix"] = np.array(rows).reshape(len(rows), len(header["source"]))
    header["gamma"] = [float(g) for g in header["gamma"]]
    return header
