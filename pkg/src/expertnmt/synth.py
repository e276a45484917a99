"""Synthetic word-for-word parallel corpora with an oracle (or noisy) rare-word expert."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .expert import PhraseTable

_SRC_ONSETS = "bdgklmnprstvz"
_TGT_ONSETS = "bcdfhjlmnpstw"
_VOWELS = "aeiou"
_CODAS = ("", "", "n", "r", "s", "l")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_common: int = 120
    n_rare: int = 80
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    rare_prob: float = 0.3
    zipf: float = 1.0
    min_len: int = 4
    max_len: int = 9
    unseen_fraction: float = 0.5
    identical_fraction: float = 0.25
    error_rate: float = 0.0
    reorder: bool = False
    swap_prob: float = 0.1
    seed: int = 1

    def __post_init__(self):
        for name in ("rare_prob", "unseen_fraction", "identical_fraction", "error_rate", "swap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthError(f"{name} must be in [0, 1]")
        if self.n_common < 1 or self.min_len < 1 or self.max_len < self.min_len:
            raise SynthError("need n_common >= 1 and 1 <= min_len <= max_len")
        if self.n_rare < 2:
            raise SynthError("need at least two rare words")


@dataclass
class SynthData:
    config: SynthConfig
    splits: dict[str, tuple[list[list[str]], list[list[str]]]]
    lexicon: dict[str, str]
    expert: dict[str, str]
    seen_rare: list[str]
    unseen_rare: list[str]
    injected: dict[str, int]


def _words(rng, onsets, n_syll_choices, count, taken, with_coda):
    """Draw ``count`` distinct pseudo-words not already in ``taken``."""
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise SynthError(f"could not draw {count} distinct words from the syllable inventory")
        n = int(rng.choice(n_syll_choices))
        sylls = []
        for _ in range(n):
            s = onsets[rng.integers(len(onsets))] + _VOWELS[rng.integers(len(_VOWELS))]
            if with_coda:
                s += _CODAS[rng.integers(len(_CODAS))]
            sylls.append(s)
        w = "".join(sylls)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _zipf_weights(n, s):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate(config: SynthConfig) -> SynthData:
    """Build train/dev/test splits and the expert lexicon for ``config``.

    Targets are the word-by-word image of the source through a hidden
    lexicon. Train sentences only use the "seen" part of the rare pool;
    in dev and test at least ``unseen_fraction`` of the injected rare words
    come from the unseen part.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    taken: set[str] = set()
    src_common = _words(rng, _SRC_ONSETS, (1, 2), c.n_common, taken, False)
    src_rare = _words(rng, _SRC_ONSETS, (3, 4), c.n_rare, taken, False)
    tgt_common = _words(rng, _TGT_ONSETS, (1, 2), c.n_common, taken, True)
    n_identical = int(round(c.identical_fraction * c.n_rare))
    tgt_rare = src_rare[:n_identical] + _words(rng, _TGT_ONSETS, (2, 3), c.n_rare - n_identical, taken, True)
    lexicon = dict(zip(src_common, tgt_common))
    lexicon.update(zip(src_rare, tgt_rare))

    order = rng.permutation(c.n_rare)
    n_unseen = int(math.ceil(c.unseen_fraction * c.n_rare))
    if c.unseen_fraction > 0 and n_unseen >= c.n_rare:
        n_unseen = c.n_rare - 1
    unseen = [src_rare[i] for i in order[:n_unseen]]
    seen = [src_rare[i] for i in order[n_unseen:]]
    weights = _zipf_weights(c.n_common, c.zipf)

    def sentences(n, split):
        inject = rng.random(n) < c.rare_prob
        k = int(inject.sum())
        use_unseen = np.zeros(k, dtype=bool)
        if split != "train" and unseen:
            use_unseen[: int(math.ceil(c.unseen_fraction * k))] = True
            rng.shuffle(use_unseen)
        src_side, tgt_side = [], []
        j = 0
        for i in range(n):
            length = int(rng.integers(c.min_len, c.max_len + 1))
            words = [src_common[w] for w in rng.choice(c.n_common, size=length, p=weights)]
            if inject[i]:
                pool = unseen if use_unseen[j] else seen
                words[int(rng.integers(length))] = pool[int(rng.integers(len(pool)))]
                j += 1
            tgt = [lexicon[w] for w in words]
            if c.reorder:
                for p in range(len(tgt) - 1):
                    if rng.random() < c.swap_prob:
                        tgt[p], tgt[p + 1] = tgt[p + 1], tgt[p]
            src_side.append(words)
            tgt_side.append(tgt)
        return (src_side, tgt_side), k

    splits, injected = {}, {}
    for split, n in (("train", c.n_train), ("dev", c.n_dev), ("test", c.n_test)):
        splits[split], injected[split] = sentences(n, split)
    expert = {w: lexicon[w] for w in src_rare}
    if c.error_rate > 0:
        expert = corrupt_lexicon(expert, c.error_rate, c.seed + 1)
    return SynthData(c, splits, lexicon, expert, seen, unseen, injected)


def corrupt_lexicon(lexicon: dict[str, str], rate: float, seed: int) -> dict[str, str]:
    """Replace each entry, with probability ``rate``, by a different target word."""
    if not 0.0 <= rate <= 1.0:
        raise SynthError("rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    targets = sorted(set(lexicon.values()))
    out = {}
    for src in sorted(lexicon):
        true = lexicon[src]
        if rng.random() < rate:
            wrong = [t for t in targets if t != true]
            if not wrong:
                raise SynthError("need at least two distinct targets to corrupt")
            out[src] = wrong[int(rng.integers(len(wrong)))]
        else:
            out[src] = true
    return out


def expert_table(expert: dict[str, str]) -> PhraseTable:
    table = PhraseTable()
    for src, tgt in sorted(expert.items()):
        table.add(src, tgt, (1.0, 1.0, 1.0, 1.0))
    return table


def write_synth(data: SynthData, out_dir) -> dict[str, Path]:
    """Write corpus files, the expert phrase table and a manifest; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, (src, tgt) in data.splits.items():
        for side, sents in (("src", src), ("tgt", tgt)):
            p = out / f"{split}.{side}"
            p.write_text("".join(" ".join(s) + "\n" for s in sents), encoding="utf-8")
            paths[f"{split}.{side}"] = p
    paths["expert"] = out / "expert.pt"
    expert_table(data.expert).save(paths["expert"])
    manifest = {
        "config": asdict(data.config),
        "sizes": {split: len(src) for split, (src, _) in data.splits.items()},
        "injected": data.injected,
        "seen_rare": len(data.seen_rare),
        "unseen_rare": len(data.unseen_rare),
        "seed": data.config.seed,
    }
    paths["manifest"] = out / "synth_manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
