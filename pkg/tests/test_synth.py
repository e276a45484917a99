import json
import math

import pytest

from expertnmt.expert import coverage_stats, load_phrase_table
from expertnmt.synth import SynthConfig, SynthError, corrupt_lexicon, expert_table, generate, write_synth
from collections import Counter


@pytest.fixture(scope="module")
def data():
    return generate(SynthConfig())


def test_seed_fixes_corpus(data):
    again = generate(SynthConfig())
    assert again.splits == data.splits and again.expert == data.expert
    assert generate(SynthConfig(seed=2)).splits != data.splits


def test_injection_rate(data):
    c = data.config
    assert abs(data.injected["train"] / c.n_train - 0.3) <= 0.03


def test_targets_follow_lexicon(data):
    for src, tgt in zip(*data.splits["train"]):
        assert tgt == [data.lexicon[w] for w in src]


def test_pools_disjoint_and_unseen_held_out(data):
    rare = set(data.expert)
    assert not rare & {w for w in data.lexicon if w not in rare}
    train_words = {w for s in data.splits["train"][0] for w in s}
    assert not train_words & set(data.unseen_rare)
    unseen_targets = {data.lexicon[w] for w in data.unseen_rare}
    assert not unseen_targets & {w for s in data.splits["train"][1] for w in s}
    for split in ("dev", "test"):
        src = data.splits[split][0]
        rare_tokens = [w for s in src for w in s if w in rare]
        unseen = sum(w in data.unseen_rare for w in rare_tokens)
        assert unseen >= math.ceil(data.config.unseen_fraction * len(rare_tokens))


def test_oracle_expert_full_coverage(data):
    freq = Counter(w for s in data.splits["train"][0] for w in s)
    table = expert_table(data.expert)
    for split in ("dev", "test"):
        src, tgt = data.splits[split]
        n, frac = coverage_stats(src, table, tgt, freq, 5)
        assert n > 0 and frac == 1.0


def test_coverage_falls_with_error_rate():
    cov = []
    for rate in (0.0, 0.3, 0.7):
        d = generate(SynthConfig(error_rate=rate))
        freq = Counter(w for s in d.splits["train"][0] for w in s)
        cov.append(coverage_stats(*d.splits["test"][:1], expert_table(d.expert), d.splits["test"][1], freq, 5)[1])
    assert cov[0] > cov[1] > cov[2]


def test_corrupt_lexicon_rates():
    lex = {f"s{i}": f"t{i}" for i in range(200)}
    assert corrupt_lexicon(lex, 0.0, 1) == lex
    assert all(v != lex[k] for k, v in corrupt_lexicon(lex, 1.0, 1).items())
    changed = sum(v != lex[k] for k, v in corrupt_lexicon(lex, 0.5, 1).items())
    assert abs(changed - 100) <= 20
    with pytest.raises(SynthError):
        corrupt_lexicon(lex, 1.5, 1)


def test_reorder_flag_keeps_bag_of_words():
    d = generate(SynthConfig(reorder=True, swap_prob=0.5, n_train=50))
    swapped = 0
    for src, tgt in zip(*d.splits["train"]):
        mapped = [d.lexicon[w] for w in src]
        assert sorted(tgt) == sorted(mapped)
        swapped += tgt != mapped
    assert swapped > 0


@pytest.mark.parametrize("kw", [dict(rare_prob=1.5), dict(n_rare=1), dict(min_len=5, max_len=4)])
def test_invalid_config(kw):
    with pytest.raises(SynthError):
        SynthConfig(**kw)


def test_pool_too_small():
    with pytest.raises(SynthError):
        generate(SynthConfig(n_common=5000))


def test_write_synth(tmp_path, data):
    paths = write_synth(data, tmp_path)
    assert len((tmp_path / "train.src").read_text().splitlines()) == data.config.n_train
    assert load_phrase_table(paths["expert"]) == expert_table(data.expert)
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["sizes"] == {"train": 2000, "dev": 200, "test": 200}
    assert manifest["seed"] == 1
