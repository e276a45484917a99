"""End-to-end acceptance criteria.

Each test prints one ``criterion N: PASS|FAIL`` line (shown even without
``-s``). The synthetic experiment behind criteria 4-7 and 10 is trained once
per module and takes most of the runtime.
"""

import re
import time

import numpy as np
import pytest

from conftest import random_model
from expertnmt.checkpoint import load_checkpoint
from expertnmt.cli import main
from expertnmt.config import load_config
from expertnmt.corpus import ANNOT_CLOSE, ANNOT_OPEN, BOS, RESERVED, UNK
from expertnmt.decode import beam, greedy
from expertnmt.evaluate import bleu, sac, sug
from expertnmt.expert import AnnotationRecord
from expertnmt.model import decode_step, encode, forward_logprob, initial_attentional
from expertnmt.pipeline import Pipeline
from expertnmt.rewards import RewardConfig, gleu, hit
from expertnmt.training import mean_sample_reward
from oracles import bleu_oracle, exhaustive_best, gleu_oracle, hit_oracle, sac_oracle, sug_oracle

pytestmark = pytest.mark.slow

# 120 common + 80 rare words, 2000 training sentences, d=64
SYNTH = """\
synth.n_common=120
synth.n_rare=80
synth.n_train=2000
synth.rare_prob=0.6
synth.seed=1
"""

PIPELINE = """\
paths.work_dir={work}
paths.train_src=data/train.src
paths.train_tgt=data/train.tgt
paths.dev_src=data/dev.src
paths.dev_tgt=data/dev.tgt
paths.test_src=data/test.src
paths.test_tgt=data/test.tgt
paths.phrase_table=data/expert.pt
corpus.bpe_ops=100
corpus.threshold=100
model.d=64
model.layers=2
model.dropout=0.1
train.stages=xent,finetune,rl
train.seed=1
train.batch_size=16
train.xent_epochs=40
train.lr=0.003
train.finetune_epochs=0
train.rl_epochs=50
train.rl_lr=0.0002
train.rl_max_sentences=400
train.samples=4
train.alpha=0.5
decode.beam=5
"""

# reduced corpus for the two-run reproducibility check
REPRO_SYNTH = """\
synth.n_train=300
synth.n_dev=40
synth.n_test=40
synth.seed=3
"""

REPRO_OVERRIDES = """\
model.d=16
train.xent_epochs=3
train.finetune_epochs=1
train.rl_epochs=2
train.rl_max_sentences=40
train.samples=1
"""

REWARD_SEEDS = range(8)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def write_config(root, name, extra=""):
    path = root / f"{name}.cfg"
    path.write_text(PIPELINE.format(work=f"work_{name}") + extra)
    return path


def train(cfg_path, *extra):
    assert main(["train", "--config", str(cfg_path), *extra]) == 0


def scores_for(pipe, params, examples, records=None):
    hyps = pipe.translate_examples(params, examples)
    refs = [ex.reference for ex in examples]
    records = records if records is not None else [ex.records for ex in examples]
    return {
        "bleu": bleu(hyps, refs).value,
        "sug": sug(hyps, records).value,
        "sac": sac(hyps, records, refs).value,
        "hyps": hyps,
    }


def expected_reward(pipe, params, alpha):
    """Mean sampled reward on the RL split, averaged over fixed sampling seeds."""
    vocab = pipe.prepare().vocab
    data = pipe.stage_data("rl")
    cfg = RewardConfig(alpha=alpha)
    return float(np.mean([mean_sample_reward(params, data, cfg, vocab, seed=s)[0] for s in REWARD_SEEDS]))


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    (root / "synth.cfg").write_text(SYNTH)
    t0 = time.perf_counter()
    assert main(["synth", "--config", str(root / "synth.cfg"), "--out", str(root / "data")]) == 0

    # annotate -> xent -> rl (alpha 0.5)
    main_cfg = write_config(root, "annotated")
    train(main_cfg)
    pipe = Pipeline(load_config(main_cfg))
    test = pipe.prepare().examples["test"]
    final = pipe.final_params()
    scores = scores_for(pipe, final, test)
    runtime = time.perf_counter() - t0

    pretrained = pipe.ckpt_path("finetune", "best")
    before = expected_reward(pipe, load_checkpoint(pretrained)[0], 0.5)
    after = expected_reward(pipe, load_checkpoint(pipe.ckpt_path("rl", "last"))[0], 0.5)

    # same seeds and stages, no annotation and no copy path
    base_cfg = write_config(root, "baseline", "corpus.annotate=false\nmodel.copy=false\n")
    train(base_cfg)
    base_pipe = Pipeline(load_config(base_cfg))
    baseline = scores_for(base_pipe, base_pipe.final_params(), base_pipe.prepare().examples["test"],
                           [ex.records for ex in test])

    # RL from the shared pre-trained checkpoint with other reward mixtures
    sweep = {0.5: scores}
    for alpha in (0.0, 1.0):
        name = f"alpha{alpha:g}"
        cfg = write_config(root, name, f"train.init_checkpoint={pretrained}\n")
        train(cfg, "--stage", "rl", "--alpha", str(alpha))
        p = Pipeline(load_config(cfg))
        sweep[alpha] = scores_for(p, p.final_params(), test)
        sweep[alpha]["log"] = (p.work / "train.log").read_text()

    return {
        "root": root, "pipe": pipe, "test": test, "final": final, "scores": scores, "runtime": runtime,
        "reward_before": before, "reward_after": after, "baseline": baseline, "sweep": sweep,
    }


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_gradient_check(capsys):
    t0 = time.perf_counter()
    code = main(["grad-check", "--d", "4", "--vocab", "12", "--layers", "1", "--batch", "3", "--eps", "1e-4"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = float(re.search(r"max relative error (\S+)", out).group(1))
    names = {line.split("\t")[0] for line in out.splitlines() if "\t" in line}
    covered = all(any(n.startswith(prefix) for n in names) for prefix in ("E", "enc.", "dec.", "att.", "gate."))
    ok = code == 0 and worst < 1e-4 and elapsed < 60 and covered
    report(capsys, 1, ok, f"max rel err {worst:.2e}, {elapsed:.1f}s, {len(names)} tensors")
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_distribution_invariants(capsys):
    rng = np.random.default_rng(2024)
    worst, negative, gamma_ok = 0.0, False, True
    for i in range(1000):
        V = int(rng.integers(8, 20))
        params = random_model(V=V, d=int(rng.integers(2, 7)), seed=i, scale=float(rng.uniform(0.1, 3.0)),
                              layers=int(rng.integers(1, 3)), input_feed=bool(rng.integers(2)))
        B, M = int(rng.integers(1, 4)), int(rng.integers(1, 8))
        enc = encode(params, rng.integers(0, V, size=(B, M)))
        state, att, prev = enc.init, initial_attentional(params, B), np.full(B, BOS)
        for _ in range(int(rng.integers(1, 4))):
            d, state, att = decode_step(params, state, prev, enc, att)
            for dist in (d.p_gen, d.p_copy, d.p, d.attention):
                worst = max(worst, float(np.abs(dist.sum(axis=1) - 1.0).max()))
                negative |= bool((dist < 0).any())
            gamma_ok &= bool(((d.gamma >= 0) & (d.gamma <= 1)).all())
            prev = rng.integers(0, V, size=B)
    ok = worst <= 1e-6 and not negative and gamma_ok
    report(capsys, 2, ok, f"max |sum-1| {worst:.1e} over 1000 draws")
    assert ok


# -- 3 ------------------------------------------------------------------------


def test_criterion_3_metric_oracles(capsys):
    rng = np.random.default_rng(3)
    alphabet = list("abcde")

    def sentence():
        return [alphabet[i] for i in rng.integers(0, 5, size=int(rng.integers(0, 9)))]

    worst = 0.0
    hyps, refs, records = [], [], []
    for _ in range(1000):
        h, r = sentence(), sentence()
        recs = [AnnotationRecord(0, 1, tuple(s)) for s in (sentence() for _ in range(int(rng.integers(0, 3)))) if s]
        worst = max(worst, abs(gleu(h, r) - gleu_oracle(h, r)), abs(hit(h, recs) - hit_oracle(h, recs)))
        hyps.append(h)
        refs.append(r)
        records.append(recs)
    for lo in range(0, 1000, 10):
        sl = slice(lo, lo + 10)
        worst = max(worst, abs(bleu(hyps[sl], refs[sl]).value - bleu_oracle(hyps[sl], refs[sl])))
        for got, want in ((sug(hyps[sl], records[sl]).value, sug_oracle(hyps[sl], records[sl])),
                          (sac(hyps[sl], records[sl], refs[sl]).value, sac_oracle(hyps[sl], records[sl], refs[sl]))):
            assert (got is None) == (want is None)
            if got is not None:
                worst = max(worst, abs(got - want))
    pinned = gleu("a b c d".split(), "a b c".split())
    ok = worst <= 1e-12 and abs(pinned - 0.6) <= 1e-12
    report(capsys, 3, ok, f"max oracle diff {worst:.1e}, gleu pinned {pinned:.6f}")
    assert ok


# -- 4-7 ----------------------------------------------------------------------


def test_criterion_4_copy_consistency(experiment, capsys):
    s = experiment["scores"]
    ok = s["sug"] >= 0.90 and s["sac"] >= 0.95 and experiment["runtime"] < 30 * 60
    report(capsys, 4, ok, f"SUG {s['sug']:.4f} SAC {s['sac']:.4f} BLEU {s['bleu']:.4f} "
                          f"pipeline {experiment['runtime'] / 60:.1f} min")
    assert ok


def test_criterion_5_annotation_beats_baseline(experiment, capsys):
    ann, base = experiment["scores"]["sac"], experiment["baseline"]["sac"]
    ok = ann > base
    report(capsys, 5, ok, f"SAC annotated {ann:.4f} vs baseline {base:.4f} "
                          f"(baseline BLEU {experiment['baseline']['bleu']:.4f})")
    assert ok


def test_criterion_6_alpha_sweep(experiment, capsys):
    sweep = experiment["sweep"]
    ok = sweep[0.5]["sug"] >= sweep[0.0]["sug"]
    rl_rewards = [float(line.split("\t")[3]) for line in sweep[1.0]["log"].splitlines() if "\trl-train\t" in line]
    report(capsys, 6, ok, f"SUG a=0.5 {sweep[0.5]['sug']:.4f} >= a=0.0 {sweep[0.0]['sug']:.4f}; "
                          f"a=1.0 observed: SUG {sweep[1.0]['sug']:.4f} BLEU {sweep[1.0]['bleu']:.4f} "
                          f"(a=0.5 BLEU {sweep[0.5]['bleu']:.4f}), train reward {rl_rewards[0]:.3f} -> {rl_rewards[-1]:.3f}")
    assert ok


def test_criterion_7_self_critical_improves_reward(experiment, capsys):
    before, after = experiment["reward_before"], experiment["reward_after"]
    ok = after - before >= 0.01
    report(capsys, 7, ok, f"mean reward {before:.4f} -> {after:.4f} ({after - before:+.4f})")
    assert ok


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_decoder_contracts(capsys):
    rng = np.random.default_rng(8)
    beam_greedy = 0
    for seed in range(100):
        V = int(rng.integers(6, 14))
        params = random_model(V=V, seed=seed, scale=float(rng.uniform(0.2, 2.0)))
        src = rng.integers(3, V, size=int(rng.integers(1, 6)))
        beam_greedy += beam(params, src, k=1, max_len=8)[0].tokens == greedy(params, src, max_len=8).tokens

    exhaustive = 0
    rescore = 0.0
    for seed in range(20):
        params = random_model(V=6, seed=seed, scale=2.0)
        src = np.array([3, 4, 5, 3])
        best, ranked = beam(params, src, k=6, max_len=2)
        _, seq = exhaustive_best(params, src, 6, 2)
        exhaustive += best.tokens == seq
        for h in ranked:
            rescore = max(rescore, abs(forward_logprob(params, src, h.tokens)[0] - h.logprob))
    ok = beam_greedy == 100 and exhaustive == 20 and rescore < 1e-9
    report(capsys, 8, ok, f"beam1==greedy {beam_greedy}/100, exhaustive {exhaustive}/20, rescore err {rescore:.1e}")
    assert ok


# -- 9 ------------------------------------------------------------------------


def run_full_pipeline(root):
    (root / "synth.cfg").write_text(REPRO_SYNTH)
    assert main(["synth", "--config", str(root / "synth.cfg"), "--out", str(root / "data")]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(PIPELINE.format(work="work") + REPRO_OVERRIDES)
    assert main(["train", "--config", str(cfg)]) == 0
    hyp = root / "hyp.txt"
    assert main(["translate", "--config", str(cfg), "--out", str(hyp)]) == 0
    return cfg, hyp


def test_criterion_9_reproducibility(tmp_path, capsys):
    outputs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        _, hyp = run_full_pipeline(root)
        capsys.readouterr()
        assert main(["score", "all", "--hyp", str(hyp), "--ref", str(root / "data" / "test.tgt"),
                     "--annotated", str(root / "work" / "data" / "test.annot.src")]) == 0
        ckpts = {p.name: p.read_bytes() for p in sorted((root / "work" / "ckpt").glob("*.ckpt"))}
        outputs.append((capsys.readouterr().out, ckpts))
    (report_a, ckpt_a), (report_b, ckpt_b) = outputs
    ok = report_a == report_b and ckpt_a == ckpt_b and len(ckpt_a) == 6
    report(capsys, 9, ok, f"{len(ckpt_a)} checkpoints and metric report byte-identical across two runs")
    assert ok


# -- 10 -----------------------------------------------------------------------


def segments(src):
    """(open, close) source positions of each annotation segment, in order."""
    opens = [i for i, t in enumerate(src) if t == ANNOT_OPEN]
    closes = [i for i, t in enumerate(src) if t == ANNOT_CLOSE]
    return list(zip(opens, closes))


def output_words(tokens, vocab, marker="@@"):
    """Decoded words with the output steps that produced their pieces."""
    words, pieces, steps = [], "", []
    for step, tok in enumerate(tokens):
        if tok < len(RESERVED) and tok != UNK:
            continue
        text = vocab.tokens[tok]
        steps.append(step)
        if text.endswith(marker):
            pieces += text[: -len(marker)]
            continue
        words.append((pieces + text, steps))
        pieces, steps = "", []
    return words


def test_criterion_10_attention_inside_annotation(experiment, capsys):
    vocab = experiment["pipe"].prepare().vocab
    params = experiment["final"]
    copied = inside = 0
    for ex in experiment["test"]:
        if not ex.records:
            continue
        h = greedy(params, ex.src, record=True)
        words = output_words(h.output(), vocab)
        for rec, (a, b) in zip(ex.records, segments(ex.src)):
            for w in rec.suggestion:
                match = next((steps for word, steps in words if word == w), None)
                if match is None:
                    continue
                copied += 1
                inside += all(a <= int(np.argmax(h.attention[s])) <= b for s in match)
    frac = inside / copied if copied else 0.0
    ok = copied > 0 and frac >= 0.80
    report(capsys, 10, ok, f"attention argmax inside segment for {inside}/{copied} copied rare words ({frac:.3f})")
    assert ok
