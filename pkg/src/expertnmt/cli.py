"""Command-line entry point: ``expertnmt <subcommand> [flags]``.

Exit status is 0 on success, 1 on a validation error (bad config, bad
input files) and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import STAGES, ConfigError, load_config
from .corpus import BpeCodes, apply_bpe, learn_bpe, read_lines, read_parallel, tokenize
from .decode import default_max_len, greedy
from .evaluate import attention_dump
from .expert import PhraseTableError, parse_annotated, render_annotated
from .model import ModelConfig, init_params
from .pipeline import Manifest, Pipeline, PipelineError, metric_report, work_dir_lock, write_config_snapshot
from .synth import SynthConfig, SynthError, generate, write_synth
from .training import finite_diff_check

log = logging.getLogger("expertnmt")

METRICS = ("bleu", "gleu", "hit", "sug", "sac", "all")
GRAD_CHECK_TOL = 1e-4


class UsageError(ValueError):
    """Bad combination of flags or malformed input files."""


def _config(args):
    if args.config is None:
        raise UsageError("--config is required for this command")
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train__seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        overrides["train__alpha"] = args.alpha
    if getattr(args, "beam", None) is not None:
        overrides["decode__beam"] = args.beam
    return cfg.with_overrides(**overrides) if overrides else cfg


def _write_lines(path, lines):
    text = "".join(" ".join(line) + "\n" for line in lines)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _manifest_for(args, command, cfg=None, inputs=()):
    if cfg is not None:
        path = cfg.path("paths.work_dir") / "manifest.json"
        seed = cfg["train.seed"]
    else:
        out = Path(args.out) if args.out else Path.cwd() / "out"
        path = (out if out.is_dir() else out.parent) / "manifest.json"
        seed = getattr(args, "seed", None)
    path.parent.mkdir(parents=True, exist_ok=True)
    return Manifest(path, command, cfg, seed, inputs)


# -- subcommands ------------------------------------------------------------


def cmd_bpe_learn(args):
    cfg = _config(args)
    pipe = Pipeline(cfg)
    src, tgt = read_parallel(*pipe.split_paths("train"))
    codes = learn_bpe((w for s in src + tgt for w in s), cfg["corpus.bpe_ops"])
    out = Path(args.out) if args.out else pipe.work / "data" / "bpe.codes"
    out.parent.mkdir(parents=True, exist_ok=True)
    codes.save(out)
    _manifest_for(args, "bpe-learn", cfg, pipe.input_paths()).record(out)
    print(f"{len(codes.merges)} merges -> {out}")


def cmd_bpe_apply(args):
    if args.codes is None or args.input is None:
        raise UsageError("bpe-apply needs --codes and --input")
    codes = BpeCodes.load(args.codes)
    lines = [apply_bpe(tokenize(line), codes, args.marker) for line in read_lines(args.input)]
    _write_lines(args.out, lines)
    if args.out:
        _manifest_for(args, "bpe-apply", inputs=[args.codes, args.input]).record(args.out)


def cmd_vocab(args):
    cfg = _config(args)
    with work_dir_lock(cfg.path("paths.work_dir")):
        prep = Pipeline(cfg).prepare()
    if args.out:
        prep.vocab.save(args.out)
        _manifest_for(args, "vocab", cfg).record(args.out)
    print(f"vocabulary: {len(prep.vocab)} entries")


def cmd_annotate(args):
    cfg = _config(args)
    with work_dir_lock(cfg.path("paths.work_dir")):
        pipe = Pipeline(cfg)
        pipe.prepare()
        if args.input is None:
            print(f"annotated splits written to {pipe.work / 'data'}")
            return
        sentences = [tokenize(line) for line in read_lines(args.input)]
        examples = pipe.annotate_words(sentences)
        _write_lines(args.out, [render_annotated(s, ex.records) for s, ex in zip(sentences, examples)])
        if args.out:
            _manifest_for(args, "annotate", cfg, [args.input, *pipe.input_paths()]).record(args.out)


def cmd_synth(args):
    kw = {}
    if args.config is not None:
        cfg = load_config(args.config, check_paths=False)
        kw = cfg.section("synth")
    if args.seed is not None:
        kw["seed"] = args.seed
    out = Path(args.out or "synth")
    data = generate(SynthConfig(**kw))
    paths = write_synth(data, out)
    Manifest(out / "manifest.json", "synth", None, data.config.seed).record(*paths.values())
    print(f"synthetic corpus written to {out}")


def cmd_train(args):
    cfg = _config(args)
    stages = cfg.stages
    if args.stage is not None:
        if args.stage not in stages:
            raise UsageError(f"--stage {args.stage}: not in train.stages ({','.join(stages)})")
        stages = (args.stage,)
    work = cfg.path("paths.work_dir")
    with work_dir_lock(work):
        write_config_snapshot(cfg, work)
        pipe = Pipeline(cfg)
        pipe.prepare()
        pipe.train(stages)
        Manifest(work / "manifest.json", "train", cfg, cfg["train.seed"], pipe.input_paths()).run(stages=list(stages))
    print(f"checkpoints in {work / 'ckpt'}")


def _inputs(pipe, args):
    """Examples to decode: ``--input`` sentences, else the test split."""
    if args.input is not None:
        sentences = [tokenize(line) for line in read_lines(args.input)]
        return sentences, pipe.annotate_words(sentences)
    prep = pipe.prepare()
    if "test" not in prep.examples:
        raise UsageError("translate needs --input or paths.test_src/paths.test_tgt")
    return prep.sources["test"], prep.examples["test"]


def cmd_translate(args):
    cfg = _config(args)
    work = cfg.path("paths.work_dir")
    with work_dir_lock(work):
        pipe = Pipeline(cfg)
        params = pipe.final_params()
        _, examples = _inputs(pipe, args)
        hyps = pipe.translate_examples(params, examples)
        out = Path(args.out) if args.out else work / "translate.out"
        _write_lines(out, hyps)
        _manifest_for(args, "translate", cfg, pipe.input_paths()).record(out)
    print(f"{len(hyps)} translations -> {out}")


def cmd_score(args):
    if args.hyp is None or args.ref is None:
        raise UsageError("score needs --hyp and --ref")
    hyps = [tokenize(x) for x in read_lines(args.hyp)]
    refs = [tokenize(x) for x in read_lines(args.ref)]
    if len(hyps) != len(refs):
        raise UsageError(f"--hyp has {len(hyps)} lines but --ref has {len(refs)}")
    records = None
    if args.annotated is not None:
        ann = read_lines(args.annotated)
        if len(ann) != len(hyps):
            raise UsageError(f"--annotated has {len(ann)} lines but --hyp has {len(hyps)}")
        records = [parse_annotated(tokenize_annotated(x))[1] for x in ann]
    elif args.metric in ("hit", "sug", "sac"):
        raise UsageError(f"metric {args.metric} needs --annotated (annotated source file)")
    report = metric_report(hyps, refs, records)
    names = list(report) if args.metric == "all" else [args.metric]
    text = "".join(report[n].line() + "\n" for n in names)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _manifest_for(args, "score", inputs=[args.hyp, args.ref, args.annotated]).record(args.out)
    sys.stdout.write(text)


def tokenize_annotated(line: str) -> list[str]:
    """Annotated files are already tokenized; split on whitespace to keep marker tokens intact."""
    return line.split()


def cmd_attn_dump(args):
    cfg = _config(args)
    work = cfg.path("paths.work_dir")
    with work_dir_lock(work):
        pipe = Pipeline(cfg)
        params = pipe.final_params()
        _, examples = _inputs(pipe, args)
        if not 0 <= args.line < len(examples):
            raise UsageError(f"--line {args.line}: input has {len(examples)} sentences")
        ex = examples[args.line]
        vocab = pipe.prepare().vocab
        hyp = greedy(params, ex.src, default_max_len(len(ex.src)))
        out = Path(args.out) if args.out else work / f"attention.{args.line}.tsv"
        attention_dump(params, ex.src, hyp.output(), out, vocab.decode(ex.src), vocab.decode(hyp.output()))
        _manifest_for(args, "attn-dump", cfg, pipe.input_paths()).record(out)
    print(f"attention matrix -> {out}")


def cmd_grad_check(args):
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(args.vocab, d=args.d, layers=args.layers, dropout=0.0)
    params = init_params(cfg, seed)
    # perturb away from the small-init regime so every term contributes
    for t in params.tensors.values():
        t += rng.uniform(-0.3, 0.3, size=t.shape)
    src = rng.integers(3, args.vocab, size=(args.batch, args.src_len))
    targets = [list(rng.integers(7, args.vocab, size=int(rng.integers(1, args.src_len + 2)))) for _ in range(args.batch)]
    worst, per_tensor = finite_diff_check(params, src, targets, eps=args.eps)
    for name, err in per_tensor.items():
        print(f"{name}\t{err:.3e}")
    ok = worst < GRAD_CHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 2


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (key=value lines)")
    common.add_argument("--seed", type=int, help="override train.seed (synth.seed for synth)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="expertnmt", description="Expert-annotated copy-generator NMT.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("bpe-learn", cmd_bpe_learn, "learn BPE codes on the training corpus")
    p = add("bpe-apply", cmd_bpe_apply, "segment a text file with BPE codes")
    p.add_argument("--codes")
    p.add_argument("--input")
    p.add_argument("--marker", default="@@")
    add("vocab", cmd_vocab, "build the joint vocabulary")
    p = add("annotate", cmd_annotate, "annotate rare words with expert suggestions")
    p.add_argument("--input", help="plain text file; default annotates every configured split")
    add("synth", cmd_synth, "generate a synthetic corpus and oracle expert")
    p = add("train", cmd_train, "run (or resume) the training stages")
    p.add_argument("--stage", choices=STAGES)
    p.add_argument("--alpha", type=float, help="override train.alpha")
    p = add("translate", cmd_translate, "beam-search decode the test split or --input")
    p.add_argument("--input")
    p.add_argument("--beam", type=int, help="override decode.beam")
    p = add("score", cmd_score, "corpus metrics for a hypothesis file")
    p.add_argument("metric", choices=METRICS)
    p.add_argument("--hyp")
    p.add_argument("--ref")
    p.add_argument("--annotated", help="annotated source file (needed by hit, sug, sac)")
    p = add("attn-dump", cmd_attn_dump, "write the attention matrix of one decoded sentence")
    p.add_argument("--input")
    p.add_argument("--line", type=int, default=0)
    p = add("grad-check", cmd_grad_check, "finite-difference gradient check on a tiny model")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--vocab", type=int, default=12)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--src-len", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        status = args.func(args)
    except (ConfigError, UsageError, PhraseTableError, SynthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # malformed input files surface as ValueError from the parsers
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
