"""Config-driven orchestration: data preparation, staged training, decoding, scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, dump_config
from .corpus import (
    BpeCodes,
    Vocabulary,
    apply_bpe,
    build_vocab,
    ids_to_words,
    learn_bpe,
    make_batches,
    read_parallel,
)
from .decode import beam, default_max_len, greedy_batch
from .evaluate import bleu, sac, sug
from .expert import (
    AnnotationRecord,
    PhraseTable,
    annotate,
    best_translation,
    find_rare_spans,
    load_phrase_table,
    render_annotated,
)
from .model import ModelConfig, ModelParams, init_params
from .rewards import RewardConfig, gleu
from .training import Adam, Example, Schedule, train_rl, train_xent

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test", "finetune")


class PipelineError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def work_dir_lock(work: Path):
    """Exclusive ownership of a work directory for the duration of a run."""
    work.mkdir(parents=True, exist_ok=True)
    lock = work / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"{work} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Manifest:
    """``manifest.json`` in the work dir: one entry per artifact plus a run log."""

    def __init__(self, path: Path, command: str, cfg: PipelineConfig | None, seed: int | None, inputs=()):
        self.path = path
        self.command = command
        self.config_hash = cfg.digest() if cfg is not None else None
        self.seed = seed
        self.inputs = {str(p): sha256_file(p) for p in inputs if p is not None and Path(p).exists()}

    def _load(self):
        if self.path.exists():
            return json.loads(self.path.read_text(encoding="utf-8"))
        return {"artifacts": {}, "runs": []}

    def record(self, *artifacts):
        data = self._load()
        base = self.path.parent
        for art in artifacts:
            art = Path(art)
            try:
                key = str(art.relative_to(base))
            except ValueError:
                key = str(art)
            data["artifacts"][key] = {
                "sha256": sha256_file(art),
                "command": self.command,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "inputs": self.inputs,
            }
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def run(self, **info):
        data = self._load()
        data["runs"].append({"command": self.command, "config_hash": self.config_hash,
                             "seed": self.seed, "inputs": self.inputs, **info})
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def annotation_records(words, spans, table) -> list[AnnotationRecord]:
    """Word-level records (no subword ids) for spans with a table hit."""
    out = []
    for b, e in spans:
        s = best_translation(table, " ".join(words[b:e]))
        if s is not None:
            out.append(AnnotationRecord(b, e, tuple(s.split())))
    return out


@dataclass
class Prepared:
    codes: BpeCodes
    vocab: Vocabulary
    word_freq: Counter
    examples: dict[str, list[Example]]
    sources: dict[str, list[list[str]]]


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.work = cfg.path("paths.work_dir")
        self.marker = cfg["corpus.marker"]
        self._prepared: Prepared | None = None

    # -- data -------------------------------------------------------------

    def split_paths(self, split):
        return self.cfg.path(f"paths.{split}_src"), self.cfg.path(f"paths.{split}_tgt")

    def input_paths(self):
        keys = [k for k in self.cfg.values if k.startswith("paths.") and k != "paths.work_dir"]
        return [self.cfg.path(k) for k in keys if self.cfg[k] is not None]

    def table(self) -> PhraseTable | None:
        if not self.cfg["corpus.annotate"] or self.cfg["paths.phrase_table"] is None:
            return None
        return load_phrase_table(self.cfg.path("paths.phrase_table"))

    def prepare(self, write: bool = True) -> Prepared:
        """Learn BPE and the joint vocabulary on training data, annotate every split."""
        if self._prepared is not None:
            return self._prepared
        cfg = self.cfg
        if cfg["paths.train_src"] is None or cfg["paths.train_tgt"] is None:
            raise PipelineError("paths.train_src: training corpus is required")
        raw = {}
        for split in SPLITS:
            src, tgt = self.split_paths(split)
            if src is not None and tgt is not None:
                raw[split] = read_parallel(src, tgt)
        train_src, train_tgt = raw["train"]
        codes = learn_bpe((w for s in train_src + train_tgt for w in s), cfg["corpus.bpe_ops"])
        word_freq = Counter(w for s in train_src for w in s)
        table = self.table()
        threshold = cfg["corpus.threshold"]

        annotated = {}
        for split, (src, tgt) in raw.items():
            rows = []
            for words in src:
                spans = find_rare_spans(words, word_freq, threshold, table) if table is not None else []
                rows.append((spans, annotation_records(words, spans, table) if table is not None else []))
            annotated[split] = rows

        sug_words = [[w for r in recs for w in r.suggestion] for _, recs in annotated["train"]]
        vocab = build_vocab(
            [
                (apply_bpe(s + extra, codes, self.marker) for s, extra in zip(train_src, sug_words)),
                (apply_bpe(t, codes, self.marker) for t in train_tgt),
            ],
            codes,
            self.marker,
        )
        examples, sources = {}, {}
        for split, (src, tgt) in raw.items():
            exs = []
            for words, ref, (spans, _) in zip(src, tgt, annotated[split]):
                ann = annotate(words, spans, table or {}, codes, vocab, self.marker)
                exs.append(Example(ann.ids, vocab.encode(apply_bpe(ref, codes, self.marker)), ann.records, list(ref)))
            examples[split] = exs
            sources[split] = src

        if write:
            data = self.work / "data"
            data.mkdir(parents=True, exist_ok=True)
            manifest = Manifest(self.work / "manifest.json", "prepare", cfg, cfg["train.seed"], self.input_paths())
            written = [data / "bpe.codes", data / "vocab.tsv", data / "word_freq.tsv"]
            codes.save(written[0])
            vocab.save(written[1])
            written[2].write_text("".join(f"{w}\t{c}\n" for w, c in sorted(word_freq.items())), encoding="utf-8")
            for split, exs in examples.items():
                p = data / f"{split}.annot.src"
                p.write_text(
                    "".join(" ".join(render_annotated(w, ex.records)) + "\n" for w, ex in zip(sources[split], exs)),
                    encoding="utf-8",
                )
                q = data / f"{split}.bpe.src"
                q.write_text("".join(" ".join(vocab.decode(ex.src)) + "\n" for ex in exs), encoding="utf-8")
                written += [p, q]
            manifest.record(*written)
        self._prepared = Prepared(codes, vocab, word_freq, examples, sources)
        return self._prepared

    # -- model and checkpoints -------------------------------------------

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.cfg.section("model")
        return ModelConfig(vocab_size, m["d"], m["layers"], m["dropout"], m["input_feed"], m["copy"], m["mask_markers"])

    def ckpt_path(self, stage: str, kind: str) -> Path:
        return self.work / "ckpt" / f"{stage}.{kind}.ckpt"

    def _save(self, stage, kind, params, opt, meta):
        opt_meta, opt_tensors = opt.state()
        path = self.ckpt_path(stage, kind)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, params, {"stage": stage, **meta, **opt_meta}, opt_tensors)
        return path

    def _stage_epochs(self, stage):
        return {"xent": self.cfg["train.xent_epochs"], "finetune": self.cfg["train.finetune_epochs"],
                "rl": self.cfg["train.rl_epochs"]}[stage]

    def _stage_lr(self, stage):
        return {"xent": self.cfg["train.lr"], "finetune": self.cfg["train.finetune_lr"],
                "rl": self.cfg["train.rl_lr"]}[stage]

    def stage_data(self, stage) -> list[Example]:
        ex = self.prepare().examples
        if stage == "xent":
            return ex["train"]
        data = ex.get("finetune", ex["train"])
        limit = self.cfg["train.rl_max_sentences"]
        return data[:limit] if limit else data

    def initial_params(self, stage: str) -> ModelParams:
        """Best checkpoint of the previous stage, the configured init checkpoint, or a fresh model."""
        vocab = self.prepare().vocab
        idx = self.cfg.stages.index(stage) if stage in self.cfg.stages else len(self.cfg.stages)
        for prev in reversed(self.cfg.stages[:idx]):
            p = self.ckpt_path(prev, "best")
            if p.exists():
                return load_checkpoint(p)[0]
        init = self.cfg.path("train.init_checkpoint")
        if init is not None:
            params = load_checkpoint(init)[0]
            if params.config.vocab_size != len(vocab):
                raise PipelineError(f"train.init_checkpoint: vocabulary size {params.config.vocab_size} != {len(vocab)}")
            return params
        if stage != "xent":
            raise PipelineError(f"stage {stage!r} needs a checkpoint from an earlier stage or train.init_checkpoint")
        return init_params(self.model_config(len(vocab)), self.cfg["train.seed"])

    def run_stage(self, stage: str, on_epoch_end=None) -> ModelParams:
        """Train one stage, resuming from its last checkpoint when one exists."""
        cfg = self.cfg
        prep = self.prepare()
        epochs = self._stage_epochs(stage)
        seed = cfg["train.seed"]
        last = self.ckpt_path(stage, "last")
        start_epoch, best = 0, None
        if last.exists():
            params, meta, extra = load_checkpoint(last)
            opt = Adam(params)
            opt.load_state(meta, extra)
            start_epoch = int(meta["epoch"])
            best = float(meta["best"])
            log.info("resuming %s from epoch %d", stage, start_epoch)
        else:
            params = self.initial_params(stage)
            opt = Adam(params, lr=self._stage_lr(stage))
        if start_epoch == 0:
            # the starting point is the reference for best-model selection
            best = self._validation_score(stage, params)
            self._save(stage, "best", params, opt, {"epoch": 0, "best": repr(best)})
            self._save(stage, "last", params, opt, {"epoch": 0, "best": repr(best)})
        logs_path = self.work / "train.log"
        data = self.stage_data(stage)
        dev = prep.examples.get("dev", [])

        def checkpoint(epoch, records, best_ppl=None, improved=None):
            nonlocal best
            score = best_ppl if stage != "rl" and dev else self._validation_score(stage, params)
            if score < best:
                best = score
                self._save(stage, "best", params, opt, {"epoch": epoch, "best": repr(best)})
            self._save(stage, "last", params, opt, {"epoch": epoch, "best": repr(best)})
            with open(logs_path, "a", encoding="utf-8") as fh:
                for r in records:
                    fh.write(r.line() + "\n")
            if on_epoch_end is not None:
                on_epoch_end(stage, epoch, params)

        if stage in ("xent", "finetune"):
            schedule = Schedule(self._stage_lr(stage), cfg["train.lr_floor"], anneal=(stage == "xent"))
            train_xent(params, data, opt, schedule, epochs, cfg["train.batch_size"], seed, dev, stage,
                       cfg["train.clip"], start_epoch, best_ppl=best if dev else np.inf, on_epoch_end=checkpoint)
        else:
            train_rl(params, data, opt, RewardConfig(cfg["train.alpha"]), prep.vocab, epochs,
                     cfg["train.batch_size"], seed, self.marker, cfg["train.samples"], cfg["train.clip"],
                     start_epoch, on_epoch_end=checkpoint)
        return params

    def _validation_score(self, stage, params) -> float:
        """Lower is better: dev perplexity for likelihood stages, negated dev BLEU for RL."""
        from .training import perplexity

        dev = self.prepare().examples.get("dev")
        if not dev:
            return float("inf")
        if stage == "rl":
            hyps = self.greedy_words(params, dev)
            return -float(bleu(hyps, [ex.reference for ex in dev]).value)
        return perplexity(params, dev)

    def train(self, stages=None, on_epoch_end=None) -> ModelParams:
        params = None
        for stage in stages or self.cfg.stages:
            params = self.run_stage(stage, on_epoch_end)
        Manifest(self.work / "manifest.json", "train", self.cfg, self.cfg["train.seed"], self.input_paths()).record(
            *sorted((self.work / "ckpt").glob("*.ckpt"))
        )
        return params

    def final_params(self) -> ModelParams:
        kind = self.cfg["decode.checkpoint"]
        for stage in reversed(self.cfg.stages):
            p = self.ckpt_path(stage, kind)
            if p.exists():
                return load_checkpoint(p)[0]
        raise PipelineError(f"no {kind} checkpoint in {self.work / 'ckpt'}; run 'train' first")

    # -- decoding and scoring --------------------------------------------

    def greedy_words(self, params, examples, batch_size=64) -> list[list[str]]:
        out: list[list[str] | None] = [None] * len(examples)
        pairs = [(ex.src, ex.tgt) for ex in examples]
        vocab = self.prepare().vocab
        for b in make_batches(pairs, batch_size, 0):
            hyps = greedy_batch(params, b.src, default_max_len(b.src.shape[1]))
            for i, h in zip(b.indices, hyps):
                out[i] = ids_to_words(h.tokens, vocab, self.marker)
        return out

    def translate_examples(self, params, examples, k=None) -> list[list[str]]:
        k = k or self.cfg["decode.beam"]
        vocab = self.prepare().vocab
        out = []
        for ex in examples:
            best, _ = beam(params, ex.src, k)
            out.append(ids_to_words(best.tokens, vocab, self.marker))
        return out

    def annotate_words(self, sentences) -> list[Example]:
        prep = self.prepare()
        table = self.table()
        out = []
        for words in sentences:
            spans = find_rare_spans(words, prep.word_freq, self.cfg["corpus.threshold"], table) if table else []
            ann = annotate(words, spans, table or {}, prep.codes, prep.vocab, self.marker)
            out.append(Example(ann.ids, [], ann.records, []))
        return out

    def score(self, hyps, examples) -> dict:
        refs = [ex.reference for ex in examples]
        records = [ex.records for ex in examples]
        return metric_report(hyps, refs, records)


def metric_report(hyps, refs, records=None) -> dict:
    """All corpus metrics; SUG/SAC only when annotation records are available."""
    from .evaluate import CorpusScore
    from .rewards import hit

    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    out = {"bleu": bleu(hyps, refs)}
    g = [gleu(h, r) for h, r in zip(hyps, refs)]
    out["gleu"] = CorpusScore("gleu", float(np.mean(g)) if g else None, float(sum(g)), len(g))
    if records is not None:
        hits = [hit(h, rec) for h, rec in zip(hyps, records) if rec]
        out["hit"] = CorpusScore("hit", float(np.mean(hits)) if hits else None, float(sum(hits)), len(hits))
        out["sug"] = sug(hyps, records)
        out["sac"] = sac(hyps, records, refs)
    return out


def write_config_snapshot(cfg: PipelineConfig, work: Path):
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.snapshot").write_text(dump_config(cfg), encoding="utf-8")
