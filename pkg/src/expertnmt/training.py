"""Cross-entropy training, self-critical policy gradient and gradient checking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import EOS, Vocabulary, ids_to_words, make_batches
from .decode import greedy_batch, sample_batch
from .expert import AnnotationRecord
from .model import (
    ModelParams,
    backward,
    forward_loss,
    output_arrays,
    teacher_forcing_arrays,
)
from .rewards import RewardConfig, reward

log = logging.getLogger(__name__)

LR_START = 1e-3
LR_FLOOR = 2.5e-4
FINETUNE_LR = 2e-4
RL_LR = 1e-4
RL_LENGTH_RATIO = 2

_STAGE_CODES = {"xent": 1, "finetune": 2, "rl": 3, "eval": 4}


class TrainingError(RuntimeError):
    pass


@dataclass
class Example:
    src: list[int]
    tgt: list[int]
    records: list[AnnotationRecord] = field(default_factory=list)
    reference: list[str] = field(default_factory=list)


def stage_rng(seed: int, stage: str, epoch: int, batch: int = 0) -> np.random.Generator:
    """Generator keyed on (seed, stage, epoch, batch) so runs resume bit-identically."""
    return np.random.default_rng([seed, _STAGE_CODES[stage], epoch, batch])


class Adam:
    def __init__(self, params: ModelParams, lr: float = LR_START, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> tuple[dict, dict]:
        tensors = {f"adam.m/{k}": v for k, v in self.m.items()}
        tensors.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return {"adam.t": self.t, "adam.lr": repr(self.lr)}, tensors

    def load_state(self, meta: dict, tensors: dict):
        self.t = int(meta["adam.t"])
        self.lr = float(meta["adam.lr"])
        for k in self.m:
            self.m[k] = tensors[f"adam.m/{k}"].copy()
            self.v[k] = tensors[f"adam.v/{k}"].copy()


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _batches(examples: Sequence[Example], batch_size: int, seed: int):
    pairs = [(ex.src, ex.tgt) for ex in examples]
    return make_batches(pairs, batch_size, seed)


def batch_xent(params: ModelParams, src, targets, train=False, rng=None):
    """Token-averaged cross-entropy graph for one batch."""
    tgt_in, tgt_out, mask = teacher_forcing_arrays(targets, EOS)
    return forward_loss(params, src, tgt_in, tgt_out, mask / mask.sum(), train, rng), mask.sum()


def corpus_nll(params: ModelParams, examples: Sequence[Example], batch_size: int = 64) -> tuple[float, int]:
    """Total negative log-likelihood and token count, evaluation mode."""
    total, tokens = 0.0, 0
    for batch in _batches(examples, batch_size, 0):
        graph, n = batch_xent(params, batch.src, batch.tgt)
        total += graph.loss * n
        tokens += int(n)
    return total, tokens


def perplexity(params: ModelParams, examples: Sequence[Example]) -> float:
    total, tokens = corpus_nll(params, examples)
    return math.exp(total / tokens)


@dataclass
class Schedule:
    """Halve the rate after an epoch without validation improvement, down to ``floor``."""

    start: float = LR_START
    floor: float = LR_FLOOR
    anneal: bool = True


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    reward: float | None = None
    hit: float | None = None
    lr: float = 0.0

    def line(self) -> str:
        fmt = lambda x: "-" if x is None else f"{x:.6f}"
        return f"{self.epoch}\t{self.split}\t{self.loss:.6f}\t{fmt(self.reward)}\t{fmt(self.hit)}\t{self.lr:g}"


EpochCallback = Callable[..., None]


def train_xent(
    params: ModelParams,
    examples: Sequence[Example],
    optimizer: Adam,
    schedule: Schedule,
    epochs: int,
    batch_size: int = 32,
    seed: int = 1,
    dev: Sequence[Example] = (),
    stage: str = "xent",
    clip: float = 5.0,
    start_epoch: int = 0,
    best_ppl: float = math.inf,
    on_epoch_end: EpochCallback | None = None,
) -> list[EpochLog]:
    """Teacher-forced maximum likelihood with Adam and validation-driven annealing.

    ``on_epoch_end(epoch, records, best_ppl=..., improved=...)`` runs after
    every epoch, e.g. for checkpointing.
    """
    if not examples:
        raise TrainingError("no training examples")
    history: list[EpochLog] = []
    for epoch in range(start_epoch, epochs):
        total = tokens = 0.0
        for bi, batch in enumerate(_batches(examples, batch_size, int(stage_rng(seed, stage, epoch).integers(2**31)))):
            graph, n = batch_xent(params, batch.src, batch.tgt, train=True, rng=stage_rng(seed, stage, epoch, bi + 1))
            if not math.isfinite(graph.loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi} (sentences {batch.indices[:5]}...)")
            grads = backward(params, graph)
            clip_gradients(grads, clip)
            optimizer.step(params, grads)
            total += graph.loss * n
            tokens += n
        records = [EpochLog(epoch + 1, f"{stage}-train", total / tokens, lr=optimizer.lr)]
        ppl = perplexity(params, dev) if dev else math.exp(total / tokens)
        if dev:
            records.append(EpochLog(epoch + 1, f"{stage}-dev-ppl", ppl, lr=optimizer.lr))
        improved = ppl < best_ppl
        best_ppl = min(best_ppl, ppl)
        if schedule.anneal and not improved:
            optimizer.lr = max(optimizer.lr / 2.0, schedule.floor)
        for r in records:
            log.info(r.line())
        history.extend(records)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, records, best_ppl=best_ppl, improved=improved)
    return history


def self_critical_step(
    params: ModelParams,
    batch: Sequence[Example],
    config: RewardConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
    marker: str = "@@",
    samples: int = 1,
):
    """One self-critical policy-gradient estimate for a batch with equal source lengths.

    Each sentence gets ``samples`` ancestral samples and one greedy decode
    (no gradient). The surrogate loss is ``-(r(sample) - r(greedy)) *
    log p(sample)`` averaged over samples. Returns (grads, mean advantage,
    stats dict with per-sample rewards and HIT values).
    """
    src = np.array([ex.src for ex in batch], dtype=np.int64)
    max_len = RL_LENGTH_RATIO * src.shape[1]
    base = greedy_batch(params, src, max_len)
    base_r = [
        reward(ids_to_words(h.tokens, vocab, marker), ex.reference, ex.records, config).r
        for h, ex in zip(base, batch)
    ]
    outputs, advantages, rewards, hits, srcs = [], [], [], [], []
    for _ in range(samples):
        for h, ex, b_r, row in zip(sample_batch(params, src, max_len, rng), batch, base_r, src):
            rv = reward(ids_to_words(h.tokens, vocab, marker), ex.reference, ex.records, config)
            outputs.append(h.tokens)
            advantages.append(rv.r - b_r)
            rewards.append(rv.r)
            if rv.hit is not None:
                hits.append(rv.hit)
            srcs.append(row)
    adv = np.array(advantages)
    tgt_in, tgt_out, mask = output_arrays(outputs)
    weights = mask * (adv / len(outputs))[:, None]
    graph = forward_loss(params, np.array(srcs), tgt_in, tgt_out, weights)
    grads = backward(params, graph)
    stats = {"rewards": rewards, "hits": hits, "baseline": base_r, "loss": graph.loss,
             "logp": (graph.logp * mask).sum(axis=1)}
    return grads, float(adv.mean()), stats


def mean_sample_reward(
    params: ModelParams,
    examples: Sequence[Example],
    config: RewardConfig,
    vocab: Vocabulary,
    seed: int = 0,
    marker: str = "@@",
    batch_size: int = 64,
) -> tuple[float, float | None]:
    """Monte-Carlo estimate of the expected reward (and HIT) under the model."""
    rewards, hits = [], []
    for bi, batch in enumerate(_batches(examples, batch_size, 0)):
        rng = stage_rng(seed, "eval", 0, bi)
        exs = [examples[i] for i in batch.indices]
        for h, ex in zip(sample_batch(params, batch.src, RL_LENGTH_RATIO * batch.src.shape[1], rng), exs):
            rv = reward(ids_to_words(h.tokens, vocab, marker), ex.reference, ex.records, config)
            rewards.append(rv.r)
            if rv.hit is not None:
                hits.append(rv.hit)
    return float(np.mean(rewards)), (float(np.mean(hits)) if hits else None)


def train_rl(
    params: ModelParams,
    examples: Sequence[Example],
    optimizer: Adam,
    config: RewardConfig,
    vocab: Vocabulary,
    epochs: int,
    batch_size: int = 32,
    seed: int = 1,
    marker: str = "@@",
    samples: int = 1,
    clip: float = 5.0,
    start_epoch: int = 0,
    on_epoch_end: EpochCallback | None = None,
) -> list[EpochLog]:
    if not examples:
        raise TrainingError("no training examples")
    history = []
    for epoch in range(start_epoch, epochs):
        rewards, hits, losses = [], [], []
        order_seed = int(stage_rng(seed, "rl", epoch).integers(2**31))
        for bi, batch in enumerate(_batches(examples, batch_size, order_seed)):
            exs = [examples[i] for i in batch.indices]
            grads, _, stats = self_critical_step(
                params, exs, config, stage_rng(seed, "rl", epoch, bi + 1), vocab, marker, samples
            )
            if not math.isfinite(stats["loss"]):
                raise TrainingError(f"non-finite RL loss at epoch {epoch}, batch {bi}")
            clip_gradients(grads, clip)
            optimizer.step(params, grads)
            rewards += stats["rewards"]
            hits += stats["hits"]
            losses.append(stats["loss"])
        rec = EpochLog(
            epoch + 1, "rl-train", float(np.mean(losses)), float(np.mean(rewards)),
            float(np.mean(hits)) if hits else None, optimizer.lr,
        )
        log.info(rec.line())
        history.append(rec)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, [rec])
    return history


def finite_diff_check(params: ModelParams, src, targets, eps: float = 1e-4, tiny: float = 1e-8):
    """Compare analytic cross-entropy gradients with central differences on every coordinate.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, tiny)``.
    Returns (max relative error, {tensor name: max relative error}).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    src = np.asarray(src, dtype=np.int64)
    analytic = backward(params, batch_xent(params, src, targets)[0])
    per_tensor = {}
    for name, tensor in params.tensors.items():
        worst = 0.0
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + eps
            up = batch_xent(params, src, targets)[0].loss
            tensor[idx] = old - eps
            down = batch_xent(params, src, targets)[0].loss
            tensor[idx] = old
            numeric = (up - down) / (2 * eps)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), tiny))
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor
