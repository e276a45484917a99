"""Greedy, beam and ancestral-sampling decoders over the copy-generator model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS
from .model import PROB_FLOOR, ModelParams, decode_step, encode, initial_attentional

DEFAULT_BEAM = 5


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float = 0.0
    finished: bool = False
    step_logprobs: list[float] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list, repr=False)
    gammas: list[float] = field(default_factory=list, repr=False)

    @property
    def normalized(self) -> float:
        return self.logprob / max(len(self.tokens), 1)

    def output(self) -> list[int]:
        """Tokens without the final EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 5


def _log(p):
    return np.log(np.maximum(p, PROB_FLOOR))


def _run_batch(params: ModelParams, src, max_len: int, choose, record=False) -> list[Hypothesis]:
    """Decode a (B, M) batch, picking each next token with ``choose(P)``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src = np.asarray(src, dtype=np.int64)
    if src.ndim == 1:
        src = src[None]
    B = src.shape[0]
    enc = encode(params, src)
    state, att = enc.init, initial_attentional(params, B)
    prev = np.full(B, BOS, dtype=np.int64)
    hyps = [Hypothesis([]) for _ in range(B)]
    live = np.ones(B, dtype=bool)
    rows = np.arange(B)
    for _ in range(max_len):
        dist, state, att = decode_step(params, state, prev, enc, att)
        tok = choose(dist.p)
        lp = _log(dist.p[rows, tok])
        for b in np.flatnonzero(live):
            h = hyps[b]
            h.tokens.append(int(tok[b]))
            h.step_logprobs.append(float(lp[b]))
            h.logprob += float(lp[b])
            if record:
                h.attention.append(dist.attention[b].copy())
                h.gammas.append(float(dist.gamma[b]))
            if tok[b] == EOS:
                h.finished = True
                live[b] = False
        if not live.any():
            break
        prev = tok
    return hyps


def greedy_batch(params: ModelParams, src, max_len: int, record=False) -> list[Hypothesis]:
    return _run_batch(params, src, max_len, lambda p: p.argmax(axis=1), record)


def greedy(params: ModelParams, src, max_len: int | None = None, record=False) -> Hypothesis:
    """Argmax decoding; ties go to the lowest id."""
    if max_len is None:
        max_len = default_max_len(len(src))
    return greedy_batch(params, np.asarray(src)[None], max_len, record)[0]


def sample_batch(params: ModelParams, src, max_len: int, rng, temperature: float = 1.0) -> list[Hypothesis]:
    """Ancestral sampling; log-probabilities are always those of the untempered model."""
    def choose(p):
        if temperature == 0:
            return p.argmax(axis=1)
        q = p if temperature == 1 else p ** (1.0 / temperature)
        cdf = np.cumsum(q, axis=1)
        u = rng.random(len(p)) * cdf[:, -1]
        tok = (cdf <= u[:, None]).sum(axis=1)
        return np.minimum(tok, p.shape[1] - 1)

    return _run_batch(params, src, max_len, choose)


def sample(params: ModelParams, src, max_len: int | None = None, seed: int = 0, temperature: float = 1.0) -> Hypothesis:
    if max_len is None:
        max_len = default_max_len(len(src))
    rng = np.random.default_rng(seed)
    return sample_batch(params, np.asarray(src)[None], max_len, rng, temperature)[0]


def beam(params: ModelParams, src, k: int = DEFAULT_BEAM, max_len: int | None = None) -> tuple[Hypothesis, list[Hypothesis]]:
    """Beam search keeping the ``k`` best partial outputs by cumulative log-probability.

    Finished hypotheses leave the beam. The final ranking (finished plus
    whatever is still live at ``max_len``) uses log-probability divided by
    length. Returns the best hypothesis and the ranked top-k list.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    src = np.asarray(src, dtype=np.int64)
    if max_len is None:
        max_len = default_max_len(len(src))
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    enc1 = encode(params, src[None])
    live = [Hypothesis([])]
    states = enc1.init
    att = initial_attentional(params, 1)
    finished: list[Hypothesis] = []
    for step in range(max_len):
        n = len(live)
        enc = _tile(enc1, n)
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live], dtype=np.int64)
        dist, new_states, new_att = decode_step(params, states, prev, enc, att)
        logp = _log(dist.p)
        total = np.array([h.logprob for h in live])[:, None] + logp
        V = logp.shape[1]
        flat = total.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))[:k]
        survivors = []
        for idx in order:
            b, tok = divmod(int(idx), V)
            parent = live[b]
            h = Hypothesis(
                parent.tokens + [tok],
                float(flat[idx]),
                tok == EOS,
                parent.step_logprobs + [float(logp[b, tok])],
            )
            if h.finished:
                finished.append(h)
            else:
                survivors.append((b, h))
        if not survivors:
            live = []
            break
        idx = np.array([b for b, _ in survivors])
        live = [h for _, h in survivors]
        states = [(hs[idx], cs[idx]) for hs, cs in new_states]
        att = new_att[idx]
    pool = finished + live
    ranked = sorted(pool, key=lambda h: -h.normalized)[:k]
    return ranked[0], ranked


def _tile(enc, n):
    if enc.H.shape[0] == n:
        return enc
    rep = lambda x: np.repeat(x, n, axis=0)
    return type(enc)(
        rep(enc.src), rep(enc.H), rep(enc.K), [(rep(h), rep(c)) for h, c in enc.init],
        None if enc.copy_mask is None else rep(enc.copy_mask),
    )
