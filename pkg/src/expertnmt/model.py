"""Bidirectional LSTM encoder, attentional LSTM decoder and copy-generator output.

All tensors are float64 numpy arrays held in ``ModelParams.tensors``. The
embedding matrix ``E`` is the only vocabulary-sized weight: it embeds
source and target tokens and, transposed, projects decoder states onto
the vocabulary. Gradients are computed by an explicit reverse pass over
the recorded forward graph (:func:`backward`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, MARKER_IDS

PROB_FLOOR = 1e-12
INIT_RANGE = 0.1
FORGET_BIAS = 1.0


class ProbabilityFloorWarning(RuntimeWarning):
    """A gold token had probability below the floor and was clamped."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 64
    layers: int = 1
    dropout: float = 0.2
    input_feed: bool = True
    copy: bool = True
    mask_markers: bool = False

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = cfg.d, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"E": (V, d)}
    for l in range(cfg.layers):
        for side in ("fwd", "bwd"):
            shapes[f"enc.{l}.{side}.W"] = (2 * d, 4 * d)
            shapes[f"enc.{l}.{side}.b"] = (4 * d,)
    for l in range(cfg.layers):
        n_in = 2 * d if (l == 0 and cfg.input_feed) else d
        shapes[f"dec.{l}.W"] = (n_in + d, 4 * d)
        shapes[f"dec.{l}.b"] = (4 * d,)
    shapes.update({
        "att.Wq": (d, d),
        "att.Wk": (d, d),
        "att.b": (d,),
        "att.v": (d,),
        "out.Wc": (2 * d, d),
        "out.bc": (d,),
        "gate.w": (d,),
        "gate.b": (1,),
        "out.bias": (V,),
    })
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(shapes) != list(self.tensors):
            raise ValueError("tensor names do not match the model config")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) for every tensor, then forget-gate biases set to 1."""
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        for name, shape in param_shapes(cfg).items()
    }
    d = cfg.d
    for name, t in tensors.items():
        if name.startswith(("enc.", "dec.")) and name.endswith(".b"):
            t[d : 2 * d] = FORGET_BIAS
    return ModelParams(cfg, tensors)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _cell(zx, h, c, Wh):
    z = zx + h @ Wh
    d = h.shape[1]
    i = _sigmoid(z[:, :d])
    f = _sigmoid(z[:, d : 2 * d])
    g = np.tanh(z[:, 2 * d : 3 * d])
    o = _sigmoid(z[:, 3 * d :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (h, c, i, f, g, o, tc)


def _cell_back(dh, dc, cache, Wh):
    h, c, i, f, g, o, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i), dc * c * f * (1.0 - f), dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)],
        axis=1,
    )
    return dz, dz @ Wh.T, dc * f


def _lstm_seq(x, W, b, reverse):
    B, M, n_in = x.shape
    d = W.shape[1] // 4
    zx = x @ W[:n_in] + b
    Wh = W[n_in:]
    h = np.zeros((B, d))
    c = np.zeros((B, d))
    hs = np.empty((B, M, d))
    cs = np.empty((B, M, d))
    caches = [None] * M
    for t in (range(M - 1, -1, -1) if reverse else range(M)):
        h, c, caches[t] = _cell(zx[:, t], h, c, Wh)
        hs[:, t] = h
        cs[:, t] = c
    return hs, cs, caches


def _lstm_seq_back(dhs, dh_last, dc_last, x, W, caches, reverse, gW, gb):
    B, M, n_in = x.shape
    Wh = W[n_in:]
    dz_all = np.empty((B, M, W.shape[1]))
    dh, dc = dh_last, dc_last
    for t in (range(M) if reverse else range(M - 1, -1, -1)):
        dz, dh, dc = _cell_back(dhs[:, t] + dh, dc, caches[t], Wh)
        gW[n_in:] += caches[t][0].T @ dz
        dz_all[:, t] = dz
    flat = dz_all.reshape(B * M, -1)
    gW[:n_in] += x.reshape(B * M, n_in).T @ flat
    gb += flat.sum(axis=0)
    return dz_all @ W[:n_in].T


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


@dataclass
class EncoderStates:
    """Per-position contexts ``H`` (B, M, d) plus decoder initial state."""

    src: np.ndarray
    H: np.ndarray
    K: np.ndarray
    init: list[tuple[np.ndarray, np.ndarray]]
    copy_mask: np.ndarray | None = None
    cache: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.H.shape[1]


def encode(params: ModelParams, src, train: bool = False, rng=None) -> EncoderStates:
    """Run the bidirectional encoder; direction outputs are summed per position."""
    cfg, T = params.config, params.tensors
    src = np.asarray(src, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if src.shape[1] == 0:
        raise ValueError("cannot encode an empty source sequence")
    x = T["E"][src]
    init = []
    cache = []
    for l in range(cfg.layers):
        mask = None
        if l > 0 and train and cfg.dropout > 0:
            mask = _dropout_mask(rng, x.shape, cfg.dropout)
            x = x * mask
        hf, cf, cache_f = _lstm_seq(x, T[f"enc.{l}.fwd.W"], T[f"enc.{l}.fwd.b"], False)
        hb, cb, cache_b = _lstm_seq(x, T[f"enc.{l}.bwd.W"], T[f"enc.{l}.bwd.b"], True)
        init.append((hf[:, -1] + hb[:, 0], cf[:, -1] + cb[:, 0]))
        cache.append((x, mask, cache_f, cache_b))
        x = hf + hb
    copy_mask = None
    if cfg.mask_markers:
        copy_mask = (~np.isin(src, list(MARKER_IDS))).astype(float)
    return EncoderStates(src, x, x @ T["att.Wk"], init, copy_mask, cache)


@dataclass
class StepDistribution:
    """One decoding step; arrays carry a leading batch axis."""

    p_gen: np.ndarray
    p_copy: np.ndarray
    gamma: np.ndarray
    p: np.ndarray
    attention: np.ndarray


def copy_project(attention, src, V: int) -> np.ndarray:
    """Scatter attention weights onto the vocabulary ids they point at."""
    a = np.asarray(attention, dtype=float)
    src = np.asarray(src, dtype=np.int64)
    squeeze = a.ndim == 1
    if squeeze:
        a, src = a[None], src[None]
    out = np.zeros((a.shape[0], V))
    np.add.at(out, (np.arange(a.shape[0])[:, None], src), a)
    return out[0] if squeeze else out


def _step(params, enc, y_prev, att_prev, state, train=False, rng=None):
    """Shared forward for one decoder step; returns the intermediates dict."""
    cfg, T = params.config, params.tensors
    d = cfg.d
    emb = T["E"][y_prev]
    x = np.concatenate([emb, att_prev], axis=1) if cfg.input_feed else emb
    layers = []
    new_state = []
    for l in range(cfg.layers):
        mask = None
        if l > 0 and train and cfg.dropout > 0:
            mask = _dropout_mask(rng, x.shape, cfg.dropout)
            x = x * mask
        W = T[f"dec.{l}.W"]
        n_in = x.shape[1]
        h, c, cache = _cell(x @ W[:n_in] + T[f"dec.{l}.b"], *state[l], W[n_in:])
        layers.append((x, mask, cache))
        new_state.append((h, c))
        x = h
    h = x
    q = h @ T["att.Wq"] + T["att.b"]
    u = np.tanh(q[:, None, :] + enc.K)
    a = _softmax(u @ T["att.v"])
    ctx = np.einsum("bm,bmd->bd", a, enc.H)
    hc = np.concatenate([ctx, h], axis=1)
    att = np.tanh(hc @ T["out.Wc"] + T["out.bc"])
    p_gen = _softmax(att @ T["E"].T + T["out.bias"])
    if cfg.copy:
        gamma = _sigmoid(att @ T["gate.w"] + T["gate.b"][0])
    else:
        gamma = np.ones(len(y_prev))
    if enc.copy_mask is not None:
        am = a * enc.copy_mask
        cw = am / am.sum(axis=1, keepdims=True)
    else:
        cw = a
    return {
        "y_prev": y_prev, "att_prev": att_prev, "layers": layers, "h": h, "u": u, "a": a,
        "cw": cw, "ctx": ctx, "hc": hc, "att": att, "p_gen": p_gen, "gamma": gamma,
    }, new_state


def _mixture(params, enc, s) -> StepDistribution:
    p_copy = copy_project(s["cw"], enc.src, params.config.vocab_size)
    g = s["gamma"][:, None]
    return StepDistribution(s["p_gen"], p_copy, s["gamma"], g * s["p_gen"] + (1.0 - g) * p_copy, s["a"])


def initial_attentional(params: ModelParams, batch: int) -> np.ndarray:
    return np.zeros((batch, params.config.d))


def decode_step(params: ModelParams, state, prev_ids, enc: EncoderStates, prev_att):
    """Advance the decoder one token; returns (StepDistribution, state, attentional vector)."""
    cfg = params.config
    prev_ids = np.asarray(prev_ids, dtype=np.int64).reshape(-1)
    if prev_att.shape != (len(prev_ids), cfg.d) or len(state) != cfg.layers:
        raise ValueError("decoder state does not match the model config")
    if enc.H.shape[0] != len(prev_ids):
        raise ValueError("batch size of encoder states and previous ids differ")
    s, new_state = _step(params, enc, prev_ids, prev_att, state)
    return _mixture(params, enc, s), new_state, s["att"]


@dataclass
class Graph:
    """Recorded teacher-forced forward pass; input to :func:`backward`."""

    params: ModelParams
    enc: EncoderStates
    tgt_out: np.ndarray
    weights: np.ndarray
    steps: list
    logp: np.ndarray
    p_copy_gold: np.ndarray
    clamped: np.ndarray
    loss: float


def forward_loss(params: ModelParams, src, tgt_in, tgt_out, weights, train=False, rng=None) -> Graph:
    """Weighted negative log-likelihood ``sum(w * -log P(gold))`` over a batch.

    ``src`` is (B, M); ``tgt_in``/``tgt_out``/``weights`` are (B, T). Steps with
    zero weight (padding) still run but contribute nothing.
    """
    src = np.asarray(src, dtype=np.int64)
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    tgt_out = np.asarray(tgt_out, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    enc = encode(params, src, train, rng)
    B, T_len = tgt_out.shape
    att = initial_attentional(params, B)
    state = enc.init
    steps = []
    logp = np.empty((B, T_len))
    pc_gold = np.empty((B, T_len))
    clamped = np.zeros((B, T_len), dtype=bool)
    rows = np.arange(B)
    for t in range(T_len):
        s, state = _step(params, enc, tgt_in[:, t], att, state, train, rng)
        gold = tgt_out[:, t]
        pcg = (s["cw"] * (src == gold[:, None])).sum(axis=1)
        pgg = s["p_gen"][rows, gold]
        p = s["gamma"] * pgg + (1.0 - s["gamma"]) * pcg
        s["pg_gold"], s["p_gold"] = pgg, p
        clamped[:, t] = p < PROB_FLOOR
        logp[:, t] = np.log(np.maximum(p, PROB_FLOOR))
        pc_gold[:, t] = pcg
        steps.append(s)
        att = s["att"]
    loss = float(-(weights * logp).sum())
    return Graph(params, enc, tgt_out, weights, steps, logp, pc_gold, clamped, loss)


def backward(params: ModelParams, graph: Graph) -> dict[str, np.ndarray]:
    """Exact gradient of ``graph.loss`` with respect to every tensor."""
    cfg, T = params.config, params.tensors
    d, L = cfg.d, cfg.layers
    grads = zero_grads(params)
    gE = grads["E"]
    E = T["E"]
    enc = graph.enc
    src, H = enc.src, enc.H
    B = src.shape[0]
    rows = np.arange(B)
    dH = np.zeros_like(H)
    dK = np.zeros_like(H)
    d_att_next = np.zeros((B, d))
    dstate = [(np.zeros((B, d)), np.zeros((B, d))) for _ in range(L)]

    for t in range(len(graph.steps) - 1, -1, -1):
        s = graph.steps[t]
        gold = graph.tgt_out[:, t]
        w = graph.weights[:, t]
        dP = np.where(graph.clamped[:, t], 0.0, -w / np.maximum(s["p_gold"], PROB_FLOOR))
        gamma, att, p_gen = s["gamma"], s["att"], s["p_gen"]
        d_pg_gold = dP * gamma
        scale = d_pg_gold * s["pg_gold"]
        dlogits = -p_gen * scale[:, None]
        dlogits[rows, gold] += scale
        gE += dlogits.T @ att
        grads["out.bias"] += dlogits.sum(axis=0)
        datt = dlogits @ E + d_att_next
        da = np.zeros_like(s["a"])
        if cfg.copy:
            dgamma = dP * (s["pg_gold"] - graph.p_copy_gold[:, t])
            dzg = dgamma * gamma * (1.0 - gamma)
            grads["gate.w"] += att.T @ dzg
            grads["gate.b"][0] += dzg.sum()
            datt += dzg[:, None] * T["gate.w"]
            dcw = (dP * (1.0 - gamma))[:, None] * (src == gold[:, None])
            if enc.copy_mask is not None:
                cw = s["cw"]
                z = (s["a"] * enc.copy_mask).sum(axis=1, keepdims=True)
                da += enc.copy_mask * (dcw - (cw * dcw).sum(axis=1, keepdims=True)) / z
            else:
                da += dcw
        dpre = datt * (1.0 - att * att)
        grads["out.Wc"] += s["hc"].T @ dpre
        grads["out.bc"] += dpre.sum(axis=0)
        dhc = dpre @ T["out.Wc"].T
        dctx, dh = dhc[:, :d], dhc[:, d:]
        a, u = s["a"], s["u"]
        da += np.einsum("bd,bmd->bm", dctx, H)
        dH += a[:, :, None] * dctx[:, None, :]
        ds = a * (da - (a * da).sum(axis=1, keepdims=True))
        grads["att.v"] += np.einsum("bm,bmd->d", ds, u)
        dpu = ds[:, :, None] * T["att.v"] * (1.0 - u * u)
        dq = dpu.sum(axis=1)
        dK += dpu
        grads["att.Wq"] += s["h"].T @ dq
        grads["att.b"] += dq.sum(axis=0)
        dh = dh + dq @ T["att.Wq"].T

        for l in range(L - 1, -1, -1):
            x, mask, cache = s["layers"][l]
            W = T[f"dec.{l}.W"]
            n_in = x.shape[1]
            dz, dh_prev, dc_prev = _cell_back(dh + dstate[l][0], dstate[l][1], cache, W[n_in:])
            grads[f"dec.{l}.W"][n_in:] += cache[0].T @ dz
            grads[f"dec.{l}.W"][:n_in] += x.T @ dz
            grads[f"dec.{l}.b"] += dz.sum(axis=0)
            dstate[l] = (dh_prev, dc_prev)
            dx = dz @ W[:n_in].T
            if mask is not None:
                dx = dx * mask
            if l > 0:
                dh = dx
            else:
                np.add.at(gE, s["y_prev"], dx[:, :d])
                d_att_next = dx[:, d:] if cfg.input_feed else np.zeros((B, d))

    grads["att.Wk"] += H.reshape(-1, d).T @ dK.reshape(-1, d)
    dout = dH + dK @ T["att.Wk"].T
    for l in range(L - 1, -1, -1):
        x, mask, cache_f, cache_b = enc.cache[l]
        dh0, dc0 = dstate[l]
        dx = _lstm_seq_back(dout, dh0, dc0, x, T[f"enc.{l}.fwd.W"], cache_f, False,
                            grads[f"enc.{l}.fwd.W"], grads[f"enc.{l}.fwd.b"])
        dx += _lstm_seq_back(dout, dh0, dc0, x, T[f"enc.{l}.bwd.W"], cache_b, True,
                             grads[f"enc.{l}.bwd.W"], grads[f"enc.{l}.bwd.b"])
        if mask is not None:
            dx = dx * mask
        if l > 0:
            dout = dx
        else:
            np.add.at(gE, src, dx)
    return grads


def teacher_forcing_arrays(targets, eos: int):
    """Pad target id lists into (tgt_in, tgt_out, mask) arrays; EOS is appended."""
    T_len = max(len(t) for t in targets) + 1
    B = len(targets)
    tgt_in = np.zeros((B, T_len), dtype=np.int64)
    tgt_out = np.zeros((B, T_len), dtype=np.int64)
    mask = np.zeros((B, T_len))
    for b, t in enumerate(targets):
        seq = list(t) + [eos]
        tgt_out[b, : len(seq)] = seq
        tgt_in[b, : len(seq)] = [BOS] + seq[:-1]
        mask[b, : len(seq)] = 1.0
    return tgt_in, tgt_out, mask


def output_arrays(outputs):
    """Like :func:`teacher_forcing_arrays` but for sequences already holding their final token."""
    T_len = max(max(len(o) for o in outputs), 1)
    B = len(outputs)
    tgt_in = np.zeros((B, T_len), dtype=np.int64)
    tgt_out = np.zeros((B, T_len), dtype=np.int64)
    mask = np.zeros((B, T_len))
    for b, seq in enumerate(outputs):
        n = len(seq)
        tgt_out[b, :n] = seq
        tgt_in[b, :n] = ([BOS] + list(seq[:-1]))[:n]
        mask[b, :n] = 1.0
    tgt_in[:, 0] = BOS
    return tgt_in, tgt_out, mask


def forward_logprob(params: ModelParams, src, tgt) -> tuple[float, list[StepDistribution]]:
    """Teacher-forced log P(tgt | src) for one sentence.

    ``tgt`` is the output sequence as the decoder emits it (normally ending
    in EOS); BOS is prepended internally.
    """
    tgt = list(tgt)
    if not tgt:
        return 0.0, []
    tgt_in, tgt_out, mask = output_arrays([tgt])
    graph = forward_loss(params, np.asarray(src)[None, :], tgt_in, tgt_out, mask)
    if graph.clamped.any():
        warnings.warn(
            f"{int(graph.clamped.sum())} gold probabilities clamped to {PROB_FLOOR}",
            ProbabilityFloorWarning,
            stacklevel=2,
        )
    dists = []
    for s in graph.steps:
        dist = _mixture(params, graph.enc, s)
        dists.append(StepDistribution(dist.p_gen[0], dist.p_copy[0], dist.gamma[0], dist.p[0], dist.attention[0]))
    return float(graph.logp.sum()), dists
