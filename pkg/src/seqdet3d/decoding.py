"""Autoregressive decoding with per-position vocabulary constraints.

Interior position ``p`` counts tokens emitted after START. At object
boundaries (``p % 10 == 0``) only category tokens and END are legal; inside
an object only the attribute due at that offset is. When fewer than 10 slots
remain before T_max, END is the only legal boundary token, so decoders never
produce a partial object.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box3D
from .model import BEVFeatures, ModelParams, decoder_step, encode_points, init_cache
from .tokenizer import END, PAD, START, TOKENS_PER_OBJECT, VocabLayout, decode_scene


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # greedy | beam | nucleus
    width: int = 4
    top_p: float = 0.95
    top_k: int = 50
    temperature: float = 1.0
    seed: int = 0
    t_max: int | None = None  # None: the model's T_max
    constrain: bool = True

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "nucleus"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.width < 1:
            raise ValueError("beam width must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DecodeConfig":
        """Parse ``greedy``, ``beam:K`` or ``nucleus:P,K,T``."""
        name, _, args = text.partition(":")
        if name == "greedy" and not args:
            return cls("greedy", seed=seed)
        if name == "beam":
            return cls("beam", width=int(args or 4), seed=seed)
        if name == "nucleus":
            parts = [p for p in args.split(",") if p] if args else []
            p = float(parts[0]) if len(parts) > 0 else 0.95
            k = int(parts[1]) if len(parts) > 1 else 50
            t = float(parts[2]) if len(parts) > 2 else 1.0
            return cls("nucleus", top_p=p, top_k=k, temperature=t, seed=seed)
        raise ValueError(f"bad strategy {text!r}; expected greedy, beam:K or nucleus:P,K,T")

    def label(self) -> str:
        if self.strategy == "beam":
            return f"beam:{self.width}"
        if self.strategy == "nucleus":
            return f"nucleus:{self.top_p:g},{self.top_k},{self.temperature:g}"
        return "greedy"


def legal_mask(position: int, seq_len: int, layout: VocabLayout, t_max: int, constrain: bool = True) -> np.ndarray:
    """Boolean (V,) mask for the next token given the interior position and current length."""
    if constrain:
        m = layout.allowed_mask(position)
    else:
        m = np.ones(layout.vocab_size, dtype=bool)
        m[[PAD, START]] = False
    # START + body + END must fit in t_max; unconstrained runs are cut afterwards
    if constrain and position % TOKENS_PER_OBJECT == 0 and seq_len + TOKENS_PER_OBJECT + 1 > t_max:
        m = np.zeros(layout.vocab_size, dtype=bool)
        m[END] = True
    return m


def constrain_logits(
    logits: np.ndarray, position: int, layout: VocabLayout, seq_len: int | None = None, t_max: int | None = None
) -> np.ndarray:
    """Set logits of tokens illegal at ``position`` to -inf."""
    if seq_len is None or t_max is None:
        m = layout.allowed_mask(position)
    else:
        m = legal_mask(position, seq_len, layout, t_max)
    return np.where(m, logits, -np.inf)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - (np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)) + m)


def _finish(seq: list[int]) -> list[int]:
    if seq[-1] == END:
        return seq
    body = seq[1:]
    body = body[: len(body) - len(body) % TOKENS_PER_OBJECT]
    return [START] + body + [END]


def _t_max(cfg: DecodeConfig, params: ModelParams) -> int:
    return min(cfg.t_max or params.config.decoder.t_max, params.config.decoder.t_max)


def _prefill(features: BEVFeatures, params: ModelParams, prefix: list[int]):
    cache = init_cache(features, params)
    logits = None
    for tok in [START] + list(prefix):
        logits, cache = decoder_step(features, cache, np.full(features.batch, tok), params)
    return logits, cache


def nucleus_filter(logits: np.ndarray, top_p: float, top_k: int | None, temperature: float = 1.0):
    """Return (token ids, probabilities) of the renormalized nucleus of one row."""
    z = logits / temperature
    legal = np.flatnonzero(np.isfinite(z))
    order = legal[np.argsort(-z[legal], kind="stable")]
    if top_k is not None:
        order = order[:top_k]
    zz = z[order]
    p = np.exp(zz - zz[0])
    p /= p.sum()
    cum = np.cumsum(p)
    n = min(int(np.searchsorted(cum, top_p)) + 1, len(order))
    keep = p[:n] / p[:n].sum()
    return order[:n], keep


def _sample(rng: np.random.Generator, ids: np.ndarray, probs: np.ndarray) -> int:
    cum = np.cumsum(probs)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return int(ids[min(i, len(ids) - 1)])


def sample_decode(
    features: BEVFeatures,
    params: ModelParams,
    layout: VocabLayout,
    cfg: DecodeConfig,
    prefixes: list[list[int]] | None = None,
    rngs: list[np.random.Generator] | None = None,
) -> list[list[int]]:
    """Greedy or nucleus decoding of every row of a feature batch in lockstep."""
    bsz = features.batch
    t_max = _t_max(cfg, params)
    prefixes = prefixes or [[] for _ in range(bsz)]
    if len({len(p) for p in prefixes}) > 1:
        # unequal prefixes decode row by row
        return [
            sample_decode(features.row(i), params, layout, cfg, [prefixes[i]], None if rngs is None else [rngs[i]])[0]
            for i in range(bsz)
        ]
    prefix_len = len(prefixes[0])
    cache = init_cache(features, params)
    seqs = [[START] + list(p) for p in prefixes]
    # prefix tokens differ across rows, so feed column by column
    logits = None
    for t in range(prefix_len + 1):
        col = np.array([s[t] for s in seqs])
        logits, cache = decoder_step(features, cache, col, params)
    if cfg.strategy == "nucleus" and rngs is None:
        rngs = [np.random.default_rng([cfg.seed, i]) for i in range(bsz)] if bsz > 1 else [np.random.default_rng(cfg.seed)]
    live = list(range(bsz))
    while live:
        nxt = []
        for r, i in enumerate(live):
            seq = seqs[i]
            pos = len(seq) - 1
            if len(seq) >= t_max:
                continue
            m = legal_mask(pos, len(seq), layout, t_max, cfg.constrain)
            z = np.where(m, logits[r], -np.inf)
            if cfg.strategy == "nucleus":
                ids, probs = nucleus_filter(z, cfg.top_p, cfg.top_k, cfg.temperature)
                tok = _sample(rngs[i], ids, probs)
            else:
                tok = int(np.argmax(z))
            seq.append(tok)
            if tok != END and len(seq) < t_max:
                nxt.append(r)
        if not nxt:
            break
        rows = np.array(nxt)
        live = [live[r] for r in nxt]
        cache = cache.select(rows)
        # the cache carries the memory keys, so features are not re-read
        logits, cache = decoder_step(features, cache, np.array([seqs[i][-1] for i in live]), params)
    return [_finish(s) for s in seqs]


def greedy_decode(
    features: BEVFeatures, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig = DecodeConfig(), prefix=None
) -> list[int]:
    cfg = replace(cfg, strategy="greedy")
    return sample_decode(features, params, layout, cfg, [list(prefix or [])])[0]


def nucleus_decode(
    features: BEVFeatures, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig, prefix=None
) -> list[int]:
    cfg = replace(cfg, strategy="nucleus")
    return sample_decode(features, params, layout, cfg, [list(prefix or [])], [np.random.default_rng(cfg.seed)])[0]


@dataclass
class _Hyp:
    tokens: list[int]
    score: float  # total log-probability of generated tokens

    def normalized(self, prefix_len: int) -> float:
        return self.score / max(len(self.tokens) - 1 - prefix_len, 1)


def beam_decode(
    features: BEVFeatures, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig, prefix=None
) -> list[int]:
    """Beam search over constrained log-probabilities for a single scene.

    Finished hypotheses are frozen; the result is the finished hypothesis
    with the best length-normalized log-probability. Ties go to the lower
    token ID, then the lower beam index.
    """
    if features.batch != 1:
        raise ValueError("beam_decode works on one scene at a time")
    k = cfg.width
    t_max = _t_max(cfg, params)
    prefix = list(prefix or [])
    plen = len(prefix)
    logits, cache = _prefill(features, params, prefix)
    live = [_Hyp([START] + prefix, 0.0)]
    finished: list[_Hyp] = []
    while live and len(finished) < k:
        cands = []
        for bi, hyp in enumerate(live):
            seq = hyp.tokens
            m = legal_mask(len(seq) - 1, len(seq), layout, t_max, cfg.constrain)
            lp = _log_softmax(np.where(m, logits[bi], -np.inf))
            legal = np.flatnonzero(m)
            top = legal[np.argsort(-lp[legal], kind="stable")[:k]]
            for tok in top:
                cands.append((-(hyp.score + lp[tok]), int(tok), bi))
        cands.sort()  # best score first, then lower token ID, then lower beam index
        new_live, rows = [], []
        for neg, tok, bi in cands:
            h = _Hyp(live[bi].tokens + [tok], -neg)
            if tok == END or len(h.tokens) >= t_max:
                finished.append(h)
            else:
                new_live.append(h)
                rows.append(bi)
            if len(finished) >= k or len(new_live) >= k - len(finished):
                break
        if len(finished) >= k or not new_live:
            break
        cache = cache.select(rows)
        logits, cache = decoder_step(features, cache, np.array([h.tokens[-1] for h in new_live]), params)
        live = new_live
    pool = finished or live
    best = max(pool, key=lambda h: (h.normalized(plen), -pool.index(h)))
    return _finish(best.tokens)


def decode(features: BEVFeatures, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig, prefix=None) -> list[int]:
    if cfg.strategy == "beam":
        return beam_decode(features, params, layout, cfg, prefix)
    if cfg.strategy == "nucleus":
        return nucleus_decode(features, params, layout, cfg, prefix)
    return greedy_decode(features, params, layout, cfg, prefix)


def decode_many(
    features: BEVFeatures, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig, scene_seeds=None
) -> list[list[int]]:
    """Decode a batch of scenes. Greedy rows decode in lockstep; beam and nucleus go scene by scene."""
    if cfg.strategy == "greedy":
        return sample_decode(features, params, layout, cfg)
    out = []
    for i in range(features.batch):
        c = cfg if scene_seeds is None else replace(cfg, seed=int(scene_seeds[i]))
        out.append(decode(features.row(i), params, layout, c))
    return out


def detect(points, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig = DecodeConfig()) -> list[Box3D]:
    """Point cloud in, boxes out: encode, decode, detokenize. No scores, no NMS."""
    feats = encode_points([np.asarray(points, dtype=float).reshape(-1, 4)], params)
    return decode_scene(decode(feats, params, layout, cfg), layout)


def detect_many(
    points_list, params: ModelParams, layout: VocabLayout, cfg: DecodeConfig = DecodeConfig(), batch_size: int = 32
) -> list[list[Box3D]]:
    out = []
    for i in range(0, len(points_list), batch_size):
        chunk = points_list[i : i + batch_size]
        feats = encode_points(chunk, params)
        seeds = None if cfg.strategy != "nucleus" else [cfg.seed * 1_000_003 + i + j for j in range(len(chunk))]
        for seq in decode_many(feats, params, layout, cfg, seeds):
            out.append(decode_scene(seq, layout))
    return out
