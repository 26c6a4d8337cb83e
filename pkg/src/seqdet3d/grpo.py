"""Reinforcement fine-tuning of the decoder with group-relative advantages."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .decoding import DecodeConfig, legal_mask, sample_decode
from .geometry import Box3D, iou_3d
from .model import BEVFeatures, ModelParams, decoder_forward, no_weight_decay
from .scenegen import Scene
from .tokenizer import PAD, VocabLayout, decode_scene
from .training import _encode_detached, clear_grads, clip_grads, collect_grads, pad_batch

log = logging.getLogger(__name__)


class IllegalTokenError(ValueError):
    pass


class RLDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RLConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.0
    temperature: float = 1.0
    lr: float = 1e-4
    scenes_per_update: int = 4
    steps: int = 100
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if not self.clip_eps > 0:
            raise ValueError("clip epsilon must be positive")
        if self.beta < 0:
            raise ValueError("KL weight must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardBreakdown:
    recall: dict[int, float] = field(default_factory=dict)
    precision: dict[int, float] = field(default_factory=dict)
    f1: dict[int, float] = field(default_factory=dict)
    reward: float = 0.0


def reward(pred: Sequence[Box3D], gt: Sequence[Box3D]) -> tuple[float, RewardBreakdown]:
    """Class-averaged F1-style reward from best-match 3D IoUs.

    Per category, each GT box takes its best IoU against same-category
    predictions. Recall averages those over GT boxes; precision sums them and
    divides by the prediction count. Categories present on only one side score
    0. Two empty lists score 1.
    """
    cats = sorted({b.category for b in pred} | {b.category for b in gt})
    out = RewardBreakdown()
    if not cats:
        out.reward = 1.0
        return 1.0, out
    for c in cats:
        g = [b for b in gt if b.category == c]
        p = [b for b in pred if b.category == c]
        if not g or not p:
            out.recall[c], out.precision[c], out.f1[c] = 0.0, 0.0, 0.0
            continue
        best = [max(iou_3d(a, b) for b in p) for a in g]
        total = math.fsum(best)
        rec = total / len(g)
        prec = total / len(p)
        out.recall[c], out.precision[c] = rec, prec
        out.f1[c] = 0.0 if rec + prec == 0 else 2 * prec * rec / (prec + rec)
    out.reward = math.fsum(out.f1.values()) / len(cats)
    return out.reward, out


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    mu = math.fsum(r) / len(r)
    d = r - mu
    std = math.sqrt(math.fsum(d * d) / len(r))
    return d / (std + 1e-8)


def legal_masks(seqs: np.ndarray, layout: VocabLayout, t_max: int) -> np.ndarray:
    """(B, T-1, V) masks of tokens legal at each predicted position."""
    bsz, n = seqs.shape
    out = np.zeros((bsz, n - 1, layout.vocab_size), dtype=bool)
    for b in range(bsz):
        for t in range(n - 1):
            out[b, t] = legal_mask(t, t + 1, layout, t_max)
    return out


def sequence_log_prob(
    params: ModelParams,
    features: BEVFeatures,
    seqs,
    layout: VocabLayout,
    t_max: int | None = None,
    temperature: float = 1.0,
) -> tuple[Tensor, np.ndarray]:
    """Per-token log-probabilities under the constrained softmax of logits / temperature.

    ``seqs`` is a (B, T) PAD-padded batch starting with START. Returns the
    (B, T-1) log-prob tensor and the boolean mask of real target tokens.
    """
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    t_max = t_max or params.config.decoder.t_max
    targets = seqs[:, 1:]
    valid = targets != PAD
    allowed = legal_masks(seqs, layout, t_max)
    picked = np.take_along_axis(allowed, np.where(valid, targets, 0)[..., None], axis=-1)[..., 0]
    bad = valid & ~picked
    if bad.any():
        b, t = map(int, np.argwhere(bad)[0])
        raise IllegalTokenError(f"row {b}: token {int(targets[b, t])} is not legal at position {t}")
    logits = decoder_forward(features, seqs[:, :-1], params)
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    masked = ad.masked_fill(logits, ~allowed, -np.inf)
    nll = ad.cross_entropy(masked, targets, ignore_index=PAD, reduction="none")
    return ad.scale(nll, -1.0), valid


@dataclass
class UpdateStats:
    reward: float
    abs_advantage: float
    clip_fraction: float
    kl: float
    skipped: bool
    objective: float = 0.0


def _rollouts(features, params, layout, scenes, cfg: RLConfig, step: int):
    g = cfg.group_size
    idx = np.repeat(np.arange(features.batch), g)
    feats = BEVFeatures(Tensor(features.grid.value[idx]), features.height, features.width)
    rngs = [np.random.default_rng([cfg.seed, step, i]) for i in range(len(idx))]
    dcfg = DecodeConfig("nucleus", top_p=1.0, top_k=layout.vocab_size, temperature=cfg.temperature)
    return feats, sample_decode(feats, params, layout, dcfg, rngs=rngs)


def grpo_update(
    params: ModelParams,
    ref_params: ModelParams | None,
    scenes: Sequence[Scene],
    layout: VocabLayout,
    cfg: RLConfig,
    state: AdamState,
    step: int = 0,
) -> UpdateStats:
    """Sample G sequences per scene, score them and take one clipped policy-gradient step.

    The encoder stays frozen; only decoder parameters move. With beta = 0 and
    every group's rewards constant, no parameter or optimizer state changes.
    """
    features = _encode_detached(scenes, params)
    feats, seqs = _rollouts(features, params, layout, scenes, cfg, step)
    rewards, advs = [], []
    for s_i, scene in enumerate(scenes):
        grp = seqs[s_i * cfg.group_size : (s_i + 1) * cfg.group_size]
        r = [reward(decode_scene(q, layout), scene.boxes)[0] for q in grp]
        rewards.extend(r)
        advs.extend(group_advantages(r))
    adv = np.asarray(advs)
    mean_r = math.fsum(rewards) / len(rewards)
    if cfg.beta == 0 and not adv.any():
        return UpdateStats(mean_r, 0.0, 0.0, 0.0, True)

    batch = pad_batch(seqs)
    t_max = params.config.decoder.t_max
    old_lp, valid = sequence_log_prob(params, feats, batch, layout, t_max, cfg.temperature)
    old = old_lp.value
    ref = None
    if cfg.beta > 0 and ref_params is not None:
        ref = sequence_log_prob(ref_params, feats, batch, layout, t_max, cfg.temperature)[0].value
    dtype = old.dtype
    a = adv.astype(dtype)[:, None]
    counts = valid.sum(axis=1)
    clear_grads(params)
    with Tape() as tape:
        lp, _ = sequence_log_prob(params, feats, batch, layout, t_max, cfg.temperature)
        ratio = ad.exp(ad.sub(lp, np.where(valid, old, 0)))
        surr = ad.minimum(ad.multiply(ratio, a), ad.multiply(ad.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps), a))
        per_tok = surr
        kl_val = 0.0
        if ref is not None:
            # k3 estimator: exp(ref - lp) - (ref - lp) - 1
            diff = ad.sub(np.where(valid, ref, 0), lp)
            k3 = ad.sub(ad.sub(ad.exp(diff), diff), 1.0)
            per_tok = ad.sub(per_tok, ad.scale(k3, cfg.beta))
            kl_val = float(np.sum(k3.value * valid) / valid.sum())
        weights = (valid / np.maximum(counts, 1)[:, None] / len(seqs)).astype(dtype)
        objective = ad.sum_(ad.multiply(per_tok, weights))
        loss = ad.scale(objective, -1.0)
        if not math.isfinite(float(loss.value)):
            raise RLDivergedError(f"non-finite GRPO objective at step {step}: {float(loss.value)}")
        tape.backward(loss)
    r_val = ratio.value[valid]
    clipped = np.mean((r_val < 1 - cfg.clip_eps) | (r_val > 1 + cfg.clip_eps)) if r_val.size else 0.0
    grads = collect_grads(params, params.decoder_names())
    clip_grads(grads, cfg.grad_clip)
    ad.adamw_step(params, grads, state, cfg.lr, (0.9, 0.999), cfg.weight_decay, no_decay=no_weight_decay)
    clear_grads(params)
    return UpdateStats(mean_r, float(np.mean(np.abs(adv))), float(clipped), kl_val, False, float(objective.value))


def rl_finetune(
    scenes: Sequence[Scene],
    params: ModelParams,
    layout: VocabLayout,
    cfg: RLConfig,
    metrics_path: str | Path | None = None,
    ref_params: ModelParams | None = None,
) -> ModelParams:
    """Run ``cfg.steps`` GRPO updates in place on scenes drawn with the config seed."""
    if not scenes:
        raise ValueError("no scenes for RL fine-tuning")
    ref_params = ref_params if ref_params is not None else (params.copy() if cfg.beta > 0 else None)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(cfg.steps):
            idx = rng.choice(len(scenes), size=min(cfg.scenes_per_update, len(scenes)), replace=False)
            batch = [scenes[i] for i in sorted(idx)]
            st = grpo_update(params, ref_params, batch, layout, cfg, state, step)
            if metrics:
                metrics.write(f"step {step} reward {st.reward:.9g} clipfrac {st.clip_fraction:.9g} kl {st.kl:.9g}\n")
            if step % 10 == 0:
                log.info("rl step %d reward %.4f |A| %.3f%s", step, st.reward, st.abs_advantage, " (skipped)" if st.skipped else "")
    finally:
        if metrics:
            metrics.close()
    return params
