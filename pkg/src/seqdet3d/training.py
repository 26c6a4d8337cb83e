"""Teacher-forced maximum-likelihood training."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape
from .model import BEVFeatures, ModelParams, SequenceTooLongError, decoder_forward, encode_points, no_weight_decay
from .scenegen import Scene, dihedral_scene, point_counts
from .tokenizer import PAD, OrderingStrategy, VocabLayout, encode_scene

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    ordering: str = "near_to_far"
    freeze_encoder_steps: int = 0
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    bucket: bool = True  # group similar-length sequences into batches
    augment: bool = False  # random square symmetries about the ego per scene and step
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def scene_sequence(scene: Scene, ordering: OrderingStrategy, layout: VocabLayout) -> list[int]:
    counts = point_counts(scene) if ordering.kind == "point_count" else None
    return encode_scene(scene.boxes, ordering, layout, counts)


def ordering_for(kind: str, seed: int, epoch: int, index: int) -> OrderingStrategy:
    if kind == "random":
        # a fresh permutation per scene and epoch
        return OrderingStrategy.random(int(seed) * 1_000_003 + epoch * 100_003 + index)
    return OrderingStrategy(kind)


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    n = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > n:
            raise ValueError(f"sequence of length {len(s)} does not fit padded length {n}")
        out[i, : len(s)] = s
    return out


def _trim(batch: np.ndarray) -> np.ndarray:
    # trailing all-PAD columns carry no targets
    used = np.flatnonzero((batch != PAD).any(axis=0))
    return batch[:, : used[-1] + 1] if len(used) else batch[:, :1]


def check_lengths(seqs: Sequence[Sequence[int]], t_max: int, ids: Sequence[str] | None = None) -> None:
    for i, s in enumerate(seqs):
        # the decoder sees len - 1 input tokens
        if len(s) - 1 > t_max:
            who = ids[i] if ids else f"#{i}"
            raise SequenceTooLongError(
                f"scene {who}: sequence of {len(s)} tokens exceeds T_max={t_max}; refusing to truncate labels"
            )


def sequence_loss(features: BEVFeatures, batch: np.ndarray, params: ModelParams, rng=None) -> ad.Tensor:
    batch = _trim(np.asarray(batch, dtype=np.int64))
    logits = decoder_forward(features, batch[:, :-1], params, rng=rng)
    return ad.cross_entropy(logits, batch[:, 1:], ignore_index=PAD)


def teacher_force_loss(
    scenes: Sequence[Scene],
    params: ModelParams,
    layout: VocabLayout,
    ordering: OrderingStrategy = OrderingStrategy(),
    rng: np.random.Generator | None = None,
    freeze_encoder: bool = False,
    sequences: Sequence[Sequence[int]] | None = None,
) -> ad.Tensor:
    """Mean token cross-entropy over non-PAD targets for a batch of scenes.

    Scenes are processed in scene-id order so the loss does not depend on
    the order they were passed in. ``sequences`` overrides the encoding of
    each scene's boxes (used for per-scene random orderings).
    """
    order = sorted(range(len(scenes)), key=lambda i: scenes[i].scene_id)
    scenes = [scenes[i] for i in order]
    if sequences is None:
        seqs = [scene_sequence(s, ordering, layout) for s in scenes]
    else:
        seqs = [sequences[i] for i in order]
    check_lengths(seqs, params.config.decoder.t_max, [s.scene_id for s in scenes])
    if freeze_encoder:
        feats = _encode_detached(scenes, params)
    else:
        feats = encode_points([s.points for s in scenes], params)
    return sequence_loss(feats, pad_batch(seqs), params, rng)


def _encode_detached(scenes: Sequence[Scene], params: ModelParams) -> BEVFeatures:
    frozen = {k: ad.Tensor(v.value, requires_grad=False) for k, v in params.items() if k.startswith("enc.")}
    view = ModelParams(params.config, {**params, **frozen})
    f = encode_points([s.points for s in scenes], view)
    return BEVFeatures(ad.Tensor(f.grid.value), f.height, f.width)


def collect_grads(params: ModelParams, names=None) -> dict[str, np.ndarray]:
    names = params.keys() if names is None else names
    out = {}
    for k in names:
        g = params[k].grad
        out[k] = np.zeros_like(params[k].value) if g is None else g
    return out


def clear_grads(params: ModelParams) -> None:
    for t in params.values():
        t.grad = None


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = ad.global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def batches(
    n: int, batch_size: int, rng: np.random.Generator, lengths: Sequence[int] | None = None, pool: int = 8
) -> list[np.ndarray]:
    """Shuffled index batches. With ``lengths``, batches are drawn from pools of
    ``pool`` batches sorted by length, which cuts padding, then shuffled."""
    perm = rng.permutation(n)
    if lengths is None:
        return [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    lengths = np.asarray(lengths)
    out = []
    span = batch_size * pool
    for i in range(0, n, span):
        chunk = perm[i : i + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out.extend(chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size))
    return [out[i] for i in rng.permutation(len(out))]


def train(
    scenes: Sequence[Scene],
    params: ModelParams,
    layout: VocabLayout,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_fn: Callable[[int, ModelParams], None] | None = None,
    progress: Callable[[int, int, float], None] | None = None,
) -> ModelParams:
    """Train in place with AdamW and a cosine warmup schedule; returns params."""
    if not scenes:
        raise ValueError("no training scenes")
    n = len(scenes)
    span = cfg.batch_size * 8
    if cfg.bucket:
        steps_per_epoch = (n // span) * 8 + math.ceil((n % span) / cfg.batch_size)
    else:
        steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    aug_rng = np.random.default_rng(cfg.seed + 2)
    state = AdamState()
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    step = 0
    t0 = time.time()
    lengths = [len(s.boxes) for s in scenes] if cfg.bucket else None
    try:
        for epoch in range(cfg.epochs):
            for idx in batches(n, cfg.batch_size, shuffle_rng, lengths):
                batch = [scenes[i] for i in idx]
                if cfg.augment:
                    batch = [dihedral_scene(sc, int(k)) for sc, k in zip(batch, aug_rng.integers(0, 8, len(batch)))]
                seqs = [
                    scene_sequence(sc, ordering_for(cfg.ordering, cfg.seed, epoch, int(i)), layout)
                    for sc, i in zip(batch, idx)
                ]
                lr = ad.cosine_warmup_lr(step, total, cfg.lr, cfg.warmup_fraction)
                frozen = step < cfg.freeze_encoder_steps
                clear_grads(params)
                with Tape() as tape:
                    loss = teacher_force_loss(batch, params, layout, rng=drop_rng, freeze_encoder=frozen, sequences=seqs)
                    value = float(loss.value)
                    if not math.isfinite(value):
                        raise TrainingDivergedError(step, value)
                    tape.backward(loss)
                names = params.decoder_names() if frozen else list(params.keys())
                grads = collect_grads(params, names)
                clip_grads(grads, cfg.grad_clip)
                ad.adamw_step(
                    params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.weight_decay, no_decay=no_weight_decay
                )
                if metrics:
                    metrics.write(f"step {step} lr {lr:.9g} loss {value:.9g}\n")
                if progress:
                    progress(step, total, value)
                step += 1
                if checkpoint_fn and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    checkpoint_fn(step, params)
            log.info("epoch %d done: step %d loss %.4f (%.0fs)", epoch, step, value, time.time() - t0)
    finally:
        if metrics:
            metrics.close()
    clear_grads(params)
    return params
