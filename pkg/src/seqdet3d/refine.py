"""Cascaded detection: a prior model seeds a completion model, then overlapping boxes merge."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import DecodeConfig, decode, detect_many
from .geometry import Box3D, iou_bev, yaw_normalize
from .model import ModelParams, encode_points
from .tokenizer import VocabLayout, decode_scene, encode_boxes

log = logging.getLogger(__name__)


def _mean(vals: list[float]) -> float:
    if all(v == vals[0] for v in vals):
        return vals[0]
    return math.fsum(vals) / len(vals)


def _circular_mean(angles: list[float]) -> float:
    if all(a == angles[0] for a in angles):
        return angles[0]
    s = math.fsum(math.sin(a) for a in angles)
    c = math.fsum(math.cos(a) for a in angles)
    return yaw_normalize(math.atan2(s, c))


def merge_group(boxes: Sequence[Box3D]) -> Box3D:
    votes = Counter(b.category for b in boxes)
    top = max(votes.values())
    cat = next(b.category for b in boxes if votes[b.category] == top)
    vals = {k: _mean([getattr(b, k) for b in boxes]) for k in ("x", "y", "z", "l", "w", "h", "vx", "vy")}
    return Box3D(yaw=_circular_mean([b.yaw for b in boxes]), category=cat, **vals)


def components(boxes: Sequence[Box3D], iou_threshold: float = 0.1) -> list[list[int]]:
    """Connected components of the BEV-IoU >= threshold graph, in order of first member."""
    parent = list(range(len(boxes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if iou_bev(boxes[i], boxes[j]) >= iou_threshold:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    groups: dict[int, list[int]] = {}
    for i in range(len(boxes)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def cluster_boxes(boxes: Sequence[Box3D], iou_threshold: float = 0.1) -> list[Box3D]:
    """Merge every connected group of overlapping boxes into its average box."""
    return [merge_group([boxes[i] for i in g]) for g in components(boxes, iou_threshold)]


@dataclass
class CascadeResult:
    boxes: list[Box3D]
    prior: list[Box3D]
    added: list[Box3D]
    skipped: bool  # prefix did not fit the completion model's T_max


def complete(
    prior: Sequence[Box3D],
    completion: ModelParams,
    points,
    layout: VocabLayout,
    cfg: DecodeConfig = DecodeConfig(),
    seed: int = 0,
    iou_threshold: float = 0.1,
    features=None,
) -> CascadeResult:
    """Run the completion model from a shuffled prefix of ``prior`` boxes and merge."""
    prior = list(prior)
    order = np.random.default_rng(seed).permutation(len(prior))
    prefix = encode_boxes([prior[i] for i in order], layout)
    t_max = min(cfg.t_max or completion.config.decoder.t_max, completion.config.decoder.t_max)
    if len(prefix) + 2 > t_max:
        log.warning("prior prefix of %d tokens does not fit T_max=%d; completion skipped", len(prefix), t_max)
        return CascadeResult(cluster_boxes(prior, iou_threshold), prior, [], True)
    if features is None:
        features = encode_points([np.asarray(points, dtype=float).reshape(-1, 4)], completion)
    seq = decode(features, completion, layout, cfg, prefix=prefix)
    added = decode_scene(seq, layout)[len(prior) :]
    return CascadeResult(cluster_boxes(prior + added, iou_threshold), prior, added, False)


def cascade(
    prior_params: ModelParams,
    completion_params: ModelParams,
    points,
    layout: VocabLayout,
    cfg: DecodeConfig = DecodeConfig(),
    seed: int = 0,
    iou_threshold: float = 0.1,
) -> list[Box3D]:
    prior = detect_many([points], prior_params, layout, DecodeConfig(t_max=cfg.t_max))[0]
    return complete(prior, completion_params, points, layout, cfg, seed, iou_threshold).boxes


def cascade_many(
    prior_params: ModelParams,
    completion_params: ModelParams,
    points_list,
    layout: VocabLayout,
    cfg: DecodeConfig = DecodeConfig(),
    seed: int = 0,
    iou_threshold: float = 0.1,
) -> list[CascadeResult]:
    priors = detect_many(points_list, prior_params, layout, DecodeConfig(t_max=cfg.t_max))
    return [complete(p, completion_params, pts, layout, cfg, seed, iou_threshold) for p, pts in zip(priors, points_list)]
