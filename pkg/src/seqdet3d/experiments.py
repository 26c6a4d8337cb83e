"""Desk-scale comparisons: ordering, RL fine-tuning, cascade and decoding.

Every trained model is cached as a checkpoint named by a hash of everything
that determines it (configs, dataset sizes and seeds), so the comparisons
can be rerun cheaply and a changed config never reuses a stale model.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .decoding import DecodeConfig, detect_many
from .evaluation import EvalReport, evaluate
from .grpo import RLConfig, rl_finetune
from .model import DecoderConfig, EncoderConfig, ModelConfig, ModelParams, init_params
from .refine import cascade_many
from .scenegen import GenConfig, Scene, generate_dataset
from .tokenizer import VocabLayout
from .training import TrainConfig, teacher_force_loss, train

log = logging.getLogger(__name__)


def default_cache_dir() -> Path:
    return Path(os.environ.get("SEQDET3D_CACHE", Path.cwd() / ".cache" / "seqdet3d"))


@dataclass(frozen=True)
class Setup:
    run: RunConfig = field(default_factory=RunConfig)
    n_train: int = 2000
    n_test: int = 200
    train_seed: int = 1000
    test_seed: int = 2000
    nucleus: str = "nucleus:0.95,50,1.0"
    cascade_iou: float = 0.1
    cascade_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def acceptance_setup() -> Setup:
    """Comparison setup sized for a single CPU core."""
    model = ModelConfig(
        EncoderConfig(pillar_dim=32, cell=3.0, pos_features=32),
        DecoderConfig(value_features=32),
        dtype="float32",
    )
    run = RunConfig(
        model=model,
        train=TrainConfig(epochs=55, augment=True),
        rl=RLConfig(group_size=8, beta=0.0, lr=3e-5, temperature=0.7, scenes_per_update=8, steps=100),
    )
    return Setup(run=run)


def overfit_setup() -> Setup:
    # memorization check: no dropout or weight decay
    model = ModelConfig(EncoderConfig(pillar_dim=32), DecoderConfig(dropout=0.0), dtype="float32")
    train_cfg = TrainConfig(epochs=300, batch_size=16, lr=1e-3, weight_decay=0.0, bucket=False)
    run = RunConfig(model=model, train=train_cfg)
    return Setup(run=run, n_train=16, n_test=0, train_seed=7)


def _digest(payload) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class RunCache:
    """Checkpoints keyed by a config hash; ``meta`` carries the wall time."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else default_cache_dir()

    def path(self, kind: str, payload) -> Path:
        return self.root / f"{kind}-{_digest(payload)}.ckpt"

    def get(self, kind: str, payload, build) -> tuple[ModelParams, dict]:
        path = self.path(kind, payload)
        if path.exists():
            params, _, meta = load_checkpoint(path)
            log.info("cached %s: %s", kind, path)
            return params, meta
        t0 = time.time()
        params, layout = build()
        meta = {"kind": kind, "config": payload, "seconds": time.time() - t0}
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_checkpoint(tmp, params, layout, meta)
        tmp.replace(path)
        # reload so a fresh run and a cached one see identical float values
        params, _, meta = load_checkpoint(path)
        return params, meta


@functools.lru_cache(maxsize=4)
def datasets(setup: Setup) -> tuple[list[Scene], list[Scene]]:
    gen: GenConfig = setup.run.gen
    return generate_dataset(gen, setup.n_train, setup.train_seed), generate_dataset(gen, setup.n_test, setup.test_seed)


def _base_payload(setup: Setup) -> dict:
    return {
        "model": setup.run.model.to_dict(),
        "gen": asdict(setup.run.gen),
        "n_train": setup.n_train,
        "train_seed": setup.train_seed,
    }


def trained(setup: Setup, ordering: str, cache: RunCache, scenes=None) -> tuple[ModelParams, dict]:
    tcfg = replace(setup.run.train, ordering=ordering)
    payload = {**_base_payload(setup), "train": tcfg.to_dict()}

    def build():
        train_scenes = scenes if scenes is not None else datasets(setup)[0]
        params = init_params(setup.run.model, tcfg.seed)
        layout = VocabLayout(num_categories=setup.run.gen.num_categories)
        log.info("training %s on %d scenes", ordering, len(train_scenes))
        train(train_scenes, params, layout, tcfg)
        return params, layout

    return cache.get(f"train-{ordering}", payload, build)


def finetuned(setup: Setup, cache: RunCache, scenes=None) -> tuple[ModelParams, dict]:
    base_train = replace(setup.run.train, ordering="near_to_far")
    payload = {**_base_payload(setup), "train": base_train.to_dict(), "rl": setup.run.rl.to_dict()}

    def build():
        params, _ = trained(setup, "near_to_far", cache, scenes)
        train_scenes = scenes if scenes is not None else datasets(setup)[0]
        layout = VocabLayout(num_categories=setup.run.gen.num_categories)
        rl_finetune(train_scenes, params, layout, setup.run.rl)
        return params, layout

    return cache.get("rl", payload, build)


def report(params: ModelParams, scenes, strategy: str = "greedy", seed: int = 0) -> EvalReport:
    layout = VocabLayout(num_categories=params.config.decoder.num_categories)
    preds = detect_many([s.points for s in scenes], params, layout, DecodeConfig.parse(strategy, seed=seed))
    return evaluate(preds, [s.boxes for s in scenes])


@dataclass
class Row:
    name: str
    report: EvalReport
    seconds: float = 0.0

    def line(self) -> str:
        r = self.report
        return f"{self.name:<22}P {r.precision * 100:6.2f}  R {r.recall * 100:6.2f}  F1 {r.f1 * 100:6.2f}"


def ordering_ablation(setup: Setup, cache: RunCache, orders=("near_to_far", "random")) -> dict[str, Row]:
    train_scenes, test = datasets(setup)
    rows = {}
    for order in orders:
        params, meta = trained(setup, order, cache, train_scenes)
        rows[order] = Row(order, report(params, test), meta["seconds"])
    return rows


def rl_comparison(setup: Setup, cache: RunCache) -> dict[str, Row]:
    train_scenes, test = datasets(setup)
    base, meta = trained(setup, "near_to_far", cache, train_scenes)
    tuned, rl_meta = finetuned(setup, cache, train_scenes)
    return {
        "teacher_forcing": Row("teacher_forcing", report(base, test), meta["seconds"]),
        "grpo": Row("grpo", report(tuned, test), rl_meta["seconds"]),
    }


def cascade_comparison(setup: Setup, cache: RunCache) -> dict[str, Row]:
    train_scenes, test = datasets(setup)
    prior, _ = trained(setup, "near_to_far", cache, train_scenes)
    completion, _ = trained(setup, "random", cache, train_scenes)
    layout = VocabLayout(num_categories=setup.run.gen.num_categories)
    res = cascade_many(prior, completion, [s.points for s in test], layout, DecodeConfig(), setup.cascade_seed,
                       setup.cascade_iou)
    gts = [s.boxes for s in test]
    return {
        "prior": Row("prior", evaluate([r.prior for r in res], gts)),
        "cascade": Row("cascade", evaluate([r.boxes for r in res], gts)),
    }


def decoding_comparison(setup: Setup, cache: RunCache) -> dict[str, Row]:
    train_scenes, test = datasets(setup)
    params, _ = trained(setup, "near_to_far", cache, train_scenes)
    return {
        "greedy": Row("greedy", report(params, test, "greedy")),
        "nucleus": Row("nucleus", report(params, test, setup.nucleus)),
    }


@dataclass
class OverfitResult:
    init_loss: float
    report: EvalReport
    seconds: float


def overfit(setup: Setup | None = None) -> OverfitResult:
    """Train on a handful of scenes and detect on the same scenes (no cache)."""
    setup = setup or overfit_setup()
    scenes, _ = datasets(setup)
    layout = VocabLayout(num_categories=setup.run.gen.num_categories)
    params = init_params(setup.run.model, setup.run.train.seed)
    init = float(teacher_force_loss(scenes, params, layout).value)
    t0 = time.time()
    train(scenes, params, layout, setup.run.train)
    seconds = time.time() - t0
    return OverfitResult(init, report(params, scenes), seconds)


LN_VOCAB = math.log(VocabLayout().vocab_size)
