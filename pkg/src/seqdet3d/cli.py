"""Command-line interface: ``seqdet3d <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, LayoutMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .decoding import DecodeConfig, detect_many
from .evaluation import evaluate
from .grpo import RLConfig, rl_finetune
from .model import init_params
from .refine import cascade_many
from .render import render_svg
from .scenegen import SceneFormatError, format_box, generate_dataset, parse_box, read_dataset, read_scene, write_dataset
from .tokenizer import VocabLayout
from .training import train

log = logging.getLogger("seqdet3d")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5
EXIT_RUNTIME = 1


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def _strategy(text: str, seed: int) -> DecodeConfig:
    try:
        return DecodeConfig.parse(text, seed=seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load(path):
    params, layout, meta = load_checkpoint(path)
    return params, layout


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    scenes = generate_dataset(cfg.gen, args.count, args.seed)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    scenes = read_dataset(args.data)
    layout = VocabLayout(num_categories=10)
    model_cfg = cfg.model
    if model_cfg.decoder.vocab_size != layout.vocab_size:
        raise LayoutMismatchError(
            f"model vocab_size {model_cfg.decoder.vocab_size} does not match the layout's {layout.vocab_size}"
        )
    tcfg = cfg.train if args.seed is None else type(cfg.train)(**{**cfg.train.to_dict(), "seed": args.seed})
    params = init_params(model_cfg, tcfg.seed)
    out = Path(args.out)

    def periodic(step, p):
        save_checkpoint(out.with_name(f"{out.stem}.step{step}{out.suffix}"), p, layout, {"train": tcfg.to_dict()})

    train(scenes, params, layout, tcfg, metrics_path=args.metrics, checkpoint_fn=periodic)
    save_checkpoint(out, params, layout, {"train": tcfg.to_dict()})
    print(f"saved {out}")
    return 0


def cmd_finetune_rl(args) -> int:
    cfg = _config(args)
    params, layout = _load(args.ckpt)
    scenes = read_dataset(args.data)
    rl = cfg.rl if args.seed is None else RLConfig(**{**cfg.rl.to_dict(), "seed": args.seed})
    rl_finetune(scenes, params, layout, rl, metrics_path=args.metrics)
    save_checkpoint(args.out, params, layout, {"rl": rl.to_dict()})
    print(f"saved {args.out}")
    return 0


def cmd_detect(args) -> int:
    params, layout = _load(args.ckpt)
    scene = read_scene(args.scene)
    boxes = detect_many([scene.points], params, layout, _strategy(args.strategy, args.seed))[0]
    for b in boxes:
        print(format_box(b))
    return 0


def cmd_eval(args) -> int:
    params, layout = _load(args.ckpt)
    scenes = read_dataset(args.data)
    preds = detect_many([s.points for s in scenes], params, layout, _strategy(args.strategy, args.seed))
    report = evaluate(preds, [s.boxes for s in scenes])
    sys.stdout.write(report.to_text())
    if args.lines:
        sys.stdout.write("\n".join(report.to_lines()) + "\n")
    return 0


def cmd_cascade(args) -> int:
    prior, layout = _load(args.prior)
    completion, layout2 = _load(args.completion)
    if layout.vocab_size != layout2.vocab_size:
        raise LayoutMismatchError(f"prior vocab {layout.vocab_size} != completion vocab {layout2.vocab_size}")
    scenes = read_dataset(args.data)
    res = cascade_many(prior, completion, [s.points for s in scenes], layout, _strategy(args.strategy, args.seed),
                       args.seed, args.iou)
    gts = [s.boxes for s in scenes]
    base = evaluate([r.prior for r in res], gts)
    casc = evaluate([r.boxes for r in res], gts)
    skipped = sum(r.skipped for r in res)
    print(f"{'':<12}{'P':>9}{'R':>9}{'F1':>9}")
    for name, rep in (("prior", base), ("cascade", casc)):
        print(f"{name:<12}{rep.precision:>9.4f}{rep.recall:>9.4f}{rep.f1:>9.4f}")
    print(f"added boxes: {sum(len(r.added) for r in res)}  completion skipped: {skipped}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    scenes = read_dataset(args.data)
    if args.test:
        test = read_dataset(args.test)
    else:
        cut = max(1, len(scenes) // 10)
        scenes, test = scenes[:-cut], scenes[-cut:]
    layout = VocabLayout(num_categories=10)
    gts = [s.boxes for s in test]
    rows = []
    for order in args.orders.split(","):
        tcfg = type(cfg.train)(**{**cfg.train.to_dict(), "ordering": order, "seed": args.seed})
        params = init_params(cfg.model, args.seed)
        log.info("training %s on %d scenes", order, len(scenes))
        train(scenes, params, layout, tcfg)
        preds = detect_many([s.points for s in test], params, layout, DecodeConfig())
        rows.append((order, evaluate(preds, gts)))
    print(f"{'ordering':<14}{'P':>9}{'R':>9}{'F1':>9}")
    for order, rep in rows:
        print(f"{order:<14}{rep.precision * 100:>9.1f}{rep.recall * 100:>9.1f}{rep.f1 * 100:>9.1f}")
    return 0


def _read_boxes(path) -> list:
    boxes = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            boxes.append(parse_box(line, i))
    return boxes


def cmd_render(args) -> int:
    scene = read_scene(args.scene)
    preds = _read_boxes(args.pred) if args.pred else []
    Path(args.out).write_text(render_svg(scene.points, scene.boxes, preds, scene.scene_id), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqdet3d", description="Autoregressive 3D box detection on synthetic LiDAR scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = sub.add_parser("gen-data", help="generate synthetic scenes and a manifest")
    cfg_flags(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="teacher-forced training")
    cfg_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", help="write 'step n lr v loss v' lines here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune-rl", help="GRPO fine-tuning of the decoder")
    cfg_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", help="write 'step n reward v clipfrac v kl v' lines here")
    sp.set_defaults(func=cmd_finetune_rl)

    sp = sub.add_parser("detect", help="detect boxes in one scene file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--strategy", default="greedy", help="greedy | beam:K | nucleus:P,K,T")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--strategy", default="greedy")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lines", action="store_true", help="also print 'metric ...' lines")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cascade", help="prior -> completion refinement")
    sp.add_argument("--prior", required=True)
    sp.add_argument("--completion", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--iou", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--strategy", default="greedy")
    sp.set_defaults(func=cmd_cascade)

    sp = sub.add_parser("ablate-ordering", help="train one model per ordering and compare")
    cfg_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", help="held-out dataset (default: last 10%% of --data)")
    sp.add_argument("--orders", default="near_to_far,random,point_count")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("render", help="bird's-eye-view SVG of a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--pred", help="file of 'b' lines, e.g. detect output")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (SceneFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
