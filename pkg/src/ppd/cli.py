"""``ppd`` command line: data generation, training, attack/defence rollouts, evaluation.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for runtime
failures. ``PPD_LOG`` (quiet, info, debug) sets stderr verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agent import TrainConfig, greedy_rollout, infer_defense, load_checkpoint, save_checkpoint, train_ppd
from .core import Metrics, Rng, read_pgm_mask, read_ppm, write_pgm_mask
from .evaluate import EvalConfig, evaluate_ablation, evaluate_fm
from .graph_env import ATTACK, DEFENSE, PromptPool, build_graph, env_reset, training_pool
from .segmenter import SegmenterConfig, proxy_segmenter
from .synthdata import SceneTemplate, load_dataset, write_dataset

log = logging.getLogger("ppd")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
# evaluation geometry always follows the checkpoint's training config
EVAL_KEYS = ("attack_steps", "defense_budget", "fm_budget", "q_threshold", "seed")


class UsageError(Exception):
    """Bad flags, config or inputs; reported with exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    scene: SceneTemplate = field(default_factory=SceneTemplate)

    def flat(self) -> dict:
        out = {}
        for section in ("train", "eval", "segmenter", "scene"):
            for k, v in asdict(getattr(self, section)).items():
                if section == "eval" and k not in EVAL_KEYS:
                    continue
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and len(value) == len(default) and all(isinstance(v, int) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise UsageError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config(obj: dict) -> RunConfig:
    """Build a :class:`RunConfig` from flat dotted keys, e.g. ``{"train.episodes": 50}``."""
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object of dotted keys")
    base = RunConfig()
    known = base.flat()
    updates: dict[str, dict] = {}
    for key, value in obj.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        default = getattr(getattr(base, section), name)
        updates.setdefault(section, {})[name] = _coerce(key, value, default)
    parts = {}
    for section in ("train", "eval", "segmenter", "scene"):
        try:
            parts[section] = replace(getattr(base, section), **updates.get(section, {}))
        except ValueError as e:
            keys = ", ".join(f"{section}.{k}" for k in updates.get(section, {}))
            raise UsageError(f"invalid value among {keys}: {e}") from None
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None
    return parse_config(obj)


def config_help() -> str:
    lines = ["config keys (flat JSON object) and defaults:"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in RunConfig().flat().items()]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# helpers


def _checkpoint(path, kind):
    try:
        return load_checkpoint(path, kind)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _ckpt_train_config(meta) -> tuple[TrainConfig, SegmenterConfig]:
    cfg = meta.get("config", {})
    train = parse_config({k: v for k, v in cfg.items() if k.startswith(("train.", "segmenter."))})
    return train.train, train.segmenter


def _emit(**values):
    for k, v in values.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _dataset(path):
    data = load_dataset(path)
    if not data:
        raise UsageError(f"{path}: no scenes found (expected 0.ppm, 0_mask.pgm, ...)")
    return data


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    tpl = replace(load_config(args.config).scene, size=args.size)
    manifest = write_dataset(args.out, args.count, args.seed, tpl)
    _emit(scenes=manifest["count"], out=args.out)
    return 0


def cmd_train(args) -> int:
    run = load_config(args.config)
    data = _dataset(args.data)
    seg = proxy_segmenter(run.segmenter)
    q_att, q_def, history = train_ppd(data, run.train, seg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stored = {k: v for k, v in run.flat().items() if k.startswith(("train.", "segmenter."))}
    save_checkpoint(out / "q_att.json", q_att, ATTACK, stored, run.train.seed)
    save_checkpoint(out / "q_def.json", q_def, DEFENSE, stored, run.train.seed)
    with open(out / "history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    if args.plot and history:
        from .plotting import plot_history

        plot_history(history, out / "training_curve.png")
    tail = history[-10:]
    _emit(episodes=len(history))
    for key in ("dice_ideal", "dice_attacked", "dice_defended"):
        _emit(**{f"final10_{key}": float(np.mean([r[key] for r in tail])) if tail else float("nan")})
    return 0


def cmd_attack(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    q, meta = _checkpoint(args.ckpt, ATTACK)
    tcfg, scfg = _ckpt_train_config(meta)
    img, gt = read_ppm(args.image), read_pgm_mask(args.mask)
    seg = proxy_segmenter(scfg)
    graph = build_graph(img, tcfg.patch_size)
    pool = training_pool(gt, Rng(args.seed, 1000), tcfg.interval, tcfg.patch_size, tcfg.flip_prob)
    start = env_reset(pool, ATTACK, args.steps, seg, img, gt)
    end, trace = greedy_rollout(q, start, graph, seg, img, gt)
    Path(args.out).write_text(end.pool.to_json() + "\n")
    write_pgm_mask(args.pred or Path(args.out).with_suffix(".pgm"), seg(img, end.pool.active_prompts()))
    if args.trace:
        _write_json(args.trace, trace)
    _emit(dice_before=start.last_dice, dice_after=end.last_dice, steps=len(trace))
    return 0


def cmd_defend(args) -> int:
    if args.budget < 0:
        raise UsageError("--budget must be >= 0")
    q, meta = _checkpoint(args.ckpt, DEFENSE)
    tcfg, scfg = _ckpt_train_config(meta)
    img = read_ppm(args.image)
    graph = build_graph(img, tcfg.patch_size)
    try:
        pool = PromptPool.from_json(Path(args.prompts).read_text(), graph.grid)
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"{args.prompts}: bad prompt file ({e})") from None
    if not pool.active.any():
        raise UsageError(f"{args.prompts}: no active prompts to defend")
    out = infer_defense(q, pool, graph, args.budget, args.threshold)
    seg = proxy_segmenter(scfg)
    Path(args.out).write_text(out.to_json() + "\n")
    pred = seg(img, out.active_prompts())
    write_pgm_mask(args.pred or Path(args.out).with_suffix(".pgm"), pred)
    _emit(active_before=int(pool.active.sum()), active_after=int(out.active.sum()))
    if args.mask:
        gt = read_pgm_mask(args.mask)
        before = Metrics.of(seg(img, pool.active_prompts()), gt)
        after = Metrics.of(pred, gt)
        _emit(dice_before=before.dice, dice_after=after.dice)
    return 0


def cmd_eval(args) -> int:
    q_att, meta_att = _checkpoint(args.ckpt_att, ATTACK)
    q_def, meta_def = _checkpoint(args.ckpt_def, DEFENSE)
    tcfg, scfg = _ckpt_train_config(meta_def)
    ev = load_config(args.config).eval
    ecfg = replace(ev, patch_size=tcfg.patch_size, interval=tcfg.interval, flip_prob=tcfg.flip_prob)
    data = _dataset(args.data)
    seg = proxy_segmenter(scfg)
    if args.mode == "ablation":
        report = evaluate_ablation(q_att, q_def, data, seg, ecfg)
    else:
        report = evaluate_fm(q_def, data, seg, ecfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    cols = ["name", "n", "dice_mean", "dice_std", "iou_mean", "iou_std"]
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(report["rows"])
    if not args.no_plots:
        from .plotting import plot_history, plot_rows, plot_scenes

        plot_rows(report, out.with_name(out.stem + "_rows.png"))
        plot_scenes(report, out.with_name(out.stem + "_scenes.png"))
        if args.history:
            history = [json.loads(l) for l in Path(args.history).read_text().splitlines() if l.strip()]
            if history:
                plot_history(history, out.with_name(out.stem + "_history.png"))

    print("\t".join(cols))
    for r in report["rows"]:
        print("\t".join([r["name"], str(r["n"])] + [f"{r[c]:.4f}" for c in cols[2:]]))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ppd",
        description="Adversarial point-prompt attack/defence on a dual-space patch graph.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--config", help="JSON config; scene.* keys apply")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train attack and defence agents", epilog=config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config; train.* and segmenter.* keys apply")
    t.add_argument("--out", required=True, help="directory for q_att.json, q_def.json, history.jsonl")
    t.add_argument("--plot", action="store_true", help="also render training_curve.png")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="greedy attack on one scene's prompt pool")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--mask", required=True)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--out", required=True, help="attacked prompt JSON")
    a.add_argument("--pred", help="predicted mask PGM (default: --out with .pgm)")
    a.add_argument("--trace", help="step trace JSON")
    a.add_argument("--seed", type=int, default=0, help="distractor sampling seed")
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend", help="filter prompts with the defence agent (no ground truth used)")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--prompts", required=True)
    d.add_argument("--budget", type=int, required=True)
    d.add_argument("--mask", help="ground truth, only for reporting Dice")
    d.add_argument("--out", required=True, help="refined prompt JSON")
    d.add_argument("--pred", help="predicted mask PGM (default: --out with .pgm)")
    d.add_argument("--threshold", type=float, default=0.0, help="stop once the best Q-value falls below this")
    d.set_defaults(func=cmd_defend)

    e = sub.add_parser("eval", help="dataset report: ablation or feature-matching rows")
    e.add_argument("--ckpt-att", required=True)
    e.add_argument("--ckpt-def", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("ablation", "fm"), required=True)
    e.add_argument("--out", required=True, help="report JSON; CSV and PNG figures are written alongside")
    e.add_argument("--config", help="JSON config; eval.* keys apply")
    e.add_argument("--history", help="history.jsonl to plot as a training curve")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def _setup_logging() -> None:
    level = os.environ.get("PPD_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"PPD_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except UsageError as e:
        print(f"ppd {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("traceback", exc_info=True)
        print(f"ppd {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
