"""Dataset-level evaluation: the attack/defence ablation and feature-matching refinement."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .agent import QNet, infer_attack, infer_defense
from .core import Metrics, Rng
from .graph_env import build_graph, feature_match_prompts, training_pool

ABLATION_ROWS = ("ideal", "attacked", "defended")
FM_ROWS = ("feature_matching", "feature_matching+ppd")


@dataclass(frozen=True)
class EvalConfig:
    attack_steps: int = 15
    defense_budget: int = 20
    fm_budget: int = 20
    q_threshold: float = 0.0
    patch_size: int = 8
    interval: int = 8
    flip_prob: float = 0.5
    seed: int = 0


def summarize(name: str, metrics: list[Metrics]) -> dict:
    d = np.array([m.dice for m in metrics])
    j = np.array([m.iou for m in metrics])
    return {
        "name": name,
        "n": len(metrics),
        "dice_mean": float(d.mean()),
        "dice_std": float(d.std()),
        "iou_mean": float(j.mean()),
        "iou_std": float(j.std()),
    }


def scene_pool(gt, index: int, cfg: EvalConfig):
    """Ideal prompts plus inactive distractors for evaluation scene ``index``."""
    return training_pool(gt, Rng(cfg.seed, 1000 + index), cfg.interval, cfg.patch_size, cfg.flip_prob)


def random_defense(pool, budget: int, rng: Rng):
    """Deactivate ``budget`` uniformly chosen active prompts, keeping at least one."""
    ids = np.asarray(pool.active_ids())
    k = min(budget, len(ids) - 1)
    if k <= 0:
        return pool
    active = pool.active.copy()
    active[ids[rng.choice(len(ids), k)]] = False
    return pool.with_active(active)


def evaluate_ablation(q_att: QNet, q_def: QNet, dataset, seg, cfg: EvalConfig = EvalConfig()) -> dict:
    """Ideal -> attacked -> defended on every scene."""
    if not dataset:
        raise ValueError("empty dataset")
    rows = {name: [] for name in ABLATION_ROWS}
    scenes = []
    for i, (img, gt) in enumerate(dataset):
        graph = build_graph(img, cfg.patch_size)
        pool = scene_pool(gt, i, cfg)
        attacked = infer_attack(q_att, pool, graph, cfg.attack_steps)
        defended = infer_defense(q_def, attacked, graph, cfg.defense_budget, cfg.q_threshold)
        rec = {"scene": i}
        for name, p in zip(ABLATION_ROWS, (pool, attacked, defended)):
            m = Metrics.of(seg(img, p.active_prompts()), gt)
            rows[name].append(m)
            rec[f"dice_{name}"] = m.dice
            rec[f"iou_{name}"] = m.iou
        rec["n_removed"] = int(attacked.active.sum() - defended.active.sum())
        scenes.append(rec)
    return {
        "mode": "ablation",
        "config": asdict(cfg),
        "rows": [summarize(name, rows[name]) for name in ABLATION_ROWS],
        "scenes": scenes,
    }


def evaluate_fm(q_def: QNet, dataset, seg, cfg: EvalConfig = EvalConfig()) -> dict:
    """Raw feature-matched prompts vs. defender-refined ones.

    Scene 0 is the one-shot reference; it is left out of the scored scenes
    unless it is the only one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    ref_img, ref_mask = dataset[0]
    targets = list(enumerate(dataset))[1:] or list(enumerate(dataset))
    rows = {name: [] for name in FM_ROWS}
    scenes = []
    for i, (img, gt) in targets:
        graph = build_graph(img, cfg.patch_size)
        raw = feature_match_prompts(ref_img, ref_mask, img, cfg.patch_size)
        refined = infer_defense(q_def, raw, graph, cfg.fm_budget, cfg.q_threshold)
        rec = {"scene": i}
        for name, p in zip(FM_ROWS, (raw, refined)):
            m = Metrics.of(seg(img, p.active_prompts()), gt)
            rows[name].append(m)
            rec[f"dice_{name}"] = m.dice
            rec[f"iou_{name}"] = m.iou
        rec["n_removed"] = int(raw.active.sum() - refined.active.sum())
        scenes.append(rec)
    return {
        "mode": "fm",
        "config": asdict(cfg),
        "reference_scene": 0,
        "rows": [summarize(name, rows[name]) for name in FM_ROWS],
        "scenes": scenes,
    }


def random_defense_dice(dataset, q_att: QNet, seg, cfg: EvalConfig = EvalConfig(), trials: int = 20) -> np.ndarray:
    """Per-scene mean Dice of a random defender (same budget) against the trained attacker."""
    out = []
    for i, (img, gt) in enumerate(dataset):
        graph = build_graph(img, cfg.patch_size)
        attacked = infer_attack(q_att, scene_pool(gt, i, cfg), graph, cfg.attack_steps)
        rng = Rng(cfg.seed, 5000 + i)
        scores = [
            Metrics.of(seg(img, random_defense(attacked, cfg.defense_budget, rng).active_prompts()), gt).dice
            for _ in range(trials)
        ]
        out.append(float(np.mean(scores)))
    return np.array(out)
