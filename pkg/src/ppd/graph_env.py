"""Dual-space patch graph, prompt pools and the attack/defence MDP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Rng, dice

ATTACK = "attack"
DEFENSE = "defense"
N_FEATURES = 12
AGREEMENT_K = 4

LUMA = np.array([0.299, 0.587, 0.114])
_BIN_ANGLES = np.deg2rad([0.0, 45.0, 90.0, 135.0])


# ---------------------------------------------------------------------------
# patch grid and graph


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    width: int
    height: int
    centers: np.ndarray  # (n, 2) float, (x, y)
    descriptors: np.ndarray  # (n, 8)

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def patch_of(self, x, y):
        """Index of the patch containing pixel ``(x, y)``; border pixels snap to the last row/col."""
        c = np.minimum(np.asarray(x) // self.patch_size, self.cols - 1)
        r = np.minimum(np.asarray(y) // self.patch_size, self.rows - 1)
        return r * self.cols + c


def patch_descriptors(img: np.ndarray, patch_size: int) -> np.ndarray:
    """Handcrafted 8-d patch descriptor.

    ``[mean R, mean G, mean B, luminance std, 4-bin gradient orientation histogram]``.
    Colour means are scaled by 1/255 and the std by 1/127.5 (its maximum for 8-bit
    data). The histogram bins luminance gradients (central differences) to the
    nearest of 0/45/90/135 degrees, weights them by magnitude and normalises to
    unit mass; a flat patch gets an all-zero histogram.
    """
    h, w = img.shape[:2]
    rows, cols = h // patch_size, w // patch_size
    rgb = img.astype(np.float64)
    lum = rgb @ LUMA
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    # nearest bin on the half circle
    diff = np.abs(ang[..., None] - _BIN_ANGLES)
    diff = np.minimum(diff, np.pi - diff)
    bins = np.argmin(diff, axis=-1)

    ps = patch_size
    crop = (slice(0, rows * ps), slice(0, cols * ps))

    def blocks(a):
        a = a[crop]
        return a.reshape(rows, ps, cols, ps, *a.shape[2:]).swapaxes(1, 2).reshape(rows * cols, ps * ps, *a.shape[2:])

    rgb_b = blocks(rgb)
    lum_b = blocks(lum)
    mag_b = blocks(mag)
    bin_b = blocks(bins)

    desc = np.zeros((rows * cols, 8))
    desc[:, 0:3] = rgb_b.mean(axis=1) / 255.0
    desc[:, 3] = lum_b.std(axis=1) / 127.5
    for k in range(4):
        desc[:, 4 + k] = np.where(bin_b == k, mag_b, 0.0).sum(axis=1)
    mass = desc[:, 4:].sum(axis=1, keepdims=True)
    desc[:, 4:] = np.divide(desc[:, 4:], mass, out=np.zeros_like(desc[:, 4:]), where=mass > 0)
    return desc


def build_patch_grid(img: np.ndarray, patch_size: int = 8) -> PatchGrid:
    if patch_size < 2:
        raise ValueError("patch_size must be >= 2")
    h, w = img.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {w}x{h} smaller than one {patch_size}px patch")
    rows, cols = h // patch_size, w // patch_size
    r, c = np.divmod(np.arange(rows * cols), cols)
    centers = np.stack([c * patch_size + patch_size / 2.0, r * patch_size + patch_size / 2.0], axis=1)
    return PatchGrid(patch_size, rows, cols, w, h, centers, patch_descriptors(img, patch_size))


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def feature_distance_matrix(grid: PatchGrid) -> np.ndarray:
    return _pairwise_euclidean(grid.descriptors)


def physical_distance_matrix(grid: PatchGrid) -> np.ndarray:
    return _pairwise_euclidean(grid.centers)


@dataclass(frozen=True)
class DualSpaceGraph:
    grid: PatchGrid
    m_f: np.ndarray
    m_p: np.ndarray

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def f_max(self) -> float:
        return float(self.m_f.max())

    @property
    def img_diag(self) -> float:
        return math.hypot(self.grid.width, self.grid.height)


def build_graph(img: np.ndarray, patch_size: int = 8) -> DualSpaceGraph:
    grid = build_patch_grid(img, patch_size)
    return DualSpaceGraph(grid, feature_distance_matrix(grid), physical_distance_matrix(grid))


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptPoint:
    id: int
    x: int
    y: int
    polarity: int  # +1 positive, -1 negative
    active: bool
    patch_index: int


@dataclass(frozen=True)
class PromptPool:
    """Column-oriented prompt pool; row ``i`` is the prompt with id ``i``."""

    xs: np.ndarray
    ys: np.ndarray
    polarity: np.ndarray
    active: np.ndarray
    patch: np.ndarray

    def __len__(self):
        return len(self.xs)

    @property
    def prompts(self) -> list[PromptPoint]:
        return [
            PromptPoint(i, int(self.xs[i]), int(self.ys[i]), int(self.polarity[i]), bool(self.active[i]), int(self.patch[i]))
            for i in range(len(self))
        ]

    def active_prompts(self) -> list[tuple]:
        """Active ``(x, y, polarity)`` triples in ascending id order (segmenter input)."""
        idx = np.flatnonzero(self.active)
        return [(int(self.xs[i]), int(self.ys[i]), int(self.polarity[i])) for i in idx]

    def active_ids(self) -> list[int]:
        return np.flatnonzero(self.active).tolist()

    def with_active(self, active) -> "PromptPool":
        return replace(self, active=np.asarray(active, dtype=bool).copy())

    def toggled(self, i: int) -> "PromptPool":
        active = self.active.copy()
        active[i] = not active[i]
        return replace(self, active=active)

    def subset(self, ids) -> "PromptPool":
        """Prompts ``ids`` renumbered 0..k-1 in the given order."""
        ids = np.asarray(ids, dtype=np.int64)
        return PromptPool(*(getattr(self, f)[ids].copy() for f in ("xs", "ys", "polarity", "active", "patch")))

    def concat(self, other: "PromptPool") -> "PromptPool":
        return PromptPool(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in ("xs", "ys", "polarity", "active", "patch")))

    def to_dict(self) -> dict:
        return {
            "prompts": [
                {
                    "id": p.id,
                    "x": p.x,
                    "y": p.y,
                    "polarity": "pos" if p.polarity > 0 else "neg",
                    "status": "active" if p.active else "inactive",
                }
                for p in self.prompts
            ]
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict, grid: PatchGrid) -> "PromptPool":
        items = sorted(obj["prompts"], key=lambda p: p["id"])
        if [p["id"] for p in items] != list(range(len(items))):
            raise ValueError("prompt ids must be 0..n-1")
        for p in items:
            if not (0 <= p["x"] < grid.width and 0 <= p["y"] < grid.height):
                raise ValueError(f"prompt {p['id']} lies outside the image")
            if p["polarity"] not in ("pos", "neg") or p["status"] not in ("active", "inactive"):
                raise ValueError(f"prompt {p['id']} has a bad polarity/status")
        return make_pool(
            [p["x"] for p in items],
            [p["y"] for p in items],
            [1 if p["polarity"] == "pos" else -1 for p in items],
            [p["status"] == "active" for p in items],
            grid,
        )

    @classmethod
    def from_json(cls, text: str, grid: PatchGrid) -> "PromptPool":
        return cls.from_dict(json.loads(text), grid)


def make_pool(xs, ys, polarity, active, grid: PatchGrid) -> PromptPool:
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    return PromptPool(
        xs=xs,
        ys=ys,
        polarity=np.asarray(polarity, dtype=np.int64),
        active=np.asarray(active, dtype=bool),
        patch=np.asarray(grid.patch_of(xs, ys), dtype=np.int64).reshape(-1),
    )


def _grid_shape_for(mask, patch_size):
    h, w = mask.shape
    return PatchGrid(patch_size, h // patch_size, w // patch_size, w, h, np.empty((0, 2)), np.empty((0, 8)))


def init_ideal_prompts(mask: np.ndarray, interval: int = 8, patch_size: int = 8, active: bool = True) -> PromptPool:
    """Regular-lattice prompts labelled by the ground-truth mask.

    Points sit at ``(c*interval + interval//2, r*interval + interval//2)`` for every
    lattice cell fully inside the image; foreground pixels give positives.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    h, w = mask.shape
    rows, cols = h // interval, w // interval
    if rows == 0 or cols == 0:
        raise ValueError("no ideal prompt fits in the mask")
    r, c = np.divmod(np.arange(rows * cols), cols)
    xs = c * interval + interval // 2
    ys = r * interval + interval // 2
    pol = np.where(mask[ys, xs] > 0, 1, -1)
    grid = _grid_shape_for(mask, patch_size)
    return make_pool(xs, ys, pol, np.full(len(xs), active), grid)


def sample_distractors(mask: np.ndarray, rng: Rng, interval: int = 8, patch_size: int = 8, flip_prob: float = 0.5) -> PromptPool:
    """Inactive candidate prompts for the attacker, one per lattice cell.

    Each lands on a uniformly random pixel of its cell and takes the mask label
    there, inverted with probability ``flip_prob``. Inverted candidates are the
    harmful ones; the rest are redundant but correct.
    """
    h, w = mask.shape
    rows, cols = h // interval, w // interval
    r, c = np.divmod(np.arange(rows * cols), cols)
    xs = c * interval + rng.integers(0, interval, rows * cols)
    ys = r * interval + rng.integers(0, interval, rows * cols)
    pol = np.where(mask[ys, xs] > 0, 1, -1)
    flip = rng.uniform(0.0, 1.0, rows * cols) < flip_prob
    pol = np.where(flip, -pol, pol)
    return make_pool(xs, ys, pol, np.zeros(len(xs), dtype=bool), _grid_shape_for(mask, patch_size))


def training_pool(mask: np.ndarray, rng: Rng, interval: int = 8, patch_size: int = 8, flip_prob: float = 0.5) -> PromptPool:
    """Ideal prompts (active) followed by distractor candidates (inactive)."""
    ideal = init_ideal_prompts(mask, interval, patch_size, active=True)
    return ideal.concat(sample_distractors(mask, rng, interval, patch_size, flip_prob))


def feature_match_prompts(ref_img, ref_mask, target_img, patch_size: int = 8) -> PromptPool:
    """One active prompt per target patch, labelled through its nearest reference patch."""
    ref = build_patch_grid(ref_img, patch_size)
    tgt = build_patch_grid(target_img, patch_size)
    d = tgt.descriptors[:, None, :] - ref.descriptors[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    match = np.argmin(dist, axis=1)  # first minimum = lowest reference index
    rc = ref.centers[match].astype(np.int64)
    pol = np.where(ref_mask[rc[:, 1], rc[:, 0]] > 0, 1, -1)
    tc = tgt.centers.astype(np.int64)
    return make_pool(tc[:, 0], tc[:, 1], pol, np.ones(len(tc), dtype=bool), tgt)


# ---------------------------------------------------------------------------
# MDP


@dataclass(frozen=True)
class EnvState:
    phase: str
    pool: PromptPool
    step: int
    max_steps: int
    last_dice: float | None
    terminal: bool
    start_dice: float | None = field(default=None, compare=False)


def _legal_mask(phase: str, pool: PromptPool) -> np.ndarray:
    if phase == ATTACK:
        return ~pool.active
    if phase == DEFENSE:
        return pool.active.copy()
    raise ValueError(f"unknown phase {phase!r}")


def _is_terminal(phase, pool, step, max_steps) -> bool:
    return step >= max_steps or not _legal_mask(phase, pool).any()


def legal_actions(state: EnvState) -> list[int]:
    """Inactive ids in the attack phase, active ids in the defence phase, ascending.

    Raises once the step budget is spent; an exhausted action set just
    returns ``[]`` (such a state is already terminal).
    """
    if state.step >= state.max_steps:
        raise ValueError("no actions in a terminal state: step budget exhausted")
    return np.flatnonzero(_legal_mask(state.phase, state.pool)).tolist()


def env_reset(pool: PromptPool, phase: str, max_steps: int, seg, img, gt=None) -> EnvState:
    if len(pool) == 0:
        raise ValueError("prompt pool is empty")
    d0 = None
    if gt is not None:
        d0 = dice(seg(img, pool.active_prompts()), gt)
    return EnvState(phase, pool, 0, max_steps, d0, _is_terminal(phase, pool, 0, max_steps), start_dice=d0)


def env_step(state: EnvState, action: int, seg, img, gt):
    """Toggle one prompt, re-segment, and pay the Dice change.

    Attack rewards are ``-(d_t - d_{t-1})``, defence rewards ``+(d_t - d_{t-1})``.
    Returns ``(next_state, reward, predicted_mask)``.
    """
    if state.last_dice is None or gt is None:
        raise ValueError("env_step needs ground truth; this state was reset for inference")
    if state.terminal:
        raise ValueError("episode is over")
    if not (0 <= action < len(state.pool)) or not _legal_mask(state.phase, state.pool)[action]:
        raise ValueError(f"illegal action {action} in {state.phase} phase")
    pool = state.pool.toggled(action)
    pred = seg(img, pool.active_prompts())
    d = dice(pred, gt)
    delta = d - state.last_dice
    reward = -delta if state.phase == ATTACK else delta
    step = state.step + 1
    nxt = EnvState(state.phase, pool, step, state.max_steps, d, _is_terminal(state.phase, pool, step, state.max_steps), state.start_dice)
    return nxt, reward, pred


def _agreement(df, refs, polarity, cand_pol):
    # stable argsort keeps the lower id first among equal distances
    d = np.where(refs, df, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :AGREEMENT_K]
    valid = np.take_along_axis(refs, order, axis=1)
    same = (polarity[order] == cand_pol[:, None]) & valid
    cnt = valid.sum(axis=1)
    return np.where(cnt > 0, same.sum(axis=1) / np.maximum(cnt, 1), 0.5)


def encode_actions(state: EnvState, graph: DualSpaceGraph, ids) -> np.ndarray:
    """Feature rows for candidate prompts ``ids``; shape ``(len(ids), 12)``.

    Columns: polarity (+1/-1), status (1 active), phase (1 attack),
    min/mean feature distance to other active positives, min/mean feature
    distance to other active negatives, min/mean physical distance to other
    active prompts, active fraction of the pool, positive fraction of the
    active set, and label agreement: the share of the candidate's
    ``AGREEMENT_K`` nearest other active prompts (by feature distance, ties to
    the lower id) that carry its polarity, 0.5 when there are none. Feature
    distances are divided by the graph's largest feature distance and physical
    ones by the image diagonal; an empty reference group reads 1.0. The
    candidate itself never counts as a reference. Nothing here depends on
    ground truth.
    """
    pool = state.pool
    ids = np.asarray(ids, dtype=np.int64)
    k = len(ids)
    out = np.zeros((k, N_FEATURES))
    if k == 0:
        return out
    f_max = graph.f_max or 1.0
    cand_patch = pool.patch[ids]
    df = graph.m_f[cand_patch][:, pool.patch] / f_max
    dp = graph.m_p[cand_patch][:, pool.patch] / graph.img_diag
    others = ids[:, None] != np.arange(len(pool))[None, :]
    act = pool.active[None, :] & others
    pos = act & (pool.polarity[None, :] > 0)
    neg = act & (pool.polarity[None, :] < 0)

    def min_mean(d, m):
        cnt = m.sum(axis=1)
        mn = np.where(m, d, np.inf).min(axis=1)
        mean = np.where(m, d, 0.0).sum(axis=1) / np.maximum(cnt, 1)
        empty = cnt == 0
        return np.where(empty, 1.0, mn), np.where(empty, 1.0, mean)

    out[:, 0] = pool.polarity[ids]
    out[:, 1] = pool.active[ids]
    out[:, 2] = 1.0 if state.phase == ATTACK else 0.0
    out[:, 3], out[:, 4] = min_mean(df, pos)
    out[:, 5], out[:, 6] = min_mean(df, neg)
    out[:, 7], out[:, 8] = min_mean(dp, act)
    n_active = int(pool.active.sum())
    out[:, 9] = n_active / len(pool)
    out[:, 10] = (pool.active & (pool.polarity > 0)).sum() / n_active if n_active else 0.0
    out[:, 11] = _agreement(df, act, pool.polarity, pool.polarity[ids])
    return out


def encode_action_features(state: EnvState, graph: DualSpaceGraph, action: int) -> np.ndarray:
    if not 0 <= action < len(state.pool):
        raise ValueError(f"no prompt with id {action}")
    return encode_actions(state, graph, [action])[0]
