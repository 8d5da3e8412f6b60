"""Deep Q-learning for the attack and defence agents, written directly in numpy.

The network scores one candidate action at a time (12 -> 64 -> 64 -> 1, ReLU
hidden layers), so the same weights handle any number of legal actions and
``max_a' Q(s', a')`` is a max over the successor's candidate rows.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import Rng
from .graph_env import (
    ATTACK,
    DEFENSE,
    N_FEATURES,
    EnvState,
    PromptPool,
    build_graph,
    encode_actions,
    env_reset,
    env_step,
    legal_actions,
    training_pool,
)

log = logging.getLogger(__name__)

LAYER_SIZES = (N_FEATURES, 64, 64, 1)


# ---------------------------------------------------------------------------
# network


@dataclass
class QNet:
    """Weights ``W[l]`` have shape ``(fan_out, fan_in)``; the forward pass is ``W @ x + b``."""

    weights: list
    biases: list

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def arrays(self) -> list:
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "QNet":
        return cls(weights=list(arrays[0::2]), biases=list(arrays[1::2]))


def init_qnet(rng: Rng, sizes=LAYER_SIZES) -> QNet:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return QNet(weights, biases)


def zero_qnet(sizes=LAYER_SIZES) -> QNet:
    return QNet(
        [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        [np.zeros(o) for o in sizes[1:]],
    )


def _forward(p: QNet, x: np.ndarray):
    acts = [x]
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def q_values(p: QNet, phis: np.ndarray) -> np.ndarray:
    """Q-values for a ``(k, 12)`` batch of action features."""
    phis = np.asarray(phis, dtype=np.float64)
    if phis.ndim != 2 or phis.shape[1] != p.weights[0].shape[1]:
        raise ValueError(f"expected (k, {p.weights[0].shape[1]}) features, got {phis.shape}")
    return _forward(p, phis)[-1][:, 0]


def qnet_forward(p: QNet, phi) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (p.weights[0].shape[1],):
        raise ValueError(f"expected {p.weights[0].shape[1]} features, got shape {phi.shape}")
    return float(q_values(p, phi[None, :])[0])


def sync_target(online: QNet) -> QNet:
    return copy.deepcopy(online)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: QNet, lr: float = 1e-4) -> "AdamState":
        arrs = p.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], lr=lr)


def adam_step(p: QNet, state: AdamState, grads):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    arrs = p.arrays()
    if len(grads) != len(arrs) or any(g.shape != a.shape for g, a in zip(grads, arrs)):
        raise ValueError("gradient shapes do not match parameters")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return QNet.from_arrays(new_p), AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# replay and TD loss


@dataclass
class Transition:
    phi: np.ndarray
    reward: float
    next_phis: np.ndarray  # (k, 12); k = 0 when terminal
    terminal: bool

    def __post_init__(self):
        if self.terminal and len(self.next_phis):
            raise ValueError("terminal transitions carry no successor actions")


class ReplayBuffer:
    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Transition] = []
        self.cursor = 0

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self.cursor] = tr
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: Rng) -> list[Transition]:
        idx = rng.integers(0, len(self.items), batch_size)
        return [self.items[i] for i in idx]


def td_targets(target: QNet, batch, gamma: float) -> np.ndarray:
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    y = rewards.copy()
    live = [i for i, t in enumerate(batch) if not t.terminal and len(t.next_phis)]
    if live:
        counts = [len(batch[i].next_phis) for i in live]
        q_next = q_values(target, np.concatenate([batch[i].next_phis for i in live]))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        y[live] += gamma * np.maximum.reduceat(q_next, starts)
    return y


def td_loss_and_grad(p: QNet, target: QNet, batch, gamma: float):
    """Mean squared TD error and its gradient w.r.t. the online parameters.

    The bootstrapped target is computed with ``target`` and treated as a constant.
    Gradients come back in :meth:`QNet.arrays` order.
    """
    if not batch:
        raise ValueError("empty batch")
    y = td_targets(target, batch, gamma)
    x = np.stack([np.asarray(t.phi, dtype=np.float64) for t in batch])
    acts = _forward(p, x)
    q = acts[-1][:, 0]
    err = q - y
    loss = float(np.mean(err * err))

    n = len(batch)
    delta = (2.0 / n) * err[:, None]  # dL/dz of the output layer
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.weights)
    for layer in range(len(p.weights) - 1, -1, -1):
        grads_w[layer] = delta.T @ acts[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ p.weights[layer]) * (acts[layer] > 0)
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    return loss, grads


# ---------------------------------------------------------------------------
# policy


def select_action(p: QNet, phis, epsilon: float, rng: Rng) -> int:
    """Epsilon-greedy index into ``phis``; greedy ties go to the lowest index."""
    if len(phis) == 0:
        raise ValueError("no actions to choose from")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.next_float() < epsilon:
        return rng.next_int(len(phis))
    return int(np.argmax(q_values(p, phis)))


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 200
    steps_min: int = 5
    steps_max: int = 20
    gamma: float = 0.99
    batch_size: int = 128
    target_sync_every: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    lr: float = 1e-4
    replay_capacity: int = 10000
    patch_size: int = 8
    interval: int = 8
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not 1 <= self.steps_min <= self.steps_max:
            raise ValueError("need 1 <= steps_min <= steps_max")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if self.batch_size < 1 or self.target_sync_every < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size, target_sync_every and replay_capacity must be >= 1")


def epsilon_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


# ---------------------------------------------------------------------------
# training


@dataclass
class Learner:
    """Online/target pair with its optimiser and replay memory."""

    online: QNet
    target: QNet
    opt: AdamState
    buffer: ReplayBuffer
    losses: list = field(default_factory=list)

    @classmethod
    def fresh(cls, rng: Rng, cfg: TrainConfig) -> "Learner":
        net = init_qnet(rng)
        return cls(net, sync_target(net), AdamState.for_params(net, cfg.lr), ReplayBuffer(cfg.replay_capacity))

    def update(self, cfg: TrainConfig, rng: Rng) -> None:
        if len(self.buffer) < cfg.batch_size:
            return
        batch = self.buffer.sample(cfg.batch_size, rng)
        loss, grads = td_loss_and_grad(self.online, self.target, batch, cfg.gamma)
        self.online, self.opt = adam_step(self.online, self.opt, grads)
        self.losses.append(loss)


class Trainer:
    """Alternating attack/defence training over a fixed dataset.

    ``on_step`` (optional) is called as ``on_step(trainer)`` after every learning
    environment step, once the target-sync rule for that step has been applied.
    """

    def __init__(self, dataset, cfg: TrainConfig, seg, on_step: Callable | None = None):
        if not dataset:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.cfg = cfg
        self.seg = seg
        self.on_step = on_step
        self.att = Learner.fresh(Rng(cfg.seed, 1), cfg)
        self.dfn = Learner.fresh(Rng(cfg.seed, 2), cfg)
        self.episode_rng = Rng(cfg.seed, 3)
        self.explore_rng = Rng(cfg.seed, 4)
        self.replay_rng = Rng(cfg.seed, 5)
        self.global_step = 0
        self.history: list[dict] = []
        self._graphs: dict[int, object] = {}

    def graph(self, i):
        if i not in self._graphs:
            self._graphs[i] = build_graph(self.dataset[i][0], self.cfg.patch_size)
        return self._graphs[i]

    def _phase(self, learner: Learner, state: EnvState, graph, img, gt, epsilon: float) -> EnvState:
        legal = legal_actions(state) if not state.terminal else []
        phis = encode_actions(state, graph, legal)
        while not state.terminal:
            k = select_action(learner.online, phis, epsilon, self.explore_rng)
            state_next, reward, _ = env_step(state, legal[k], self.seg, img, gt)
            if state_next.terminal:
                legal_next, phis_next = [], np.zeros((0, N_FEATURES))
            else:
                legal_next = legal_actions(state_next)
                phis_next = encode_actions(state_next, graph, legal_next)
            learner.buffer.add(Transition(phis[k], reward, phis_next, state_next.terminal))
            learner.update(self.cfg, self.replay_rng)
            self.global_step += 1
            if self.global_step % self.cfg.target_sync_every == 0:
                self.att.target = sync_target(self.att.online)
                self.dfn.target = sync_target(self.dfn.online)
            if self.on_step is not None:
                self.on_step(self)
            state, legal, phis = state_next, legal_next, phis_next
        return state

    def run_episode(self, ep: int) -> dict:
        cfg = self.cfg
        i = ep % len(self.dataset)
        img, gt = self.dataset[i]
        graph = self.graph(i)
        rng = self.episode_rng
        t_att = cfg.steps_min + rng.next_int(cfg.steps_max - cfg.steps_min + 1)
        t_def = cfg.steps_min + rng.next_int(cfg.steps_max - cfg.steps_min + 1)
        pool = training_pool(gt, rng, cfg.interval, cfg.patch_size, cfg.flip_prob)
        eps = epsilon_at(ep, max(cfg.episodes - 1, 1), cfg)

        self.att.losses, self.dfn.losses = [], []
        start = env_reset(pool, ATTACK, t_att, self.seg, img, gt)
        self._phase(self.att, start, graph, img, gt, eps)

        attacked = greedy_rollout(self.att.online, start, graph, self.seg, img, gt)[0]
        # the defender sees only what the attacker left switched on
        committed = attacked.pool.subset(attacked.pool.active_ids())
        defended = self._phase(self.dfn, env_reset(committed, DEFENSE, t_def, self.seg, img, gt), graph, img, gt, eps)

        rec = {
            "episode": ep,
            "t_att": t_att,
            "t_def": t_def,
            "dice_ideal": start.last_dice,
            "dice_attacked": attacked.last_dice,
            "dice_defended": defended.last_dice,
            "loss_att": float(np.mean(self.att.losses)) if self.att.losses else None,
            "loss_def": float(np.mean(self.dfn.losses)) if self.dfn.losses else None,
        }
        self.history.append(rec)
        return rec

    def run(self):
        for ep in range(self.cfg.episodes):
            rec = self.run_episode(ep)
            if ep % 20 == 0 or ep == self.cfg.episodes - 1:
                log.info(
                    "episode %d eps=%.2f ideal=%.3f attacked=%.3f defended=%.3f",
                    ep, epsilon_at(ep, max(self.cfg.episodes - 1, 1), self.cfg),
                    rec["dice_ideal"], rec["dice_attacked"], rec["dice_defended"],
                )
        return self.att.online, self.dfn.online, self.history


def train_ppd(dataset, cfg: TrainConfig, seg, on_step=None):
    """Train ``(q_att, q_def)`` and return them with the per-episode history."""
    return Trainer(dataset, cfg, seg, on_step).run()


# ---------------------------------------------------------------------------
# rollouts and inference


def greedy_rollout(q: QNet, state: EnvState, graph, seg, img, gt):
    """Run ``q`` greedily until the state is terminal; returns ``(state, trace)``."""
    trace = []
    while not state.terminal:
        legal = legal_actions(state)
        k = int(np.argmax(q_values(q, encode_actions(state, graph, legal))))
        state, reward, _ = env_step(state, legal[k], seg, img, gt)
        trace.append({"phase": state.phase, "step": state.step, "action": legal[k], "reward": reward, "dice": state.last_dice})
    return state, trace


def infer_defense(q_def: QNet, pool: PromptPool, graph, budget: int, q_threshold: float = 0.0) -> PromptPool:
    """Deactivate prompts greedily by Q-value without looking at ground truth.

    Stops after ``budget`` removals, when the best Q-value drops below
    ``q_threshold``, or when a single active prompt is left. Inactive prompts
    are invisible to the defender, as in training; they are returned untouched.
    """
    ids = np.asarray(pool.active_ids())
    if len(ids) == 0:
        raise ValueError("pool has no active prompts")
    if budget <= 0:
        return pool
    state = EnvState(DEFENSE, pool.subset(ids), 0, budget, None, False)
    while state.step < budget and int(state.pool.active.sum()) > 1:
        legal = legal_actions(state)
        q = q_values(q_def, encode_actions(state, graph, legal))
        k = int(np.argmax(q))
        if q[k] < q_threshold:
            break
        state = EnvState(DEFENSE, state.pool.toggled(legal[k]), state.step + 1, budget, None, False)
    active = pool.active.copy()
    active[ids] = state.pool.active
    return pool.with_active(active)


def infer_attack(q_att: QNet, pool: PromptPool, graph, steps: int) -> PromptPool:
    """Activate ``steps`` prompts greedily by Q-value (no ground truth needed)."""
    state = EnvState(ATTACK, pool, 0, steps, None, steps <= 0 or pool.active.all())
    while not state.terminal:
        legal = legal_actions(state)
        k = int(np.argmax(q_values(q_att, encode_actions(state, graph, legal))))
        nxt = state.pool.toggled(legal[k])
        step = state.step + 1
        state = EnvState(ATTACK, nxt, step, steps, None, step >= steps or nxt.active.all())
    return state.pool


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, q: QNet, kind: str, config: dict, seed: int) -> None:
    if kind not in (ATTACK, DEFENSE):
        raise ValueError(f"kind must be 'attack' or 'defense', got {kind!r}")
    layers = [
        {"rows": int(w.shape[0]), "cols": int(w.shape[1]), "w": w.reshape(-1).tolist(), "b": b.tolist()}
        for w, b in zip(q.weights, q.biases)
    ]
    obj = {"version": 1, "kind": kind, "layers": layers, "config": config, "seed": seed}
    with open(path, "w") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_checkpoint(path, expect_kind: str | None = None):
    """Return ``(qnet, checkpoint_dict)``; raises ``ValueError`` on a kind mismatch."""
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    if expect_kind is not None and obj.get("kind") != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {obj.get('kind')}")
    weights = [np.asarray(l["w"], dtype=np.float64).reshape(l["rows"], l["cols"]) for l in obj["layers"]]
    biases = [np.asarray(l["b"], dtype=np.float64) for l in obj["layers"]]
    return QNet(weights, biases), obj


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
