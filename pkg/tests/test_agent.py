import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppd.agent import (
    AdamState,
    QNet,
    ReplayBuffer,
    TrainConfig,
    Transition,
    adam_step,
    epsilon_at,
    infer_attack,
    infer_defense,
    init_qnet,
    load_checkpoint,
    q_values,
    qnet_forward,
    save_checkpoint,
    select_action,
    sync_target,
    td_loss_and_grad,
    train_ppd,
    zero_qnet,
)
from ppd.core import Rng
from ppd.graph_env import build_graph, feature_match_prompts, make_pool, training_pool
from ppd.segmenter import proxy_segmenter
from ppd.synthdata import gen_dataset


def loop_forward(p: QNet, x):
    """Plain-Python matrix-vector pass used as an oracle."""
    h = list(map(float, x))
    for layer, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = [sum(w[i][j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        h = z if layer == len(p.weights) - 1 else [max(v, 0.0) for v in z]
    return h[0]


def const_net(value):
    p = zero_qnet()
    p.biases[-1][:] = value
    return p


def picker_net():
    """Q(phi) = phi[0] for phi[0] >= 0."""
    p = zero_qnet()
    p.weights[0][0, 0] = 1.0
    p.weights[1][0, 0] = 1.0
    p.weights[2][0, 0] = 1.0
    return p


def random_transition(rng, terminal=None):
    terminal = rng.random() < 0.3 if terminal is None else terminal
    k = 0 if terminal else int(rng.integers(1, 6))
    return Transition(rng.normal(size=12), float(rng.normal()), rng.normal(size=(k, 12)), terminal)


# -- network ------------------------------------------------------------------


def test_parameter_count():
    assert init_qnet(Rng(0)).n_params == 5057


def test_zero_net_outputs_zero():
    assert qnet_forward(zero_qnet(), np.arange(12.0)) == 0.0


def test_output_bias_passthrough():
    assert qnet_forward(const_net(-0.37), np.random.default_rng(1).normal(size=12)) == -0.37


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for seed in range(5):
        p = init_qnet(Rng(seed))
        for b in p.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=12)
        assert abs(qnet_forward(p, x) - loop_forward(p, x)) <= 1e-12


def test_forward_rejects_bad_length():
    with pytest.raises(ValueError):
        qnet_forward(zero_qnet(), np.zeros(11))
    with pytest.raises(ValueError):
        q_values(zero_qnet(), np.zeros((3, 13)))


def test_glorot_bounds_and_zero_bias():
    p = init_qnet(Rng(7))
    for w in p.weights:
        lim = np.sqrt(6.0 / sum(w.shape))
        assert np.abs(w).max() <= lim
    assert all(not b.any() for b in p.biases)


# -- TD loss ------------------------------------------------------------------


def test_td_loss_example():
    tr = Transition(np.zeros(12), 0.2, np.zeros((3, 12)), False)
    loss, _ = td_loss_and_grad(const_net(1.0), const_net(1.0), [tr], 0.95)
    assert loss == pytest.approx(0.0225, abs=1e-15)


def test_td_loss_terminal_zero():
    tr = Transition(np.ones(12), 0.3, np.zeros((0, 12)), True)
    loss, grads = td_loss_and_grad(const_net(0.3), const_net(5.0), [tr], 0.99)
    assert loss == pytest.approx(0.0, abs=1e-30)
    assert all(not np.any(g) for g in grads)


def test_td_loss_empty_batch():
    with pytest.raises(ValueError):
        td_loss_and_grad(zero_qnet(), zero_qnet(), [], 0.9)


def test_terminal_transition_cannot_carry_successors():
    with pytest.raises(ValueError):
        Transition(np.zeros(12), 0.0, np.zeros((2, 12)), True)


def test_target_net_gets_no_gradient():
    rng = np.random.default_rng(0)
    online, target = init_qnet(Rng(1)), init_qnet(Rng(2))
    batch = [random_transition(rng, terminal=False) for _ in range(6)]
    before = [a.copy() for a in target.arrays()]
    td_loss_and_grad(online, target, batch, 0.9)
    assert all(np.array_equal(a, b) for a, b in zip(before, target.arrays()))


def finite_difference(online, target, batch, gamma, h=1e-5):
    arrays = online.arrays()
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            lp, _ = td_loss_and_grad(online, target, batch, gamma)
            a[idx] = old - h
            lm, _ = td_loss_and_grad(online, target, batch, gamma)
            a[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    online, target = init_qnet(Rng(3)), init_qnet(Rng(4))
    for b in online.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    batch = [random_transition(rng) for _ in range(8)]
    _, grads = td_loss_and_grad(online, target, batch, 0.99)
    assert max_relative_error(grads, finite_difference(online, target, batch, 0.99)) <= 1e-4


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = init_qnet(Rng(0))
    q, _ = adam_step(p, AdamState.for_params(p), [np.zeros_like(a) for a in p.arrays()])
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_adam_first_step_is_lr_sign():
    p = zero_qnet()
    grads = [np.zeros_like(a) for a in p.arrays()]
    grads[-1][0] = -3.7  # output bias
    q, st_ = adam_step(p, AdamState.for_params(p), grads)
    assert q.biases[-1][0] == pytest.approx(1e-4, rel=1e-6)
    assert st_.t == 1


def test_adam_shape_mismatch():
    p = zero_qnet()
    with pytest.raises(ValueError):
        adam_step(p, AdamState.for_params(p), [np.zeros(3)])


def test_adam_descends_quadratic():
    p = QNet([np.array([[1.0]])], [np.array([0.0])])
    st_ = AdamState.for_params(p, lr=0.1)
    ws = [1.0]
    for _ in range(10):
        w = p.weights[0][0, 0]
        p, st_ = adam_step(p, st_, [np.array([[2 * w]]), np.array([0.0])])
        ws.append(p.weights[0][0, 0])
    assert all(b < a for a, b in zip(ws, ws[1:]))


# -- replay -------------------------------------------------------------------


def test_replay_fifo_overwrite():
    buf = ReplayBuffer(5)
    for i in range(8):
        buf.add(Transition(np.zeros(12), float(i), np.zeros((0, 12)), True))
    assert len(buf) == 5
    assert sorted(t.reward for t in buf.items) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_replay_sample_deterministic():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.add(Transition(np.zeros(12), float(i), np.zeros((0, 12)), True))
    a = [t.reward for t in buf.sample(6, Rng(1))]
    b = [t.reward for t in buf.sample(6, Rng(1))]
    assert a == b


# -- policy -------------------------------------------------------------------


def _phis(values):
    phis = np.zeros((len(values), 12))
    phis[:, 0] = values
    return phis


def test_greedy_argmax_and_ties():
    net = picker_net()
    assert select_action(net, _phis([0.1, 0.7, 0.3]), 0.0, Rng(0)) == 1
    assert select_action(net, _phis([0.5, 0.5, 0.5]), 0.0, Rng(0)) == 0


def test_select_action_errors():
    with pytest.raises(ValueError):
        select_action(zero_qnet(), np.zeros((0, 12)), 0.0, Rng(0))
    with pytest.raises(ValueError):
        select_action(zero_qnet(), np.zeros((2, 12)), 1.5, Rng(0))


def test_full_exploration_is_uniform():
    rng = Rng(5)
    counts = np.bincount([select_action(zero_qnet(), np.zeros((4, 12)), 1.0, rng) for _ in range(10_000)], minlength=4)
    freq = counts / counts.sum()
    assert np.all((freq >= 0.23) & (freq <= 0.27))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(-10.0, 10.0))
def test_greedy_choice_invariant_to_affine_rescale(seed, scale, shift):
    rng = np.random.default_rng(seed)
    p = init_qnet(Rng(seed))
    phis = rng.normal(size=(7, 12))
    q = p.arrays()
    q[-2] = q[-2] * scale
    q[-1] = q[-1] * scale + shift
    assert select_action(p, phis, 0.0, Rng(0)) == select_action(QNet.from_arrays(q), phis, 0.0, Rng(0))


def test_epsilon_schedule():
    cfg = TrainConfig()
    assert epsilon_at(0, 100, cfg) == 1.0
    assert epsilon_at(100, 100, cfg) == pytest.approx(0.1)
    assert epsilon_at(50, 100, cfg) == pytest.approx(0.55)
    vals = [epsilon_at(s, 37, cfg) for s in range(60)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= 0.1 - 1e-12 and max(vals) <= 1.0
    with pytest.raises(ValueError):
        epsilon_at(0, 0, cfg)


def test_sync_target_is_deep_copy():
    online = init_qnet(Rng(0))
    target = sync_target(online)
    x = np.random.default_rng(0).normal(size=(5, 12))
    assert np.array_equal(q_values(online, x), q_values(target, x))
    grads = [np.ones_like(a) for a in online.arrays()]
    online2, _ = adam_step(online, AdamState.for_params(online), grads)
    online.weights[0][0, 0] += 1.0
    assert not np.array_equal(q_values(online, x), q_values(target, x))
    assert not np.array_equal(q_values(online2, x), q_values(target, x))
    again = sync_target(target)
    assert all(np.array_equal(a, b) for a, b in zip(again.arrays(), sync_target(target).arrays()))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps_min=10, steps_max=5)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epsilon_start=0.1, epsilon_end=0.5)


# -- training -----------------------------------------------------------------

SMALL = dict(episodes=6, steps_min=3, steps_max=5, batch_size=8, target_sync_every=7)


def test_zero_episodes_returns_fresh_nets():
    data = gen_dataset(2, base_seed=0)
    qa, qd, hist = train_ppd(data, TrainConfig(episodes=0, seed=3), proxy_segmenter())
    assert hist == []
    assert all(np.array_equal(a, b) for a, b in zip(qa.arrays(), init_qnet(Rng(3, 1)).arrays()))
    assert all(np.array_equal(a, b) for a, b in zip(qd.arrays(), init_qnet(Rng(3, 2)).arrays()))


def test_training_is_reproducible():
    data = gen_dataset(3, base_seed=0)
    cfg = TrainConfig(**SMALL)
    a = train_ppd(data, cfg, proxy_segmenter())
    b = train_ppd(data, cfg, proxy_segmenter())
    assert a[2] == b[2]
    for x, y in ((a[0], b[0]), (a[1], b[1])):
        assert all(np.array_equal(u, v) for u, v in zip(x.arrays(), y.arrays()))
    rec = a[2][0]
    assert set(rec) == {"episode", "t_att", "t_def", "dice_ideal", "dice_attacked", "dice_defended", "loss_att", "loss_def"}
    assert all(3 <= r["t_att"] <= 5 and 3 <= r["t_def"] <= 5 for r in a[2])


def test_training_updates_networks():
    data = gen_dataset(3, base_seed=0)
    qa, qd, hist = train_ppd(data, TrainConfig(**SMALL), proxy_segmenter())
    assert any(r["loss_att"] is not None for r in hist)
    fresh = init_qnet(Rng(0, 1))
    assert not all(np.array_equal(a, b) for a, b in zip(qa.arrays(), fresh.arrays()))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_ppd([], TrainConfig(), proxy_segmenter())


# -- inference ----------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    img, gt = gen_dataset(1, base_seed=50)[0]
    return img, gt, build_graph(img)


def test_defense_budget_zero_unchanged(scene):
    img, gt, graph = scene
    pool = training_pool(gt, Rng(0))
    out = infer_defense(init_qnet(Rng(0)), pool, graph, 0)
    assert np.array_equal(out.active, pool.active)


def test_defense_single_active_unchanged(scene):
    img, gt, graph = scene
    pool = make_pool([3, 40], [3, 40], [1, -1], [True, False], graph.grid)
    out = infer_defense(const_net(1.0), pool, graph, 10, q_threshold=-1e9)
    assert out.active.tolist() == [True, False]


def test_defense_requires_active_prompt(scene):
    img, gt, graph = scene
    pool = make_pool([3], [3], [1], [False], graph.grid)
    with pytest.raises(ValueError):
        infer_defense(zero_qnet(), pool, graph, 3)


def test_defense_threshold_stops(scene):
    img, gt, graph = scene
    pool = feature_match_prompts(img, gt, img)
    assert infer_defense(const_net(-0.1), pool, graph, 10, q_threshold=0.0).active.all()
    out = infer_defense(const_net(0.1), pool, graph, 10, q_threshold=0.0)
    assert int(pool.active.sum() - out.active.sum()) == 10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 30))
def test_defense_only_deactivates(scene, seed, budget):
    img, gt, graph = scene
    rng = Rng(seed)
    pool = training_pool(gt, rng)
    pool = pool.with_active(rng.uniform(0, 1, len(pool)) < 0.6)
    out = infer_defense(init_qnet(Rng(seed)), pool, graph, budget, q_threshold=-1e9)
    assert not np.any(out.active & ~pool.active)
    assert np.array_equal(out.polarity, pool.polarity) and np.array_equal(out.xs, pool.xs)
    assert pool.active.sum() - out.active.sum() == min(budget, pool.active.sum() - 1)


def test_attack_zero_weights_picks_lowest_ids(scene):
    img, gt, graph = scene
    pool = training_pool(gt, Rng(0))
    out = infer_attack(zero_qnet(), pool, graph, 3)
    assert np.flatnonzero(out.active & ~pool.active).tolist() == [64, 65, 66]


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    p = init_qnet(Rng(9))
    save_checkpoint(tmp_path / "q.json", p, "defense", {"episodes": 3}, 9)
    q, meta = load_checkpoint(tmp_path / "q.json", "defense")
    assert meta["kind"] == "defense" and meta["seed"] == 9 and meta["version"] == 1
    assert [(l["rows"], l["cols"]) for l in meta["layers"]] == [(64, 12), (64, 64), (1, 64)]
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "q.json", "attack")
