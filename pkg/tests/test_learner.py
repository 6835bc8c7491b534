import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ChainEnv, value_iteration
from confusion_audit.learner import (
    EpsilonSchedule,
    OneHotEncoding,
    Policy,
    QNetwork,
    ReplayBuffer,
    TrainConfig,
    TrainingDiverged,
    default_config,
    greedy,
    load_checkpoint,
    run_dqn,
    save_checkpoint,
    select_action,
    state_encoding,
    td_loss_and_grads,
    td_update,
    train_policy,
)


def random_batch(rng, n, n_in, n_out):
    return (
        rng.normal(size=(n, n_in)),
        rng.integers(n_out, size=n),
        rng.normal(size=n),
        rng.normal(size=(n, n_in)),
        (rng.random(n) < 0.3).astype(float),
    )


def numeric_grads(net, target, batch, gamma, eps=1e-6):
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up, _ = td_loss_and_grads(net, target, batch, gamma)
            p[i] = old - eps
            down, _ = td_loss_and_grads(net, target, batch, gamma)
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


@pytest.mark.parametrize("seed", range(20))
def test_td_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n_in, n_h, n_out = int(rng.integers(2, 5)), int(rng.integers(3, 8)), int(rng.integers(2, 4))
    net = QNetwork(n_in, n_h, n_out, rng)
    net.b1[...] = rng.normal(size=n_h)  # keep pre-activations away from the ReLU kink on average
    target = QNetwork(n_in, n_h, n_out, rng)
    batch = random_batch(rng, 8, n_in, n_out)
    _, analytic = td_loss_and_grads(net, target, batch, 0.9)
    numeric = numeric_grads(net, target, batch, 0.9)
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    rel = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    assert rel < 1e-4


def test_td_gradient_with_onehot_encoding():
    rng = np.random.default_rng(7)
    enc = OneHotEncoding((3, 4), masked=True)
    net = QNetwork(4, 6, 2, rng, enc)
    net.b1[...] = rng.normal(size=6)  # a fully masked row encodes to zeros: avoid the ReLU kink
    target = QNetwork(4, 6, 2, rng, enc)
    s = np.stack([rng.integers(3, size=10), rng.integers(4, size=10)], axis=1)
    m = rng.integers(2, size=(10, 2))
    obs = np.concatenate([s * m, m], axis=1).astype(float)
    batch = (obs, rng.integers(2, size=10), rng.normal(size=10), obs[::-1].copy(), np.zeros(10))
    _, analytic = td_loss_and_grads(net, target, batch, 0.9)
    numeric = numeric_grads(net, target, batch, 0.9)
    for a, n in zip(analytic, numeric):
        assert np.allclose(a, n, atol=1e-6)


def test_onehot_encoding_layout():
    enc = OneHotEncoding((2, 3), masked=True)
    out = enc(np.array([[1, 2, 1, 1], [0, 2, 0, 1]], dtype=float))
    assert out.tolist() == [[0, 1, 0, 0, 1, 1, 1], [0, 0, 0, 0, 1, 0, 1]]
    assert enc.n_raw == 4 and enc.n_embed == 7
    assert OneHotEncoding.from_dict(enc.to_dict()) == enc


def test_network_rejects_wrong_input_length():
    net = QNetwork(3, 4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(np.zeros(4))


def test_greedy_lowest_index_tie_break():
    assert greedy(np.array([1.0, 3.0, 3.0])) == 1


def test_select_action_epsilon_bounds():
    net = QNetwork(2, 3, 4, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    x = np.array([0.5, -0.5])
    assert all(select_action(net, x, 0.0, rng) == greedy(net(x)) for _ in range(20))
    picks = {select_action(net, x, 1.0, rng) for _ in range(200)}
    assert picks == {0, 1, 2, 3}
    with pytest.raises(ValueError):
        select_action(net, x, 1.5, rng)


def test_td_update_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(0)
    net = QNetwork(3, 16, 2, rng)
    target = net.copy()
    batch = random_batch(rng, 32, 3, 2)
    first = td_update(net, target, batch, 0.0, 0.05)
    for _ in range(200):
        last = td_update(net, target, batch, 0.0, 0.05)
    assert last < first


def test_td_update_empty_batch():
    net = QNetwork(2, 3, 2)
    empty = (np.zeros((0, 2)), np.zeros(0, int), np.zeros(0), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        td_update(net, net.copy(), empty, 0.9, 0.1)


# -- replay buffer -----------------------------------------------------------------

def test_replay_eviction_order():
    buf = ReplayBuffer(4, 1)
    for i in range(6):
        buf.add([i], 0, float(i), [i + 1], False)
    assert len(buf) == 4
    assert buf.rewards[buf.ordered_indices()].tolist() == [2.0, 3.0, 4.0, 5.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.lists(st.integers(0, 2), min_size=1, max_size=60))
def test_replay_tag_counts(capacity, tags):
    buf = ReplayBuffer(capacity, 1)
    for i, t in enumerate(tags):
        buf.add([i], 0, 0.0, [i], False, tag=t)
    kept = tags[-capacity:]
    for t in range(3):
        assert buf.count(t) == kept.count(t)
    assert buf.count() == len(kept)


def test_replay_sampling_respects_tag():
    buf = ReplayBuffer(100, 1)
    for i in range(100):
        buf.add([i], 0, 0.0, [i], False, tag=i % 3)
    rng = np.random.default_rng(0)
    idx = buf.sample_indices(500, rng, tag=2)
    assert len(idx) == 500 and set(buf.tags[idx].tolist()) == {2}
    with pytest.raises(ValueError):
        buf.sample_indices(3, rng, tag=9)


def test_replay_rejects_bad_capacity():
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)


# -- epsilon ---------------------------------------------------------------------------

@settings(max_examples=100)
@given(st.floats(0.5, 1.0), st.floats(0.0, 0.4), st.integers(1, 10_000), st.integers(0, 20_000),
       st.integers(0, 20_000))
def test_epsilon_monotone(start, end, decay, a, b):
    sched = EpsilonSchedule(start, end, decay)
    lo, hi = sorted((a, b))
    assert sched(lo) >= sched(hi)
    assert end - 1e-12 <= sched(hi) <= start + 1e-12


def test_epsilon_endpoints():
    sched = EpsilonSchedule(0.9, 0.01, 100)
    assert sched(0) == pytest.approx(0.9)
    assert sched(100) == pytest.approx(0.01)
    assert sched(10**6) == pytest.approx(0.01)


# -- training against a value-iteration oracle ----------------------------------------------

def test_dqn_matches_value_iteration_on_chain():
    env = ChainEnv()
    gamma = 0.9
    oracle = value_iteration(env, gamma)
    cfg = TrainConfig(hidden=32, lr=3e-3, gamma=gamma, capacity=2000, eps_start=1.0, eps_end=0.1,
                      eps_decay=2000, batch_size=32, target_sync=100, total_steps=6000,
                      eval_every=0, seed=0)
    policy, _ = train_policy(env, cfg)
    for (p,), q in oracle.items():
        if p == env.n - 1:
            continue  # terminal, never bootstrapped
        assert policy.act((p,)) == int(np.argmax(q))
        assert policy.q((p,)) == pytest.approx(q, abs=0.5)


def test_training_is_deterministic():
    env = ChainEnv()
    cfg = TrainConfig(hidden=8, capacity=200, eps_decay=200, batch_size=8, target_sync=20,
                      total_steps=400, eval_every=0, seed=3)
    a, _ = train_policy(env, cfg)
    b, _ = train_policy(env, cfg)
    assert np.array_equal(a.net.flat(), b.net.flat())


def test_divergence_is_reported():
    env = ChainEnv()
    cfg = TrainConfig(hidden=8, lr=1e6, optimizer="sgd", capacity=200, eps_decay=200, batch_size=8,
                      target_sync=1, total_steps=2000, eval_every=0, seed=0)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train_policy(env, cfg)


def test_early_stop_on_plateau():
    env = ChainEnv()
    cfg = TrainConfig(hidden=16, lr=3e-3, capacity=1000, eps_decay=500, batch_size=16, target_sync=50,
                      total_steps=20000, min_steps=500, eval_every=500, eval_episodes=10, seed=0)
    net = QNetwork(1, 16, 2, np.random.default_rng(1), state_encoding(env))
    hist = run_dqn(env, net, cfg, lambda rng: ((lambda s, r: np.asarray(s, float)), 0),
                   lambda n: 1.0)
    assert hist["stopped_early"] and hist["steps"] == 1000


def test_default_configs():
    assert default_config("taxi").hidden == 256
    assert default_config("taxi", True).hidden == 512
    assert default_config("minigrid").eps_end == 0.1
    assert default_config("taxi", lr=0.5).lr == 0.5


# -- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    enc = OneHotEncoding((5, 5, 4, 5, 4))
    net = QNetwork(5, 12, 6, rng, enc)
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, net, {"env_id": "taxi", "seed": 4})
    loaded, head = load_checkpoint(path)
    assert head["env_id"] == "taxi" and head["seed"] == 4 and head["shape"] == [5, 12, 6]
    assert np.array_equal(loaded.flat(), net.flat())
    probes = [tuple(int(rng.integers(c)) for c in enc.cards) for _ in range(1000)]
    a, b = Policy(net), Policy(loaded)
    assert [a.act(s) for s in probes] == [b.act(s) for s in probes]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not json\n\x00\x01")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_weights(tmp_path):
    net = QNetwork(2, 3, 2, np.random.default_rng(0))
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, net, {})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
