"""Small from-scratch DQN: two-layer ReLU network, replay buffer, epsilon-greedy."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import DiscreteEnv, State

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OneHotEncoding:
    """Fixed input layer: each integer feature becomes a one-hot block.

    With ``masked`` the raw input is ``[s*m ; m]``; a feature's block is zeroed
    when its mask bit is 0 and the mask itself is appended.
    """
    cards: tuple[int, ...]
    masked: bool = False

    @property
    def n_raw(self) -> int:
        return len(self.cards) * (2 if self.masked else 1)

    @property
    def n_embed(self) -> int:
        return sum(self.cards) + (len(self.cards) if self.masked else 0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        n = len(self.cards)
        cards = np.asarray(self.cards)
        vals = np.rint(x[:, :n]).astype(np.int64)
        ok = (vals >= 0) & (vals < cards)
        if self.masked:
            ok &= x[:, n:] > 0.5
        out = np.zeros((x.shape[0], self.n_embed))
        rows, cols = np.nonzero(ok)
        offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
        out[rows, vals[rows, cols] + offsets[cols]] = 1.0
        if self.masked:
            out[:, sum(self.cards):] = x[:, n:]
        return out

    def to_dict(self) -> dict:
        return {"type": "onehot", "cards": list(self.cards), "masked": self.masked}

    @classmethod
    def from_dict(cls, d: dict | None) -> "OneHotEncoding | None":
        if d is None:
            return None
        if d.get("type") != "onehot":
            raise ValueError(f"unknown input encoding {d.get('type')!r}")
        return cls(tuple(int(c) for c in d["cards"]), bool(d["masked"]))


class QNetwork:
    """input -> [fixed encoding] -> hidden (ReLU) -> one value per action."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator | None = None,
                 encoding: OneHotEncoding | None = None):
        if encoding is not None and encoding.n_raw != n_in:
            raise ValueError(f"encoding expects {encoding.n_raw} inputs, network has {n_in}")
        self.n_in = n_in
        self.encoding = encoding
        n_e = encoding.n_embed if encoding is not None else n_in
        self.W1 = np.zeros((n_e, n_hidden))
        self.b1 = np.zeros(n_hidden)
        self.W2 = np.zeros((n_hidden, n_out))
        self.b2 = np.zeros(n_out)
        if rng is not None:
            self.W1 = rng.normal(0.0, math.sqrt(2.0 / n_e), (n_e, n_hidden))
            self.W2 = rng.normal(0.0, math.sqrt(1.0 / n_hidden), (n_hidden, n_out))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_in, self.W1.shape[1], self.W2.shape[1])

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "QNetwork":
        net = QNetwork.__new__(QNetwork)
        net.W1, net.b1, net.W2, net.b2 = (p.copy() for p in self.params)
        net.n_in, net.encoding = self.n_in, self.encoding
        return net

    def load_from(self, other: "QNetwork") -> None:
        for mine, theirs in zip(self.params, other.params):
            mine[...] = theirs

    def embed(self, x: np.ndarray) -> np.ndarray:
        return x if self.encoding is None else self.encoding(x)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.maximum(self.embed(x) @ self.W1 + self.b1, 0.0)
        q = h @ self.W2 + self.b2
        return (q[0], h[0]) if np.ndim(x) == 1 else (q, h)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input length {x.shape[-1]} != network input size {self.n_in}")
        return self.forward(x)[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    @classmethod
    def from_flat(cls, shape: Sequence[int], flat: np.ndarray, encoding=None) -> "QNetwork":
        n_in, n_h, n_out = shape
        net = cls(n_in, n_h, n_out, encoding=encoding)
        i = 0
        for p in net.params:
            if i + p.size > flat.size:
                raise ValueError(f"weight count {flat.size} does not match shape {tuple(shape)}")
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != flat.size:
            raise ValueError(f"weight count {flat.size} does not match shape {tuple(shape)}")
        return net


def q_values(net: QNetwork, x) -> np.ndarray:
    return net(x)


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest-index tie-break
    return int(np.argmax(q))


def select_action(net: QNetwork, x, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    n_actions = net.shape[2]
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(n_actions))
    return greedy(net(x))


def td_loss_and_grads(net: QNetwork, target: QNetwork, batch, gamma: float):
    """Mean squared TD error and its gradient w.r.t. ``net`` parameters.

    batch = (obs, actions, rewards, next_obs, terminal) as arrays.
    """
    obs, actions, rewards, next_obs, terminal = batch
    n = obs.shape[0]
    q_next, _ = target.forward(next_obs)
    y = rewards + gamma * q_next.max(axis=1) * (1.0 - terminal)
    x = net.embed(obs)
    h = np.maximum(x @ net.W1 + net.b1, 0.0)
    q = h @ net.W2 + net.b2
    idx = np.arange(n)
    err = q[idx, actions] - y
    loss = float(np.mean(err ** 2))

    dq = np.zeros_like(q)
    dq[idx, actions] = 2.0 * err / n
    gW2 = h.T @ dq
    gb2 = dq.sum(axis=0)
    dh = (dq @ net.W2.T) * (h > 0)
    gW1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def td_update(net: QNetwork, target: QNetwork, batch, gamma: float, lr: float, optimizer=None) -> float:
    """One gradient step on the TD loss; plain SGD unless an optimizer is given."""
    if len(batch[0]) == 0:
        raise ValueError("empty batch")
    loss, grads = td_loss_and_grads(net, target, batch, gamma)
    (optimizer or SGD(lr)).step(net.params, grads)
    return loss


class ReplayBuffer:
    """Ring buffer of encoded transitions, optionally tagged (e.g. by feature subset)."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity)
        self.tags = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.pos = 0
        self.tag_counts: dict[int, int] = {}

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, terminal, tag: int = 0):
        i = self.pos
        if self.size == self.capacity:
            old = int(self.tags[i])
            self.tag_counts[old] -= 1
        else:
            self.size += 1
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminal[i] = float(terminal)
        self.tags[i] = tag
        self.tag_counts[tag] = self.tag_counts.get(tag, 0) + 1
        self.pos = (i + 1) % self.capacity

    def count(self, tag: int | None = None) -> int:
        return self.size if tag is None else self.tag_counts.get(tag, 0)

    def ordered_indices(self) -> np.ndarray:
        """Slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.pos) % self.capacity

    def sample_indices(self, n: int, rng: np.random.Generator, tag: int | None = None) -> np.ndarray:
        if tag is None:
            return rng.integers(self.size, size=n)
        if self.count(tag) == 0:
            raise ValueError(f"no transitions with tag {tag}")
        frac = self.count(tag) / self.size
        picked = np.empty(0, dtype=np.int64)
        while picked.size < n:
            cand = rng.integers(self.size, size=int(1.5 * n / frac) + 8)
            picked = np.concatenate([picked, cand[self.tags[cand] == tag]])
        return picked[:n]

    def sample(self, n: int, rng: np.random.Generator, tag: int | None = None):
        i = self.sample_indices(n, rng, tag)
        return self.obs[i], self.actions[i], self.rewards[i], self.next_obs[i], self.terminal[i]


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float
    end: float
    decay_steps: int

    def __call__(self, step: int) -> float:
        if self.decay_steps <= 0:
            return self.end
        frac = min(max(step, 0) / self.decay_steps, 1.0)
        return max(self.end, self.start + frac * (self.end - self.start))


@dataclass
class TrainConfig:
    hidden: int = 256
    lr: float = 1e-4
    gamma: float = 0.99
    capacity: int = 10000
    eps_start: float = 0.9
    eps_end: float = 0.01
    eps_decay: int = 100000
    batch_size: int = 64
    target_sync: int = 1000
    optimizer: str = "adam"
    total_steps: int = 150000
    min_steps: int | None = None
    eval_every: int = 10000
    eval_episodes: int = 100
    seed: int = 0

    @property
    def epsilon(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_start, self.eps_end, self.eps_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# Table-style defaults: (audited policy, feature-parametrized policy)
DEFAULT_CONFIGS = {
    "taxi": (
        TrainConfig(hidden=256, lr=1e-3, capacity=10000, eps_end=0.01, eps_decay=100000, target_sync=500,
                    total_steps=150000, eval_every=25000),
        TrainConfig(hidden=512, lr=1e-3, capacity=320000, eps_end=0.01, eps_decay=100000, target_sync=500,
                    total_steps=200000, min_steps=200000, eval_every=50000),
    ),
    "minigrid": (
        TrainConfig(hidden=512, capacity=80000, eps_end=0.1, eps_decay=50000, total_steps=80000),
        TrainConfig(hidden=512, capacity=80000, eps_end=0.1, eps_decay=50000, total_steps=80000),
    ),
}


def default_config(env_id: str, feature_parametrized: bool = False, **overrides) -> TrainConfig:
    cfg = DEFAULT_CONFIGS[env_id][int(feature_parametrized)]
    return cfg.with_(**overrides) if overrides else cfg


Encoder = Callable[[State], np.ndarray]


@dataclass
class Policy:
    """Greedy policy over a Q-network; ``encode`` maps a state to network input."""

    net: QNetwork
    encode: Encoder = field(default=lambda s: np.asarray(s, dtype=np.float64))
    name: str = "policy"

    def q(self, state: State) -> np.ndarray:
        return self.net(self.encode(state))

    def act(self, state: State) -> int:
        return greedy(self.q(state))

    __call__ = act

    def value(self, state: State) -> float:
        return float(np.max(self.q(state)))


def state_value(policy: Policy, state: State) -> float:
    return policy.value(state)


def identity_encoder(state: State) -> np.ndarray:
    return np.asarray(state, dtype=np.float64)


def state_encoding(env: DiscreteEnv, masked: bool = False) -> OneHotEncoding:
    return OneHotEncoding(tuple(f.cardinality for f in env.spec.features), masked)


EpisodeSetup = Callable[[np.random.Generator], tuple[Callable[[State, np.random.Generator], np.ndarray], int]]


def run_dqn(env: DiscreteEnv, net: QNetwork, config: TrainConfig, episode_setup: EpisodeSetup,
            evaluate: Callable[[QNetwork], float] | None = None, tagged: bool = False) -> dict:
    """Generic DQN loop.

    ``episode_setup(rng)`` is called at every episode start and returns an
    observation function ``obs(state, rng)`` plus an integer tag; with
    ``tagged`` the update batch is drawn only from transitions carrying the
    current episode's tag.
    """
    rng = np.random.default_rng(config.seed)
    env_seed = int(rng.integers(2 ** 31))
    target = net.copy()
    opt = Adam(net.params, config.lr) if config.optimizer == "adam" else SGD(config.lr)
    buf = ReplayBuffer(config.capacity, net.shape[0])
    schedule = config.epsilon
    min_steps = config.min_steps if config.min_steps is not None else config.eps_decay
    history = {"eval": [], "loss": [], "episodes": 0, "steps": 0, "updates": 0, "stopped_early": False}

    step = updates = episodes = 0
    recent_loss = []
    prev_eval = None
    state = env.reset(env_seed)
    observe, tag = episode_setup(rng)
    obs = observe(state, rng)
    while step < config.total_steps:
        a = select_action(net, obs, schedule(step), rng)
        nxt, r, done = env.step(a)
        nobs = observe(nxt, rng)
        buf.add(obs, a, r, nobs, done and not env.truncated, tag)
        step += 1
        if buf.count(tag if tagged else None) >= config.batch_size:
            batch = buf.sample(config.batch_size, rng, tag if tagged else None)
            loss, grads = td_loss_and_grads(net, target, batch, config.gamma)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite TD loss at step {step} (update {updates})")
            opt.step(net.params, grads)
            updates += 1
            recent_loss.append(loss)
            if updates % config.target_sync == 0:
                target.load_from(net)
        if done:
            episodes += 1
            state = env.reset()
            observe, tag = episode_setup(rng)
            obs = observe(state, rng)
        else:
            state, obs = nxt, nobs

        if evaluate is not None and config.eval_every and step % config.eval_every == 0:
            score = evaluate(net)
            mean_loss = float(np.mean(recent_loss)) if recent_loss else float("nan")
            recent_loss = []
            history["eval"].append((step, score))
            history["loss"].append((step, mean_loss))
            log.info("step %d eps %.3f eval %.3f loss %.4f", step, schedule(step), score, mean_loss)
            if step >= min_steps and prev_eval is not None:
                if abs(score - prev_eval) <= 0.01 * max(abs(prev_eval), 1.0):
                    history["stopped_early"] = True
                    break
            prev_eval = score if step >= min_steps else None
    history.update(episodes=episodes, steps=step, updates=updates)
    return history


def evaluate_greedy(env: DiscreteEnv, policy: Callable[[State], int], episodes: int, seed: int = 12345) -> float:
    """Mean undiscounted return over ``episodes`` greedy episodes."""
    env = env.clone()
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        state = env.reset(int(rng.integers(2 ** 31)))
        done = False
        while not done:
            state, r, done = env.step(policy(state))
            total += r
    return total / episodes


def train_policy(env: DiscreteEnv, config: TrainConfig,
                 observe: Callable[[State, np.random.Generator], np.ndarray] | None = None,
                 eval_env: DiscreteEnv | None = None, name: str = "policy") -> tuple[Policy, dict]:
    """Train an audited policy. ``observe`` may randomize features of the true state."""
    observe = observe or (lambda s, rng: identity_encoder(s))
    net = QNetwork(env.n_features, config.hidden, env.n_actions, np.random.default_rng(config.seed + 1),
                   encoding=state_encoding(env))
    eval_env = eval_env or env

    def evaluate(n: QNetwork) -> float:
        return evaluate_greedy(eval_env, Policy(n), config.eval_episodes)

    history = run_dqn(env, net, config, lambda rng: (observe, 0), evaluate)
    return Policy(net, identity_encoder, name), history


# -- checkpoints --------------------------------------------------------

MAGIC = "confusion-audit-ckpt"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, net: QNetwork, header: dict) -> None:
    head = {"format": MAGIC, "shape": list(net.shape), "encoding": net.encoding.to_dict() if net.encoding else None, **header}
    with open(path, "wb") as f:
        f.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        f.write(net.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[QNetwork, dict]:
    with open(path, "rb") as f:
        first = f.readline()
        try:
            head = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: unreadable checkpoint header") from exc
        if head.get("format") != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        flat = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    return QNetwork.from_flat(head["shape"], flat, OneHotEncoding.from_dict(head.get("encoding"))), head
