"""Phase 2: a DQN that picks which frozen base policy acts each period.

The meta-state pairs the market-feature window with a trailing-performance
vector: every base policy runs in its own shadow account each period, so
past per-policy returns are defined even for policies that were never
selected. The Q network is an LSTM with temporal attention over the market
window, concatenated with the performance vector and passed through two
fully connected layers.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlfolio.errors import ConfigError, DivergenceError, WindowError
from rlfolio.marketdata import FeatureSet
from rlfolio.numcore import (
    ParamStore,
    Tensor,
    add,
    backward,
    concat,
    getitem,
    lstm_cell,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
    uniform_init,
)
from rlfolio.policynet import PolicyNetwork
from rlfolio.tradingenv import (
    AccountState,
    EnvConfig,
    PortfolioVector,
    StateSnapshot,
    TradingEnv,
    rebalance,
)


@dataclass
class MetaConfig:
    hidden: int = 16
    fc_hidden: int = 32
    perf_window: int = 12
    gamma: float = 0.99
    buffer_capacity: int = 10_000
    batch_size: int = 64
    target_sync: int = 200
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_frac: float = 0.5
    episodes: int = 50
    episode_length: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0):
            raise ConfigError("meta.epsilon", "need 0 <= end <= start <= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("meta.gamma", "must be in (0, 1]")
        if self.buffer_capacity < self.batch_size:
            raise ConfigError("meta.buffer_capacity", "smaller than batch size")


@dataclass
class MetaState:
    x_m: np.ndarray  # (F_m, T)
    x_p: np.ndarray  # (K,)


@dataclass
class Transition:
    s: MetaState
    k: int
    r: float
    s_next: MetaState
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring buffer with a uniform sampler."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._data)

    def push(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        idx = rng.choice(len(self._data), size=n, replace=False)
        return [self._data[i] for i in idx]


def build_q_params(
    n_market: int, n_policies: int, config: MetaConfig, seed: int
) -> ParamStore:
    rng = np.random.default_rng(seed)
    h, fc = config.hidden, config.fc_hidden
    p = ParamStore()
    p.add("lstm.w_ih", uniform_init(rng, (4 * h, n_market), n_market))
    p.add("lstm.w_hh", uniform_init(rng, (4 * h, h), h))
    p.add("lstm.b", uniform_init(rng, (4 * h,), h))
    p.add("attn.ve", uniform_init(rng, (h,), h))
    p.add("attn.w5", uniform_init(rng, (h, 2 * h), 2 * h))
    p.add("attn.w6", uniform_init(rng, (h, n_market), n_market))
    p.add("fc1.w", uniform_init(rng, (fc, h + n_policies), h + n_policies))
    p.add("fc1.b", uniform_init(rng, (fc,), h + n_policies))
    p.add("fc2.w", uniform_init(rng, (n_policies, fc), fc))
    p.add("fc2.b", uniform_init(rng, (n_policies,), fc))
    return p


def q_forward(x_m_batch, x_p_batch, params: ParamStore, hidden: int) -> Tensor:
    """Batched Q values, shape (B, K). Inputs: (B, F_m, T) and (B, K)."""
    x = Tensor(np.asarray(x_m_batch, dtype=np.float64)) if not isinstance(x_m_batch, Tensor) else x_m_batch
    xp = Tensor(np.asarray(x_p_batch, dtype=np.float64)) if not isinstance(x_p_batch, Tensor) else x_p_batch
    b, f_m, t = x.shape
    h = Tensor(np.zeros((b, hidden)))
    c = Tensor(np.zeros((b, hidden)))
    hs = []
    for step in range(t):
        x_t = getitem(x, (slice(None), slice(None), step))
        h, c = lstm_cell(x_t, h, c, params["lstm.w_ih"], params["lstm.w_hh"], params["lstm.b"])
        hs.append(h)
    h_final = hs[-1]
    x_last = getitem(x, (slice(None), slice(None), t - 1))
    w6x = matmul(x_last, transpose(params["attn.w6"], (1, 0)))  # (B, H)
    es = []
    for step in range(t):
        z = tanh(
            add(matmul(concat([hs[step], h_final], axis=1), transpose(params["attn.w5"], (1, 0))), w6x)
        )
        es.append(reshape(matmul(z, params["attn.ve"]), (b, 1)))
    alpha = softmax(concat(es, axis=1), axis=1)  # (B, T)
    ctx = mul(reshape(getitem(alpha, (slice(None), 0)), (b, 1)), hs[0])
    for step in range(1, t):
        ctx = add(ctx, mul(reshape(getitem(alpha, (slice(None), step)), (b, 1)), hs[step]))
    z1 = relu(add(matmul(concat([ctx, xp], axis=1), transpose(params["fc1.w"], (1, 0))), params["fc1.b"]))
    return add(matmul(z1, transpose(params["fc2.w"], (1, 0))), params["fc2.b"])


def q_values(state: MetaState, params: ParamStore, hidden: int) -> np.ndarray:
    """Q estimates for a single meta-state; numeric convenience."""
    out = q_forward(state.x_m[None, :, :], state.x_p[None, :], params, hidden)
    return out.data[0].copy()


def select_policy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy with ties broken toward the lowest index."""
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def q_loss(
    batch: list[Transition],
    params: ParamStore,
    target_params: ParamStore,
    gamma: float,
    hidden: int,
) -> Tensor:
    """Mean squared TD error against the frozen target network."""
    if not batch:
        raise ValueError("q_loss needs a non-empty batch")
    x_m = np.stack([tr.s.x_m for tr in batch])
    x_p = np.stack([tr.s.x_p for tr in batch])
    x_m_next = np.stack([tr.s_next.x_m for tr in batch])
    x_p_next = np.stack([tr.s_next.x_p for tr in batch])
    r = np.array([tr.r for tr in batch])
    done = np.array([tr.done for tr in batch], dtype=np.float64)
    k = np.array([tr.k for tr in batch])

    q_next = q_forward(x_m_next, x_p_next, target_params, hidden).data
    y = r + gamma * q_next.max(axis=1) * (1.0 - done)

    q = q_forward(x_m, x_p, params, hidden)
    onehot = np.zeros(q.shape)
    onehot[np.arange(len(batch)), k] = 1.0
    q_sel = tsum(mul(q, Tensor(onehot)), axis=1)
    diff = sub(q_sel, Tensor(y))
    return tmean(mul(diff, diff))


class ShadowBook:
    """Self-consistent counterfactual account for one base policy."""

    def __init__(self, policy: PolicyNetwork, features: FeatureSet, cost_rate: float, window: int):
        self.policy = policy
        self.features = features
        self.cost_rate = cost_rate
        self.rors: deque[float] = deque(maxlen=window)
        self.acct: AccountState | None = None

    def reset(self) -> None:
        n = self.features.n_assets
        self.acct = AccountState(
            ac=1.0, b_plus=np.zeros(n), b_minus=np.zeros(n), x_a=PortfolioVector.hold_cash(n)
        )
        self.rors.clear()

    def trailing_mean(self) -> float:
        return float(np.mean(self.rors)) if self.rors else 0.0

    def step(self, t: int) -> float:
        """Act with this policy's own state at timestep t; returns its RoR."""
        w = self.features.window(t)
        snap = StateSnapshot(x_s=w.x_s, x_m=w.x_m, x_a=self.acct.x_a, t_index=t, ac=self.acct.ac)
        action = self.policy.act(snap)
        close = self.features.prices.close
        self.acct, ror = rebalance(self.acct, action, close[:, t], close[:, t + 1], self.cost_rate)
        self.rors.append(ror)
        return ror


def build_meta_state(snapshot: StateSnapshot, books: list[ShadowBook]) -> MetaState:
    """Market window plus trailing mean RoR per base policy (zeros cold-start)."""
    return MetaState(
        x_m=snapshot.x_m.copy(), x_p=np.array([b.trailing_mean() for b in books])
    )


@dataclass
class MetaCurveRow:
    step: int
    epsilon: float
    q_loss: float
    selected_k: int
    reward: float


@dataclass
class MetaResult:
    q_params: ParamStore
    config: MetaConfig
    curve: list[MetaCurveRow]
    diverged: bool = False


def epsilon_at(step: int, total_steps: int, config: MetaConfig) -> float:
    """Linear decay over the first decay_frac of training, then flat."""
    horizon = max(1, int(total_steps * config.epsilon_decay_frac))
    if step >= horizon:
        return config.epsilon_end
    frac = step / horizon
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def train_meta(
    policies: list[PolicyNetwork],
    features: FeatureSet,
    env_config: EnvConfig,
    config: MetaConfig,
) -> MetaResult:
    """Q-learning over the policy-identity action space.

    Each env step: epsilon-greedy pick, execute the chosen policy's action in
    the real account, advance every shadow book, store the transition, take
    one optimization step, and sync the target network every ``target_sync``
    steps. Base policies are never updated here.
    """
    if not policies:
        raise ValueError("need at least one base policy")
    k_n = len(policies)
    rng = np.random.default_rng(config.seed)
    params = build_q_params(features.n_market_channels, k_n, config, int(rng.integers(2**63)))
    target = params.clone()

    env = TradingEnv(features, env_config)
    books = [
        ShadowBook(p, features, env_config.transaction_cost, config.perf_window) for p in policies
    ]

    t_lo, t_hi = features.train_steps()
    length = config.episode_length
    if t_hi - t_lo < length:
        raise WindowError(f"training range [{t_lo}, {t_hi}] shorter than episode length {length}")

    total_steps = config.episodes * length
    buffer = ReplayBuffer(config.buffer_capacity)
    curve: list[MetaCurveRow] = []
    last_good = params.arrays()
    diverged = False
    step_count = 0

    for _ep in range(config.episodes):
        start = int(rng.integers(t_lo, t_hi - length + 1))
        snapshot = env.reset(start, length)
        for b in books:
            b.reset()
        state = build_meta_state(snapshot, books)
        done = False
        while not done:
            eps = epsilon_at(step_count, total_steps, config)
            q = q_values(state, params, config.hidden)
            k = select_policy(q, eps, rng)
            action = policies[k].act(snapshot)
            t_now = snapshot.t_index
            snapshot, reward, done, _info = env.step(action)
            for b in books:
                b.step(t_now)
            next_state = build_meta_state(snapshot, books)
            buffer.push(Transition(state, k, reward, next_state, done))
            state = next_state

            loss_val = 0.0
            if len(buffer) >= config.batch_size:
                batch = buffer.sample(rng, config.batch_size)
                try:
                    loss = q_loss(batch, params, target, config.gamma, config.hidden)
                    if not np.isfinite(float(loss.data)):
                        raise DivergenceError("q loss non-finite")
                    params.zero_grad()
                    backward(loss)
                    grads = {
                        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                        for name, t in params.items()
                    }
                    params.adam_step(grads, config.learning_rate)
                    loss_val = float(loss.data)
                except DivergenceError:
                    params.load_arrays(last_good)
                    diverged = True
                    break
                last_good = params.arrays()
            step_count += 1
            if step_count % config.target_sync == 0:
                target.load_arrays(params.arrays())
            curve.append(
                MetaCurveRow(
                    step=step_count, epsilon=eps, q_loss=loss_val, selected_k=k, reward=reward
                )
            )
        if diverged:
            break
    return MetaResult(q_params=params, config=config, curve=curve, diverged=diverged)


def write_meta_curve(path, curve: list[MetaCurveRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "epsilon", "q_loss", "selected_k", "reward"])
        for r in curve:
            w.writerow([r.step, repr(r.epsilon), repr(r.q_loss), r.selected_k, repr(r.reward)])
