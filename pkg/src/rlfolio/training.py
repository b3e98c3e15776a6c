"""Phase 1: optimize base policies with the mixed RL + behavior-cloning loss.

Each policy is tied to one demonstration dataset. An update episode rolls
out the Gaussian-perturbed policy on a random training sub-window, then
takes one Adam step on

    L = -sum_t Psi_t * log pi(a_t | s_t)  +  lambda * mean_i ||pi(s_i) - a_i||^2

where Psi_t is the discounted return-to-go of the differential-Sharpe
rewards and the cloning term compares the deterministic portfolio vector
against expert actions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from rlfolio.errors import DivergenceError, WindowError
from rlfolio.experts import ExpertDataset
from rlfolio.marketdata import FeatureSet
from rlfolio.numcore import Tensor, add, backward, concat, mul, sub, tsum
from rlfolio.policynet import PolicyConfig, PolicyNetwork
from rlfolio.tradingenv import EnvConfig, PortfolioVector, StateSnapshot, TradingEnv


@dataclass
class TrainConfig:
    bc_weight: float = 1.0
    gamma: float = 0.99
    episodes: int = 200
    episode_length: int = 64
    bc_batch: int = 32
    learning_rate: float = 1e-3
    noise_sigma: float = 0.1
    reward_scale: float = 1.0
    use_baseline: bool = False
    periods_per_year: int = 252
    seed: int = 0

    def __post_init__(self):
        if self.bc_weight < 0:
            raise ValueError("bc_weight must be >= 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")


@dataclass
class Trajectory:
    """One rollout: states, sampled scores, actions, and reward bookkeeping."""

    t_indices: list[int]
    states: list[StateSnapshot]
    v_sampled: list[np.ndarray]
    actions: list[PortfolioVector]
    log_probs: list[float]
    rewards: list[float]
    rors: list[float]
    returns: np.ndarray = field(default_factory=lambda: np.empty(0))
    done_early: bool = False

    def __len__(self) -> int:
        return len(self.states)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Exact backward recursion Psi_t = r_t + gamma * Psi_{t+1}."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def rollout(
    net: PolicyNetwork,
    env: TradingEnv,
    start_t: int,
    length: int,
    rng: np.random.Generator,
    gamma: float,
    reward_scale: float = 1.0,
) -> Trajectory:
    """Roll the noisy policy for ``length`` steps from ``start_t``."""
    snapshot = env.reset(start_t, length)
    sigma = net.config.noise_sigma
    n = net.config.n_assets
    const_lp = 0.0 if sigma == 0.0 else -0.5 * n * math.log(2.0 * math.pi * sigma * sigma)
    traj = Trajectory([], [], [], [], [], [], [])
    done = False
    while not done:
        action, v_sampled, out = net.act_stochastic(snapshot, rng)
        traj.t_indices.append(snapshot.t_index)
        traj.states.append(snapshot)
        traj.v_sampled.append(v_sampled)
        traj.actions.append(action)
        if sigma == 0.0:
            traj.log_probs.append(const_lp)
        else:
            dev = v_sampled - out.v.data
            traj.log_probs.append(const_lp - float(dev @ dev) / (2.0 * sigma * sigma))
        snapshot, reward, done, info = env.step(action)
        traj.rewards.append(reward * reward_scale)
        traj.rors.append(info["ror"])
        if info["bankrupt"]:
            traj.done_early = True
    traj.returns = discounted_returns(traj.rewards, gamma)
    return traj


def prepare_bc_states(
    dataset: ExpertDataset, features: FeatureSet
) -> list[tuple[StateSnapshot, np.ndarray]]:
    """Reconstruct (state, target-action) pairs for cloning.

    The account feature of pair i is the expert's own previous action when
    the pairs are consecutive, else the all-cash placeholder.
    """
    n = features.n_assets
    lo = features.first_valid
    hi = features.prices.n_periods - 1
    out = []
    prev_t = None
    prev_action = None
    for t, action in dataset.pairs:
        if t < lo or t > hi:
            prev_t, prev_action = t, action
            continue
        x_a = prev_action if prev_t == t - 1 and prev_action is not None else PortfolioVector.hold_cash(n)
        w = features.window(t)
        snap = StateSnapshot(x_s=w.x_s, x_m=w.x_m, x_a=x_a, t_index=t, ac=1.0)
        out.append((snap, action.as_vector()))
        prev_t, prev_action = t, action
    return out


def mixed_loss(
    net: PolicyNetwork,
    traj: Trajectory,
    bc_batch: list[tuple[StateSnapshot, np.ndarray]],
    bc_weight: float,
    use_baseline: bool = False,
) -> tuple[Tensor, float, float]:
    """Build the scalar mixed-objective tensor; returns (loss, pg, bc) values."""
    psis = traj.returns.copy()
    if use_baseline and len(psis) > 1:
        psis = psis - psis.mean()

    terms = []
    pg_value = 0.0
    if net.config.noise_sigma > 0.0 and np.any(psis != 0.0):
        for snap, v_sampled, psi in zip(traj.states, traj.v_sampled, psis):
            if psi == 0.0:
                continue
            out = net.forward(snap.x_s, snap.x_m, snap.x_a)
            lp = net.log_prob(out.v, v_sampled)
            terms.append(mul(lp, -float(psi)))
            pg_value -= float(psi) * float(lp.data)

    bc_value = 0.0
    if bc_weight > 0.0 and bc_batch:
        sq_terms = []
        for snap, target in bc_batch:
            out = net.forward(snap.x_s, snap.x_m, snap.x_a)
            pred = concat([out.w_plus, out.w_minus])
            diff = sub(pred, Tensor(target))
            sq_terms.append(tsum(mul(diff, diff)))
        bc_term = sq_terms[0]
        for s in sq_terms[1:]:
            bc_term = add(bc_term, s)
        bc_term = mul(bc_term, 1.0 / len(sq_terms))
        bc_value = float(bc_term.data)
        terms.append(mul(bc_term, bc_weight))

    if not terms:
        loss = Tensor(0.0)
    else:
        loss = terms[0]
        for t in terms[1:]:
            loss = add(loss, t)
    if not np.isfinite(float(loss.data)):
        raise DivergenceError("mixed loss is non-finite")
    return loss, pg_value, bc_value


@dataclass
class CurveRow:
    episode: int
    pg_loss: float
    bc_loss: float
    mean_reward: float
    arr_train: float


@dataclass
class TrainResult:
    net: PolicyNetwork
    curve: list[CurveRow]
    diverged: bool = False


def train_policy(
    features: FeatureSet,
    dataset: ExpertDataset,
    policy_config: PolicyConfig,
    train_config: TrainConfig,
    env_config: EnvConfig | None = None,
) -> TrainResult:
    """Run the phase-1 loop for one policy; deterministic per seed."""
    cfg = replace(policy_config, noise_sigma=train_config.noise_sigma)
    env_config = env_config or EnvConfig(allow_short=cfg.allow_short)
    rng = np.random.default_rng(train_config.seed)
    net = PolicyNetwork.build(cfg, seed=int(rng.integers(2**63)))
    env = TradingEnv(features, env_config)

    t_lo, t_hi = features.train_steps()
    length = train_config.episode_length
    if t_hi - t_lo < length:
        raise WindowError(
            f"training range [{t_lo}, {t_hi}] shorter than episode length {length}"
        )
    bc_states = prepare_bc_states(dataset, features)

    curve: list[CurveRow] = []
    last_good = net.params.arrays()
    diverged = False
    for ep in range(train_config.episodes):
        start = int(rng.integers(t_lo, t_hi - length + 1))
        traj = rollout(
            net, env, start, length, rng, train_config.gamma, train_config.reward_scale
        )
        if bc_states and train_config.bc_weight > 0.0:
            take = min(train_config.bc_batch, len(bc_states))
            idx = rng.choice(len(bc_states), size=take, replace=False)
            batch = [bc_states[i] for i in idx]
        else:
            batch = []
        try:
            loss, pg, bc = mixed_loss(
                net, traj, batch, train_config.bc_weight, train_config.use_baseline
            )
            net.params.zero_grad()
            if loss.requires_grad:
                backward(loss)
            grads = {
                k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in net.params.items()
            }
            net.params.adam_step(grads, train_config.learning_rate)
        except DivergenceError:
            net.params.load_arrays(last_good)
            diverged = True
            break
        last_good = net.params.arrays()
        mean_r = float(np.mean(traj.rewards)) if traj.rewards else 0.0
        mean_ror = float(np.mean(traj.rors)) if traj.rors else 0.0
        curve.append(
            CurveRow(
                episode=ep,
                pg_loss=pg,
                bc_loss=bc,
                mean_reward=mean_r,
                arr_train=mean_ror * train_config.periods_per_year,
            )
        )
    return TrainResult(net=net, curve=curve, diverged=diverged)


def bc_mse(net: PolicyNetwork, pairs: list[tuple[StateSnapshot, np.ndarray]]) -> float:
    """Mean squared per-component error of deterministic actions vs targets."""
    if not pairs:
        return 0.0
    errs = []
    for snap, target in pairs:
        pred = net.act(snap).as_vector()
        errs.append(np.mean((pred - target) ** 2))
    return float(np.mean(errs))


def write_training_curve(path, curve: list[CurveRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "pg_loss", "bc_loss", "mean_reward", "ARR_train"])
        for r in curve:
            w.writerow([r.episode, repr(r.pg_loss), repr(r.bc_loss), repr(r.mean_reward), repr(r.arr_train)])
