"""Trading MDP: long/short rebalance, wealth accounting, differential-Sharpe reward.

One environment instance is single-threaded; market features are exogenous
(actions never alter them). Wealth starts at 1.0 and every period fully
liquidates and redeploys: sell the long book, buy back the borrowed book,
short-sell ``rho`` of wealth, then buy longs with all cash.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rlfolio.errors import ConfigError, LifecycleError, WindowError
from rlfolio.marketdata import FeatureSet

_SUM_TOL = 1e-6


@dataclass
class PortfolioVector:
    """Action: long weights (sum 1), short weights (sum -rho), short ratio."""

    w_plus: np.ndarray
    w_minus: np.ndarray
    rho: float

    def __post_init__(self):
        self.w_plus = np.asarray(self.w_plus, dtype=np.float64)
        self.w_minus = np.asarray(self.w_minus, dtype=np.float64)
        self.rho = float(self.rho)

    @classmethod
    def hold_cash(cls, n_assets: int) -> "PortfolioVector":
        """The all-cash placeholder: uniform long book, no short leg."""
        return cls(np.full(n_assets, 1.0 / n_assets), np.zeros(n_assets), 0.0)

    def validate(self, allow_overlap: bool = False) -> None:
        if self.w_plus.shape != self.w_minus.shape:
            raise ValueError("w_plus / w_minus shape mismatch")
        if not (0.0 <= self.rho < 1.0):
            raise ValueError(f"rho {self.rho} outside [0, 1)")
        if np.any(self.w_plus < -_SUM_TOL) or np.any(self.w_plus > 1 + _SUM_TOL):
            raise ValueError("long weights outside [0, 1]")
        if np.any(self.w_minus > _SUM_TOL) or np.any(self.w_minus < -1 - _SUM_TOL):
            raise ValueError("short weights outside [-1, 0]")
        if abs(self.w_plus.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"long weights sum {self.w_plus.sum()} != 1")
        if abs(self.w_minus.sum() + self.rho) > _SUM_TOL:
            raise ValueError(f"short weights sum {self.w_minus.sum()} != -rho {self.rho}")
        if not allow_overlap and np.any((self.w_plus > _SUM_TOL) & (self.w_minus < -_SUM_TOL)):
            raise ValueError("long and short supports overlap")

    def as_vector(self) -> np.ndarray:
        """Concatenated [w+; w-], length 2N."""
        return np.concatenate([self.w_plus, self.w_minus])


@dataclass
class AccountState:
    """Wealth marked at the current prices plus the open books."""

    ac: float
    b_plus: np.ndarray
    b_minus: np.ndarray
    x_a: PortfolioVector


@dataclass
class DsrState:
    """EMA moment estimates backing the differential Sharpe ratio."""

    alpha: float = 0.0
    beta: float = 0.0
    eta: float = 0.01
    steps_seen: int = 0


@dataclass
class EnvConfig:
    gamma: float = 0.99
    transaction_cost: float = 0.0
    risk_free: float = 0.0
    allow_short: bool = True
    episode_length: int = 64
    dsr_eta: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("env.gamma", "must be in (0, 1]")
        if self.transaction_cost < 0:
            raise ConfigError("env.transaction_cost", "must be >= 0")
        if not (0.0 < self.dsr_eta < 1.0):
            raise ConfigError("env.dsr_eta", "must be in (0, 1)")
        if self.episode_length < 1:
            raise ConfigError("env.episode_length", "must be >= 1")


@dataclass
class StateSnapshot:
    """What a policy sees at one timestep."""

    x_s: np.ndarray
    x_m: np.ndarray
    x_a: PortfolioVector
    t_index: int
    ac: float


def rebalance(
    acct: AccountState,
    action: PortfolioVector,
    prices_now: np.ndarray,
    prices_next: np.ndarray,
    cost_rate: float = 0.0,
) -> tuple[AccountState, float]:
    """Execute one full reposition and mark to the next prices.

    Sequence: sell the long book and buy back the borrowed book at current
    prices (wealth AC_t), borrow/sell short worth AC_t*rho (cash TC_t =
    AC_t*(1+rho)), buy longs per w+ with TC_t. Proportional cost is charged
    on the notional of all four legs.
    """
    p_now = np.asarray(prices_now, dtype=np.float64)
    p_next = np.asarray(prices_next, dtype=np.float64)
    ac_t = acct.ac

    turnover_close = float(acct.b_plus @ p_now + acct.b_minus @ p_now)
    tc_t = ac_t * (1.0 + action.rho)
    b_plus = tc_t * action.w_plus / p_now
    b_minus = ac_t * (-action.w_minus) / p_now
    turnover_open = ac_t * action.rho + tc_t

    ac_next = float(b_plus @ p_next - b_minus @ p_next)
    ac_next -= cost_rate * (turnover_close + turnover_open)
    ror = ac_next / ac_t - 1.0
    new_acct = AccountState(ac=ac_next, b_plus=b_plus, b_minus=b_minus, x_a=action)
    return new_acct, ror


def dsr_reward(dsr: DsrState, ror: float) -> tuple[float, DsrState]:
    """Differential Sharpe ratio of one return, then update the EMA moments.

    Emits 0 during warm-up (fewer than two returns seen, or when the variance
    proxy beta - alpha^2 collapses, e.g. under a constant return stream).
    """
    var = dsr.beta - dsr.alpha**2
    if dsr.steps_seen < 2 or var <= 1e-8:
        reward = 0.0
    else:
        d_alpha = ror - dsr.alpha
        d_beta = ror**2 - dsr.beta
        reward = (dsr.beta * d_alpha - 0.5 * dsr.alpha * d_beta) / var**1.5
    new = DsrState(
        alpha=dsr.alpha + dsr.eta * (ror - dsr.alpha),
        beta=dsr.beta + dsr.eta * (ror**2 - dsr.beta),
        eta=dsr.eta,
        steps_seen=dsr.steps_seen + 1,
    )
    return reward, new


@dataclass
class TraceRow:
    t: int
    ac: float
    ror: float
    reward: float
    rho: float
    action_json: str


class TradingEnv:
    """Episode runner over a FeatureSet window."""

    def __init__(self, features: FeatureSet, config: EnvConfig):
        self.features = features
        self.config = config
        self._t: int = -1
        self._end: int = -1
        self._acct: AccountState | None = None
        self._dsr: DsrState | None = None
        self._done = True
        self.trace: list[TraceRow] = []

    @property
    def n_assets(self) -> int:
        return self.features.n_assets

    def reset(self, start_t: int, length: int | None = None, seed: int | None = None) -> StateSnapshot:
        """Start an episode at decision timestep ``start_t``.

        The episode runs ``length`` holding periods (default: the configured
        episode length); every step needs the next period's closing prices.
        ``seed`` is accepted for interface symmetry; the environment itself
        is deterministic.
        """
        length = self.config.episode_length if length is None else length
        first = self.features.first_valid
        last_needed = start_t + length
        if start_t < first:
            raise WindowError(f"start {start_t} before first valid step {first}")
        if last_needed > self.features.prices.n_periods - 1:
            raise WindowError(
                f"episode needs prices through {last_needed}, table ends at "
                f"{self.features.prices.n_periods - 1}"
            )
        n = self.n_assets
        self._t = start_t
        self._end = start_t + length
        self._acct = AccountState(
            ac=1.0, b_plus=np.zeros(n), b_minus=np.zeros(n), x_a=PortfolioVector.hold_cash(n)
        )
        self._dsr = DsrState(eta=self.config.dsr_eta)
        self._done = False
        self.trace = []
        return self._snapshot()

    def _snapshot(self) -> StateSnapshot:
        w = self.features.window(self._t)
        return StateSnapshot(
            x_s=w.x_s, x_m=w.x_m, x_a=self._acct.x_a, t_index=self._t, ac=self._acct.ac
        )

    def step(self, action: PortfolioVector) -> tuple[StateSnapshot, float, bool, dict]:
        if self._done:
            raise LifecycleError("step() after episode end")
        if not self.config.allow_short and action.rho != 0.0:
            raise ValueError("short leg supplied with allow_short disabled")
        action.validate(allow_overlap=True)

        close = self.features.prices.close
        t = self._t
        self._acct, ror = rebalance(
            self._acct, action, close[:, t], close[:, t + 1], self.config.transaction_cost
        )
        reward, self._dsr = dsr_reward(self._dsr, ror)
        bankrupt = self._acct.ac <= 0.0
        self._t = t + 1
        self._done = bankrupt or self._t >= self._end
        self.trace.append(
            TraceRow(
                t=t,
                ac=self._acct.ac,
                ror=ror,
                reward=reward,
                rho=action.rho,
                action_json=json.dumps(
                    {
                        "w_plus": [round(float(x), 12) for x in action.w_plus],
                        "w_minus": [round(float(x), 12) for x in action.w_minus],
                    }
                ),
            )
        )
        info = {"ror": ror, "ac": self._acct.ac, "t": self._t, "bankrupt": bankrupt}
        snapshot = self._snapshot()
        return snapshot, reward, self._done, info

    def export_trace(self, path) -> None:
        """Audit CSV: t, AC, RoR, reward, rho, action_json."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "AC", "RoR", "reward", "rho", "action_json"])
            for row in self.trace:
                w.writerow(
                    [row.t, repr(row.ac), repr(row.ror), repr(row.reward), repr(row.rho), row.action_json]
                )


def replay_wealth(ror_series: np.ndarray) -> np.ndarray:
    """Wealth curve implied by a return series, AC_0 = 1."""
    return np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(ror_series, dtype=np.float64))])
