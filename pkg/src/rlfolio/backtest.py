"""Backtesting: execute any decision source over a window, score the run.

Six summary metrics: annualized return (ARR), annualized volatility (AVol),
annualized Sharpe (ASR), Sortino (SoR), maximum drawdown (MDD), and Calmar
(CR). Degenerate denominators produce signed-infinity sentinels with a flag
instead of raising, so ablation sweeps never abort.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlfolio.errors import WindowError
from rlfolio.experts import ExpertDataset
from rlfolio.marketdata import FeatureSet
from rlfolio.metapolicy import MetaConfig, ShadowBook, build_meta_state, q_values
from rlfolio.numcore import ParamStore
from rlfolio.policynet import PolicyNetwork
from rlfolio.tradingenv import EnvConfig, PortfolioVector, StateSnapshot, TradingEnv


@dataclass
class BacktestReport:
    name: str
    wealth: np.ndarray  # (steps + 1,), AC_0 = 1
    ror: np.ndarray  # (steps,)
    metrics: dict[str, float]
    flags: dict[str, bool]
    n_y: float
    ror_f: float
    start_t: int
    truncated: bool = False
    dates: list[str] = field(default_factory=list)

    @property
    def terminal_wealth(self) -> float:
        return float(self.wealth[-1])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "flags": {k: self.flags[k] for k in sorted(self.flags)},
            "n_y": self.n_y,
            "ror_f": self.ror_f,
            "start_t": self.start_t,
            "steps": int(len(self.ror)),
            "terminal_wealth": self.terminal_wealth,
            "truncated": self.truncated,
        }


def compute_metrics(ror, n_y: float, ror_f: float = 0.0) -> tuple[dict[str, float], dict[str, bool]]:
    """The six metrics from a per-period return series.

    Volatility and the Sortino denominator use population (divide-by-T)
    standard deviations; MDD is the largest peak-to-trough fraction of the
    induced wealth curve, floored at 0 so monotone-up runs report 0.
    """
    ror = np.asarray(ror, dtype=np.float64)
    if ror.ndim != 1 or len(ror) < 2:
        raise ValueError("need a return series of length >= 2")
    flags = {"avol_zero": False, "mdd_zero": False, "downside_zero": False}

    arr = (ror.mean() - ror_f) * n_y
    v_t = ror.std()
    avol = v_t * math.sqrt(n_y)

    wealth = np.concatenate([[1.0], np.cumprod(1.0 + ror)])
    peaks = np.maximum.accumulate(wealth)
    mdd = float(np.max((peaks - wealth) / peaks))
    mdd = max(mdd, 0.0)

    if avol > 0:
        asr = arr / avol
    else:
        flags["avol_zero"] = True
        asr = math.inf if arr >= 0 else -math.inf

    if mdd > 0:
        cr = arr / mdd
    else:
        flags["mdd_zero"] = True
        cr = math.inf if arr >= 0 else -math.inf

    downside = np.minimum(ror, 0.0)
    dd = downside.std()
    if dd > 0:
        sor = arr / dd
    else:
        flags["downside_zero"] = True
        sor = math.inf if arr >= 0 else -math.inf

    metrics = {
        "ARR": float(arr),
        "AVol": float(avol),
        "ASR": float(asr),
        "SoR": float(sor),
        "MDD": float(mdd),
        "CR": float(cr),
    }
    return metrics, flags


# ---------------------------------------------------------------------------
# deciders
# ---------------------------------------------------------------------------


class PolicyDecider:
    """Deterministic base-policy actions."""

    def __init__(self, net: PolicyNetwork, name: str = "policy"):
        self.net = net
        self.name = name

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        pass

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        return self.net.act(snapshot)


class ExpertReplayDecider:
    """Replays a demonstration dataset's action at each timestep."""

    def __init__(self, dataset: ExpertDataset):
        self.name = f"expert:{dataset.name}"
        self._by_t = {t: a for t, a in dataset.pairs}

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        pass

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        action = self._by_t.get(snapshot.t_index)
        if action is None:
            raise WindowError(f"{self.name}: no action at timestep {snapshot.t_index}")
        return action


class ConstantDecider:
    """Always the same action; the hold-cash placeholder by default."""

    def __init__(self, action: PortfolioVector | None = None, name: str = "hold"):
        self.action = action
        self.name = name

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        if self.action is None:
            self.action = PortfolioVector.hold_cash(features.n_assets)

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        return self.action


class RandomPickDecider:
    """A random policy id per step; seeded."""

    def __init__(self, policies: list[PolicyNetwork], seed: int):
        self.policies = policies
        self.seed = seed
        self.name = "random-pick"
        self._rng = np.random.default_rng(seed)

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        self._rng = np.random.default_rng(self.seed)
        self.selections: list[int] = []

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        k = int(self._rng.integers(len(self.policies)))
        self.selections.append(k)
        return self.policies[k].act(snapshot)


class AverageWeightDecider:
    """Mean of the base policies' outputs, renormalized onto the simplexes.

    Averaging different supports can long and short the same asset; the
    environment accepts such overlapping ensemble actions.
    """

    def __init__(self, policies: list[PolicyNetwork]):
        self.policies = policies
        self.name = "average-weight"

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        pass

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        actions = [p.act(snapshot) for p in self.policies]
        w_plus = np.mean([a.w_plus for a in actions], axis=0)
        w_plus = w_plus / w_plus.sum()
        rho = float(np.mean([a.rho for a in actions]))
        w_minus = np.mean([a.w_minus for a in actions], axis=0)
        total = -w_minus.sum()
        if total > 0 and rho > 0:
            w_minus = w_minus * (rho / total)
        else:
            w_minus = np.zeros_like(w_minus)
            rho = 0.0
        return PortfolioVector(w_plus, w_minus, rho)


class MetaDecider:
    """Greedy selection by the trained Q network, with live shadow books."""

    def __init__(
        self,
        policies: list[PolicyNetwork],
        q_params: ParamStore,
        meta_config: MetaConfig,
        name: str = "meta",
    ):
        self.policies = policies
        self.q_params = q_params
        self.config = meta_config
        self.name = name
        self.selections: list[tuple[int, int]] = []  # (t, k)

    def reset(self, features: FeatureSet, env_config: EnvConfig) -> None:
        self._books = [
            ShadowBook(p, features, env_config.transaction_cost, self.config.perf_window)
            for p in self.policies
        ]
        for b in self._books:
            b.reset()
        self.selections = []

    def decide(self, snapshot: StateSnapshot) -> PortfolioVector:
        state = build_meta_state(snapshot, self._books)
        q = q_values(state, self.q_params, self.config.hidden)
        k = int(np.argmax(q))
        self.selections.append((snapshot.t_index, k))
        action = self.policies[k].act(snapshot)
        for b in self._books:
            b.step(snapshot.t_index)
        return action


# ---------------------------------------------------------------------------
# running backtests
# ---------------------------------------------------------------------------


def run_backtest(
    decider,
    features: FeatureSet,
    t_lo: int,
    t_hi: int,
    env_config: EnvConfig,
    n_y: float = 252.0,
    ror_f: float = 0.0,
) -> BacktestReport:
    """Execute one decider over decision steps [t_lo, t_hi], inclusive.

    Deterministic given the decider; bankruptcy truncates the run and flags
    the report.
    """
    steps = t_hi - t_lo + 1
    if steps < 2:
        raise WindowError("backtest window needs at least 2 decision steps")
    env = TradingEnv(features, env_config)
    decider.reset(features, env_config)
    snapshot = env.reset(t_lo, steps)
    rors: list[float] = []
    truncated = False
    done = False
    while not done:
        action = decider.decide(snapshot)
        snapshot, _reward, done, info = env.step(action)
        rors.append(info["ror"])
        if info["bankrupt"]:
            truncated = True
    ror = np.asarray(rors)
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + ror)])
    metrics, flags = compute_metrics(ror, n_y, ror_f)
    dates = list(features.prices.dates[t_lo : t_lo + len(ror) + 1])
    return BacktestReport(
        name=getattr(decider, "name", decider.__class__.__name__),
        wealth=wealth,
        ror=ror,
        metrics=metrics,
        flags=flags,
        n_y=n_y,
        ror_f=ror_f,
        start_t=t_lo,
        truncated=truncated,
        dates=dates,
    )


def ablation_single_best(
    policies: list[PolicyNetwork],
    features: FeatureSet,
    train_range: tuple[int, int],
    test_range: tuple[int, int],
    env_config: EnvConfig,
    n_y: float = 252.0,
    ror_f: float = 0.0,
) -> tuple[BacktestReport, int]:
    """Backtest the policy with the largest training-window ARR (ties: lowest index)."""
    arrs = []
    for i, p in enumerate(policies):
        rep = run_backtest(
            PolicyDecider(p, f"base:{i}"), features, *train_range, env_config, n_y, ror_f
        )
        arrs.append(rep.metrics["ARR"])
    best = int(np.argmax(arrs))
    report = run_backtest(
        PolicyDecider(policies[best], f"single-best:{best}"),
        features,
        *test_range,
        env_config,
        n_y,
        ror_f,
    )
    return report, best


def ablation_random_pick(
    policies: list[PolicyNetwork],
    features: FeatureSet,
    test_range: tuple[int, int],
    seed: int,
    env_config: EnvConfig,
    n_y: float = 252.0,
    ror_f: float = 0.0,
) -> BacktestReport:
    return run_backtest(
        RandomPickDecider(policies, seed), features, *test_range, env_config, n_y, ror_f
    )


def ablation_average_weight(
    policies: list[PolicyNetwork],
    features: FeatureSet,
    test_range: tuple[int, int],
    env_config: EnvConfig,
    n_y: float = 252.0,
    ror_f: float = 0.0,
) -> BacktestReport:
    return run_backtest(
        AverageWeightDecider(policies), features, *test_range, env_config, n_y, ror_f
    )


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def report_json(report: BacktestReport, config_hash: str = "") -> str:
    d = report.to_dict()
    if config_hash:
        d["config_hash"] = config_hash
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def write_report(path, report: BacktestReport, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(report, config_hash))


def write_wealth_csv(path, report: BacktestReport) -> None:
    """Per-period curve: t, date, AC after the period, RoR of the period."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "date", "AC", "RoR"])
        for i, r in enumerate(report.ror):
            t = report.start_t + i
            date = report.dates[i] if i < len(report.dates) else ""
            w.writerow([t, date, repr(float(report.wealth[i + 1])), repr(float(r))])


def write_selection_csv(path, selections: list[tuple[int, int]], dates: list[str]) -> None:
    """Meta selection trace: t, date, selected policy id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "date", "selected_k"])
        for t, k in selections:
            date = dates[t] if t < len(dates) else ""
            w.writerow([t, date, k])
