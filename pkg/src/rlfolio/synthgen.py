"""Synthetic market generator: regime-switching geometric random walks.

Produces deterministic, seed-reproducible price tables with controllable
per-regime drift/volatility structure and an exported regime trace, so tests
can construct markets where momentum or mean-reversion behaviour is known in
advance.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from rlfolio.errors import ConfigError
from rlfolio.marketdata import PriceTable


@dataclass
class SynthSpec:
    """Specification of a regime-switching synthetic market.

    drift and vol are (R, N) per-regime per-asset arrays (log-return units per
    period). The regime path is either an explicit sequence of length
    n_periods or a row-stochastic (R, R) Markov transition matrix.
    """

    n_assets: int
    n_periods: int
    drift: np.ndarray
    vol: np.ndarray
    seed: int = 0
    regime_sequence: np.ndarray | None = None
    switch_prob: np.ndarray | None = None
    start_price: float = 100.0
    start_date: str = "2000-01-03"
    alternating: np.ndarray | None = None  # (R, N) per-period sign-flip amplitude
    _n_regimes: int = field(init=False, default=0)

    def __post_init__(self):
        self.drift = np.atleast_2d(np.asarray(self.drift, dtype=np.float64))
        self.vol = np.atleast_2d(np.asarray(self.vol, dtype=np.float64))
        if self.drift.shape != self.vol.shape:
            raise ConfigError("synth.vol", f"shape {self.vol.shape} != drift {self.drift.shape}")
        if self.drift.shape[1] != self.n_assets:
            raise ConfigError("synth.drift", f"{self.drift.shape[1]} columns for {self.n_assets} assets")
        if np.any(self.vol < 0):
            raise ConfigError("synth.vol", "volatilities must be >= 0")
        self._n_regimes = self.drift.shape[0]
        if self.alternating is not None:
            self.alternating = np.atleast_2d(np.asarray(self.alternating, dtype=np.float64))
            if self.alternating.shape != self.drift.shape:
                raise ConfigError("synth.alternating", "shape must match drift")
        if self.regime_sequence is not None:
            self.regime_sequence = np.asarray(self.regime_sequence, dtype=np.int64)
            if len(self.regime_sequence) != self.n_periods:
                raise ConfigError("synth.regime_sequence", "length must equal n_periods")
            if self.regime_sequence.max() >= self._n_regimes or self.regime_sequence.min() < 0:
                raise ConfigError("synth.regime_sequence", "regime id out of range")
        elif self._n_regimes > 1:
            if self.switch_prob is None:
                raise ConfigError("synth.switch_prob", "required when no regime_sequence given")
            self.switch_prob = np.asarray(self.switch_prob, dtype=np.float64)
            if self.switch_prob.shape != (self._n_regimes, self._n_regimes):
                raise ConfigError("synth.switch_prob", "must be (R, R)")
            if not np.allclose(self.switch_prob.sum(axis=1), 1.0):
                raise ConfigError("synth.switch_prob", "rows must sum to 1")


def block_regime_sequence(n_periods: int, block: int, n_regimes: int = 2) -> np.ndarray:
    """Deterministic regime path cycling through regimes in fixed-size blocks."""
    return (np.arange(n_periods) // block) % n_regimes


def generate(spec: SynthSpec) -> tuple[PriceTable, np.ndarray]:
    """Generate a PriceTable and the regime trace (one id per period).

    Log prices follow a random walk with regime-dependent drift; an optional
    alternating term adds a deterministic period-2 oscillation so
    mean-reversion structure can be dialed in. open=high=low=close, volume=1.
    """
    rng = np.random.default_rng(spec.seed)
    N, T = spec.n_assets, spec.n_periods

    if spec.regime_sequence is not None:
        regimes = spec.regime_sequence.copy()
    elif spec._n_regimes == 1:
        regimes = np.zeros(T, dtype=np.int64)
    else:
        regimes = np.empty(T, dtype=np.int64)
        regimes[0] = 0
        for t in range(1, T):
            regimes[t] = rng.choice(spec._n_regimes, p=spec.switch_prob[regimes[t - 1]])

    shocks = rng.standard_normal((T, N))
    log_ret = spec.drift[regimes] + spec.vol[regimes] * shocks
    if spec.alternating is not None:
        # antiphase pairs: even assets flip with +(-1)^t, odd assets with -(-1)^t
        phase = np.where(np.arange(N) % 2 == 0, 1.0, -1.0)
        signs = np.where(np.arange(T)[:, None] % 2 == 0, 1.0, -1.0) * phase[None, :]
        log_ret = log_ret + spec.alternating[regimes] * signs

    log_p = np.log(spec.start_price) + np.concatenate(
        [np.zeros((1, N)), np.cumsum(log_ret, axis=0)], axis=0
    )
    close = np.exp(log_p).T  # (N, T+1): price at t=0 plus one per period

    start = dt.date.fromisoformat(spec.start_date)
    dates = [(start + dt.timedelta(days=i)).isoformat() for i in range(T + 1)]
    symbols = [f"A{i:02d}" for i in range(N)]
    ones = np.ones_like(close)
    table = PriceTable(
        symbols=symbols,
        dates=dates,
        open=close.copy(),
        high=close.copy(),
        low=close.copy(),
        close=close,
        volume=ones,
    )
    return table, regimes


def write_regime_csv(path, dates, regimes) -> None:
    """Regime trace as ``date,regime`` rows; aligned to holding periods."""
    import csv
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["date", "regime"])
        for d, r in zip(dates, regimes):
            w.writerow([d, int(r)])


def read_regime_csv(path) -> tuple[list[str], np.ndarray]:
    import csv

    dates, regimes = [], []
    with open(path) as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["date", "regime"]:
            raise ValueError(f"{path}: unexpected regime header {header}")
        for row in r:
            dates.append(row[0])
            regimes.append(int(row[1]))
    return dates, np.asarray(regimes, dtype=np.int64)
