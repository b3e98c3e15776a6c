"""Demonstration datasets: momentum, mean reversion, hindsight, and empty.

Each generator walks a PriceTable and emits (timestep, PortfolioVector)
pairs. The momentum and mean-reversion experts are strictly causal; the
hindsight expert reads the next period's prices and therefore refuses to
emit for the final period.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlfolio.errors import ConfigError, WindowError
from rlfolio.marketdata import PriceTable
from rlfolio.selection import select_sets
from rlfolio.tradingenv import PortfolioVector


@dataclass
class ExpertDataset:
    """Ordered (timestep index, action) demonstration pairs."""

    name: str
    pairs: list[tuple[int, PortfolioVector]] = field(default_factory=list)

    def __post_init__(self):
        ts = [t for t, _ in self.pairs]
        if any(a >= b for a, b in zip(ts, ts[1:])):
            raise ValueError("pair timesteps must be strictly increasing")
        for _, a in self.pairs:
            a.validate()

    def __len__(self) -> int:
        return len(self.pairs)

    def action_at(self, t: int) -> PortfolioVector | None:
        for ti, a in self.pairs:
            if ti == t:
                return a
        return None

    def restrict(self, t_lo: int, t_hi: int) -> "ExpertDataset":
        return ExpertDataset(self.name, [(t, a) for t, a in self.pairs if t_lo <= t <= t_hi])


def _equal_weight_action(
    scores: np.ndarray, m: int, rho: float
) -> PortfolioVector:
    n = len(scores)
    long_set, short_set = select_sets(scores, m, rho > 0)
    w_plus = np.zeros(n)
    w_plus[long_set] = 1.0 / m
    w_minus = np.zeros(n)
    if rho > 0:
        w_minus[short_set] = -rho / m
    return PortfolioVector(w_plus, w_minus, rho if rho > 0 else 0.0)


def _check_m(n: int, m: int, rho: float) -> None:
    if m < 1 or m > n:
        raise ConfigError("experts.top_m", f"M={m} outside [1, {n}]")
    if rho > 0 and 2 * m > n:
        raise ConfigError("experts.top_m", f"shorting requires 2M <= N (M={m}, N={n})")


def gen_csm(prices: PriceTable, m: int, rho_fixed: float = 0.5) -> ExpertDataset:
    """Cross-sectional momentum: rank by the trailing 3-period rising rate
    prod(1 + RoR_{t-i}) for i in 1..3; long the top M, short the bottom M,
    equal weights."""
    _check_m(prices.n_assets, m, rho_fixed)
    if prices.n_periods < 4:
        raise WindowError("momentum expert needs at least 4 periods of history")
    c = prices.close
    pairs = []
    for t in range(3, prices.n_periods):
        momentum = c[:, t] / c[:, t - 3]
        pairs.append((t, _equal_weight_action(momentum, m, rho_fixed)))
    return ExpertDataset("csm", pairs)


def gen_blsw(
    prices: PriceTable, m: int, rho_fixed: float = 0.5, mean_window: int = 20
) -> ExpertDataset:
    """Mean reversion (buy losers, sell winners): rank by how far price sits
    below its trailing average, (MA - p)/p; long the most depressed M."""
    _check_m(prices.n_assets, m, rho_fixed)
    if prices.n_periods < mean_window + 1:
        raise WindowError(f"mean-reversion expert needs {mean_window + 1} periods")
    c = prices.close
    pairs = []
    for t in range(mean_window - 1, prices.n_periods):
        ma = c[:, t - mean_window + 1 : t + 1].mean(axis=1)
        score = (ma - c[:, t]) / c[:, t]
        pairs.append((t, _equal_weight_action(score, m, rho_fixed)))
    return ExpertDataset("blsw", pairs)


def gen_hindsight(prices: PriceTable, m: int, rho_fixed: float = 0.5) -> ExpertDataset:
    """Hindsight greedy: rank by the realized next-period return; weight the
    selected names by a softmax over their next-period log returns (sign-safe
    normalization of the rising rates). Training data only: the final period
    has no successor and is never emitted."""
    _check_m(prices.n_assets, m, rho_fixed)
    if prices.n_periods < 2:
        raise WindowError("hindsight expert needs a following period")
    c = prices.close
    n = prices.n_assets
    pairs = []
    for t in range(prices.n_periods - 1):
        g = c[:, t + 1] / c[:, t]
        logret = np.log(g)
        long_set, short_set = select_sets(logret, m, rho_fixed > 0)
        w_plus = np.zeros(n)
        e = np.exp(logret[long_set] - logret[long_set].max())
        w_plus[long_set] = e / e.sum()
        w_minus = np.zeros(n)
        if rho_fixed > 0:
            e = np.exp(-logret[short_set] + logret[short_set].min())
            w_minus[short_set] = -rho_fixed * e / e.sum()
        pairs.append((t, PortfolioVector(w_plus, w_minus, rho_fixed if rho_fixed > 0 else 0.0)))
    return ExpertDataset("hindsight", pairs)


def empty_dataset() -> ExpertDataset:
    """The no-demonstration dataset: pure-RL training falls out of the mixed
    objective when the cloning term has nothing to average over."""
    return ExpertDataset("empty", [])


STANDARD_DATASETS = ("csm", "blsw", "hindsight", "empty")


def generate_standard(
    prices: PriceTable,
    m: int,
    rho_fixed: float = 0.5,
    mean_window: int = 20,
    t_lo: int | None = None,
    t_hi: int | None = None,
) -> list[ExpertDataset]:
    """The four standard datasets, optionally restricted to [t_lo, t_hi]."""
    out = [
        gen_csm(prices, m, rho_fixed),
        gen_blsw(prices, m, rho_fixed, mean_window),
        gen_hindsight(prices, m, rho_fixed),
        empty_dataset(),
    ]
    if t_lo is not None or t_hi is not None:
        lo = 0 if t_lo is None else t_lo
        hi = prices.n_periods if t_hi is None else t_hi
        out = [d.restrict(lo, hi) for d in out]
    return out


# ---------------------------------------------------------------------------
# file formats: CSV of nonzero weights plus a JSON manifest sidecar
# ---------------------------------------------------------------------------


def dataset_hash(prices: PriceTable) -> str:
    h = hashlib.sha256()
    h.update(",".join(prices.symbols).encode())
    h.update(",".join(prices.dates).encode())
    h.update(np.ascontiguousarray(prices.close).tobytes())
    return h.hexdigest()


def save_dataset(
    ds: ExpertDataset, path, *, m: int, rho: float, window: int | None, source_hash: str
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "asset", "weight"])
        for t, a in ds.pairs:
            for i in np.nonzero(a.w_plus)[0]:
                w.writerow([t, int(i), repr(float(a.w_plus[i]))])
            for i in np.nonzero(a.w_minus)[0]:
                w.writerow([t, int(i), repr(float(a.w_minus[i]))])
    manifest = {
        "name": ds.name,
        "m": m,
        "rho": rho,
        "window": window,
        "source_hash": source_hash,
        "pairs": len(ds.pairs),
    }
    with open(path.with_suffix(".manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load_dataset(path, n_assets: int) -> tuple[ExpertDataset, dict]:
    path = Path(path)
    with open(path.with_suffix(".manifest.json")) as f:
        manifest = json.load(f)
    by_t: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    with open(path) as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            t, asset, weight = int(row[0]), int(row[1]), float(row[2])
            if t not in by_t:
                by_t[t] = (np.zeros(n_assets), np.zeros(n_assets))
            if weight >= 0:
                by_t[t][0][asset] = weight
            else:
                by_t[t][1][asset] = weight
    rho = manifest["rho"]
    pairs = []
    for t in sorted(by_t):
        w_plus, w_minus = by_t[t]
        pairs.append((t, PortfolioVector(w_plus, w_minus, -w_minus.sum())))
    ds = ExpertDataset(manifest["name"], pairs)
    return ds, manifest
