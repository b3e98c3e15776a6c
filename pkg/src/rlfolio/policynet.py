"""Portfolio-generation network.

A dilated-causal TCN reads per-asset features, a learned cross-asset
attention matrix mixes them, a residual score head maps each asset to a
rising-potential score in [-1, 1], a market-branch LSTM with temporal
attention emits the short ratio, and the top-M head turns scores into a
long/short portfolio vector (long weights sum to 1, short weights to -rho,
disjoint supports).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rlfolio.errors import ConfigError, ShapeError
from rlfolio.numcore import (
    ParamStore,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d_causal,
    getitem,
    lstm_cell,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
    tsum,
    uniform_init,
)
from rlfolio.selection import select_sets
from rlfolio.tradingenv import PortfolioVector, StateSnapshot


@dataclass
class PolicyConfig:
    n_assets: int
    in_channels: int
    hidden: int
    lookback: int
    top_m: int
    market_channels: int
    kernel_size: int = 2
    dilations: tuple[int, ...] = (1, 2)
    allow_short: bool = True
    noise_sigma: float = 0.1
    short_ratio_scale: float = 1.0

    def __post_init__(self):
        if not (1 <= self.top_m <= self.n_assets):
            raise ConfigError("policy.top_m", f"M={self.top_m} outside [1, {self.n_assets}]")
        if self.allow_short and 2 * self.top_m > self.n_assets:
            raise ConfigError(
                "policy.top_m", f"shorting requires 2M <= N (M={self.top_m}, N={self.n_assets})"
            )
        if self.noise_sigma < 0:
            raise ConfigError("policy.noise_sigma", "must be >= 0")
        if not (0.0 < self.short_ratio_scale <= 1.0):
            raise ConfigError("policy.short_ratio_scale", "must be in (0, 1]")


def build_policy_params(config: PolicyConfig, seed: int) -> ParamStore:
    """Freshly initialized parameters; uniform +-1/sqrt(fan_in) everywhere."""
    rng = np.random.default_rng(seed)
    p = ParamStore()
    n, f_in, f = config.n_assets, config.in_channels, config.hidden
    t, f_m, k = config.lookback, config.market_channels, config.kernel_size

    c_in = f_in
    for i in range(len(config.dilations)):
        p.add(f"tcn.l{i}.w", uniform_init(rng, (f, c_in, k), c_in * k))
        p.add(f"tcn.l{i}.b", uniform_init(rng, (f,), c_in * k))
        c_in = f
    p.add("attn.w1", uniform_init(rng, (t,), t))
    p.add("attn.w2", uniform_init(rng, (f, t), f))
    p.add("attn.w3", uniform_init(rng, (f,), f))
    p.add("attn.vs", uniform_init(rng, (n, n), n))
    p.add("attn.bs", uniform_init(rng, (n, n), n))
    p.add("score.proj", uniform_init(rng, (f, f_in, 1), f_in))
    p.add("score.w4", uniform_init(rng, (f,), f))
    p.add("score.b4", uniform_init(rng, (), f))
    p.add("score.wt", uniform_init(rng, (3,), 3))
    p.add("score.b", uniform_init(rng, (), 3))
    if config.allow_short:
        p.add("mkt.w_ih", uniform_init(rng, (4 * f, f_m), f_m))
        p.add("mkt.w_hh", uniform_init(rng, (4 * f, f), f))
        p.add("mkt.b", uniform_init(rng, (4 * f,), f))
        p.add("mkt.ve", uniform_init(rng, (f,), f))
        p.add("mkt.w5", uniform_init(rng, (f, 2 * f), 2 * f))
        p.add("mkt.w6", uniform_init(rng, (f, f_m), f_m))
        p.add("mkt.w7", uniform_init(rng, (f,), f))
        p.add("mkt.bm", uniform_init(rng, (), f))
    return p


def tcn_forward(x_s, params: ParamStore, config: PolicyConfig) -> Tensor:
    """Causal dilated convolution stack over (N, F_in, T) asset features."""
    h = as_tensor(x_s)
    if h.shape != (config.n_assets, config.in_channels, config.lookback):
        raise ShapeError(f"tcn_forward: x_s {h.shape}")
    for i, d in enumerate(config.dilations):
        w = params[f"tcn.l{i}.w"]
        b = params[f"tcn.l{i}.b"]
        h = conv1d_causal(h, w, dilation=d)
        h = relu(add(h, reshape(b, (1, b.shape[0], 1))))
    return h


def spatial_attention(hhat, params: ParamStore) -> Tensor:
    """Row-stochastic cross-asset attention from the TCN output."""
    hhat = as_tensor(hhat)
    n, f, t = hhat.shape
    a = reshape(matmul(reshape(hhat, (n * f, t)), params["attn.w1"]), (n, f))
    b = matmul(a, params["attn.w2"])  # (N, T)
    c = reshape(matmul(reshape(transpose(hhat, (0, 2, 1)), (n * t, f)), params["attn.w3"]), (n, t))
    pre = add(matmul(b, transpose(c, (1, 0))), params["attn.bs"])
    s_hat = matmul(params["attn.vs"], sigmoid(pre))
    return softmax(s_hat, axis=1)


def asset_scores(hhat, s, x_s, x_a: PortfolioVector, params: ParamStore) -> Tensor:
    """Per-asset rising-potential scores v in [-1, 1]^N.

    Residual fuse: H = S @ Hhat + proj(x_s) (1x1 projection aligns channel
    counts), read the last time slice, then fold in the previous portfolio
    weights per asset.
    """
    hhat, s = as_tensor(hhat), as_tensor(s)
    n, f, t = hhat.shape
    mixed = reshape(matmul(s, reshape(hhat, (n, f * t))), (n, f, t))
    h = add(mixed, conv1d_causal(as_tensor(x_s), params["score.proj"], dilation=1))
    h_last = getitem(h, (slice(None), slice(None), t - 1))  # (N, F)
    vhat = add(matmul(h_last, params["score.w4"]), params["score.b4"])  # (N,)
    feats = concat(
        [
            reshape(vhat, (n, 1)),
            Tensor(x_a.w_plus.reshape(n, 1)),
            Tensor(x_a.w_minus.reshape(n, 1)),
        ],
        axis=1,
    )
    u = add(matmul(feats, params["score.wt"]), params["score.b"])
    return sub(mul(sigmoid(u), 2.0), 1.0)


def market_head(x_m, params: ParamStore, config: PolicyConfig) -> Tensor:
    """Short ratio in (0.5, 1.0) from the market branch; 0 when shorting is off.

    LSTM over the market-feature columns, temporal attention keyed on each
    hidden state, the final hidden state, and the final feature column, then
    a squashed readout of the attention-weighted context.
    """
    if not config.allow_short:
        return Tensor(0.0)
    x_m = as_tensor(x_m)
    f_m, t = x_m.shape
    f = config.hidden
    w_ih, w_hh, b = params["mkt.w_ih"], params["mkt.w_hh"], params["mkt.b"]
    h = Tensor(np.zeros(f))
    c = Tensor(np.zeros(f))
    hs = []
    for step in range(t):
        x_t = getitem(x_m, (slice(None), step))
        h, c = lstm_cell(x_t, h, c, w_ih, w_hh, b)
        hs.append(h)
    h_t_final = hs[-1]
    w6x = matmul(params["mkt.w6"], getitem(x_m, (slice(None), t - 1)))
    es = []
    for step in range(t):
        z = tanh(add(matmul(params["mkt.w5"], concat([hs[step], h_t_final])), w6x))
        es.append(reshape(matmul(params["mkt.ve"], z), (1,)))
    alpha = softmax(concat(es), axis=0)
    stacked = concat([reshape(hh, (1, f)) for hh in hs], axis=0)  # (T, F)
    ctx = matmul(alpha, stacked)  # (F,)
    rho = add(mul(sigmoid(add(matmul(params["mkt.w7"], ctx), params["mkt.bm"])), 0.5), 0.5)
    if config.short_ratio_scale != 1.0:
        rho = mul(rho, config.short_ratio_scale)
    return rho


def portfolio_head(v, rho, m: int, allow_short: bool = True):
    """Scores to portfolio weights.

    Long: softmax of v over the top-M set. Short: -rho times the softmax of
    -v over the bottom-M of the remaining assets. Selection is discrete
    (no gradient); weights are differentiable within each set.

    Returns (w_plus Tensor, w_minus Tensor, long_set, short_set).
    """
    v = as_tensor(v)
    n = v.shape[0]
    if not (1 <= m <= n):
        raise ConfigError("policy.top_m", f"M={m} outside [1, {n}]")
    rho_t = as_tensor(rho)
    want_short = allow_short and float(rho_t.data) > 0.0
    long_set, short_set = select_sets(v.data, m, want_short)

    scatter_long = np.zeros((n, m))
    scatter_long[long_set, np.arange(m)] = 1.0
    w_plus = matmul(Tensor(scatter_long), softmax(getitem(v, long_set)))
    if want_short:
        scatter_short = np.zeros((n, m))
        scatter_short[short_set, np.arange(m)] = 1.0
        w_sel = softmax(getitem(neg(v), short_set))
        w_minus = neg(mul(rho_t, matmul(Tensor(scatter_short), w_sel)))
    else:
        w_minus = Tensor(np.zeros(n))
    return w_plus, w_minus, long_set, short_set


@dataclass
class PolicyOutput:
    """One forward pass: tensors for gradients plus the numeric action."""

    v: Tensor
    s: Tensor
    rho: Tensor
    w_plus: Tensor
    w_minus: Tensor
    long_set: np.ndarray
    short_set: np.ndarray
    action: PortfolioVector = field(init=False)

    def __post_init__(self):
        self.action = PortfolioVector(
            self.w_plus.data.copy(), self.w_minus.data.copy(), float(self.rho.data)
        )


class PolicyNetwork:
    """Configuration + parameters + forward passes for one base policy."""

    def __init__(self, config: PolicyConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: PolicyConfig, seed: int) -> "PolicyNetwork":
        return cls(config, build_policy_params(config, seed))

    def forward(self, x_s, x_m, x_a: PortfolioVector) -> PolicyOutput:
        """Deterministic forward; all heads live on one tape."""
        cfg = self.config
        hhat = tcn_forward(x_s, self.params, cfg)
        s = spatial_attention(hhat, self.params)
        v = asset_scores(hhat, s, x_s, x_a, self.params)
        rho = market_head(x_m, self.params, cfg)
        w_plus, w_minus, long_set, short_set = portfolio_head(
            v, rho, cfg.top_m, allow_short=cfg.allow_short
        )
        return PolicyOutput(
            v=v, s=s, rho=rho, w_plus=w_plus, w_minus=w_minus,
            long_set=long_set, short_set=short_set,
        )

    def act(self, snapshot: StateSnapshot) -> PortfolioVector:
        """Noiseless action for evaluation/backtesting."""
        return self.forward(snapshot.x_s, snapshot.x_m, snapshot.x_a).action

    def act_stochastic(
        self, snapshot: StateSnapshot, rng: np.random.Generator
    ) -> tuple[PortfolioVector, np.ndarray, PolicyOutput]:
        """Training-rollout action from Gaussian-perturbed scores.

        Returns (action, sampled score vector, deterministic forward); the
        sampled scores are what the log-density term is evaluated at during
        the update pass.
        """
        cfg = self.config
        out = self.forward(snapshot.x_s, snapshot.x_m, snapshot.x_a)
        if cfg.noise_sigma == 0.0:
            return out.action, out.v.data.copy(), out
        v_sampled = out.v.data + rng.normal(0.0, cfg.noise_sigma, size=out.v.shape)
        w_plus, w_minus, _, _ = portfolio_head(
            Tensor(v_sampled), float(out.rho.data), cfg.top_m, allow_short=cfg.allow_short
        )
        action = PortfolioVector(w_plus.data.copy(), w_minus.data.copy(), float(out.rho.data))
        return action, np.asarray(v_sampled, dtype=np.float64), out

    def log_prob(self, v: Tensor, v_sampled: np.ndarray) -> Tensor:
        """Diagonal-Gaussian log-density of sampled scores around the mean v.

        With sigma = 0 the policy is deterministic and the log-probability is
        the constant 0 (no gradient signal from the density).
        """
        sigma = self.config.noise_sigma
        if sigma == 0.0:
            return Tensor(0.0)
        n = v.shape[0]
        diff = sub(Tensor(np.asarray(v_sampled)), v)
        quad = mul(tsum(mul(diff, diff)), -1.0 / (2.0 * sigma * sigma))
        return add(quad, -0.5 * n * math.log(2.0 * math.pi * sigma * sigma))
