"""Channel codec, physical-channel simulation and mutual information.

Symbols are real-valued: the channel encoder flattens a feature tensor
through a two-layer MLP and normalises to unit average power, the decoder
mirrors it.  The AWGN channel adds Gaussian noise at the variance implied
by the configured SNR; the Rayleigh channel applies one scalar fading
gain per vector and equalises it away under perfect channel knowledge
(``y = x + n / h``).  ``snr_db = inf`` is the documented noiseless
surrogate (zero noise variance).

The mutual-information estimator maximises the Donsker-Varadhan lower
bound ``E[T(x, y)] - log E[exp T(x, y')]`` with a small statistics MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .codec import FeatureTensor

CHANNEL_KINDS = ("awgn", "rayleigh")
DEFAULT_HIDDEN = 512


@dataclass
class SymbolVector:
    """Real channel symbols plus the source shape they must decode back to."""

    symbols: np.ndarray
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"symbols must be 1-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("symbols contain non-finite values")
        self.symbols = s

    @property
    def power(self) -> float:
        return float(np.mean(self.symbols ** 2))


@dataclass
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        snr = float(self.snr_db)
        if math.isnan(snr) or snr == -math.inf:
            raise ValueError(f"invalid snr_db {self.snr_db!r}")
        self.snr_db = snr


@dataclass
class ChannelParams:
    params: nn.Params
    n_symbols: int
    hidden: int
    feature_shape: tuple[int, int, int]

    def copy(self) -> "ChannelParams":
        return ChannelParams({k: v.copy() for k, v in self.params.items()},
                             self.n_symbols, self.hidden, self.feature_shape)


@dataclass
class MIEstimatorParams:
    params: nn.Params
    hidden: int

    def copy(self) -> "MIEstimatorParams":
        return MIEstimatorParams({k: v.copy() for k, v in self.params.items()}, self.hidden)


def init_channel_params(feature_shape: tuple[int, int, int], hidden: int = DEFAULT_HIDDEN,
                        seed: int = 0) -> ChannelParams:
    """Symbol count equals the feature element count (no reduction here)."""
    n = int(np.prod(feature_shape))
    rng = np.random.default_rng(seed)
    params = {
        "cenc_w1": nn.he_normal(rng, (n, hidden), n),
        "cenc_b1": np.zeros(hidden),
        "cenc_w2": nn.glorot_normal(rng, (hidden, n), hidden, n),
        "cenc_b2": np.zeros(n),
        "cdec_w1": nn.he_normal(rng, (n, hidden), n),
        "cdec_b1": np.zeros(hidden),
        "cdec_w2": nn.glorot_normal(rng, (hidden, n), hidden, n),
        "cdec_b2": np.zeros(n),
    }
    return ChannelParams(params, n_symbols=n, hidden=hidden, feature_shape=tuple(feature_shape))


def noise_variance(snr_db: float, signal_power: float) -> float:
    """Noise variance for a target SNR: ``signal_power / 10^(snr_db/10)``."""
    if signal_power <= 0.0:
        raise ValueError(f"signal power must be positive, got {signal_power}")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError(f"invalid snr_db {snr_db}")
    return signal_power / (10.0 ** (snr_db / 10.0))


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

def chanenc_forward(chp: ChannelParams, fflat: np.ndarray):
    # leaky hidden units: the normalised symbols carry a large common
    # component that would kill half of a plain-ReLU layer for good
    p = chp.params
    h_pre, ac1 = nn.affine_forward(fflat, p["cenc_w1"], p["cenc_b1"])
    h, rc = nn.leaky_relu_forward(h_pre)
    z, ac2 = nn.affine_forward(h, p["cenc_w2"], p["cenc_b2"])
    y, pnc = nn.power_normalize_forward(z)
    return y, (ac1, rc, ac2, pnc)


def chanenc_backward(chp: ChannelParams, cache, dy):
    ac1, rc, ac2, pnc = cache
    dz = nn.power_normalize_backward(dy, pnc)
    dh, dw2, db2 = nn.affine_backward(dz, ac2)
    dh_pre = nn.leaky_relu_backward(dh, rc)
    df, dw1, db1 = nn.affine_backward(dh_pre, ac1)
    return df, {"cenc_w1": dw1, "cenc_b1": db1, "cenc_w2": dw2, "cenc_b2": db2}


def chandec_forward(chp: ChannelParams, y: np.ndarray):
    p = chp.params
    h_pre, ac1 = nn.affine_forward(y, p["cdec_w1"], p["cdec_b1"])
    h, rc = nn.leaky_relu_forward(h_pre)
    fhat, ac2 = nn.affine_forward(h, p["cdec_w2"], p["cdec_b2"])
    return fhat, (ac1, rc, ac2)


def chandec_backward(chp: ChannelParams, cache, dfhat):
    ac1, rc, ac2 = cache
    dh, dw2, db2 = nn.affine_backward(dfhat, ac2)
    dh_pre = nn.leaky_relu_backward(dh, rc)
    dy, dw1, db1 = nn.affine_backward(dh_pre, ac1)
    return dy, {"cdec_w1": dw1, "cdec_b1": db1, "cdec_w2": dw2, "cdec_b2": db2}


def transmit_batch(x: np.ndarray, config: ChannelConfig, rng: np.random.Generator):
    """Push (B, N) unit-power rows through the configured channel.

    The gradient of the output w.r.t. the input is the identity for both
    supported channels (noise is additive after equalisation).
    """
    var = noise_variance(config.snr_db, 1.0)
    if config.kind == "awgn":
        if var == 0.0:
            return x.copy()
        return x + rng.normal(0.0, np.sqrt(var), size=x.shape)
    # rayleigh: h = sqrt(g1^2 + g2^2), g ~ N(0, 1/2) per component, E[h^2] = 1
    g = rng.normal(0.0, np.sqrt(0.5), size=(x.shape[0], 2))
    h = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    if var == 0.0:
        return x.copy()
    noise = rng.normal(0.0, np.sqrt(var), size=x.shape)
    return x + noise / h


# ---------------------------------------------------------------------------
# public single-tensor operations
# ---------------------------------------------------------------------------

def channel_encode(features: FeatureTensor, params: ChannelParams) -> SymbolVector:
    """Flatten, MLP-encode and power-normalise one feature tensor."""
    if features.size != params.n_symbols:
        raise ValueError(f"feature count {features.size} != configured symbol count {params.n_symbols}")
    y, _ = chanenc_forward(params, features.data.reshape(1, -1))
    out = SymbolVector(y[0], features.source_shape)
    assert abs(out.power - 1.0) <= 1e-6
    return out


def transmit(symbols: SymbolVector, config: ChannelConfig,
             rng: np.random.Generator | None = None) -> SymbolVector:
    """One channel realisation; bitwise reproducible for a given seed."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    y = transmit_batch(symbols.symbols[None], config, rng)
    return SymbolVector(y[0], symbols.source_shape)


def channel_decode(symbols: SymbolVector, params: ChannelParams) -> FeatureTensor:
    """MLP-decode received symbols back into a feature tensor."""
    if symbols.symbols.size != params.n_symbols:
        raise ValueError(f"symbol count {symbols.symbols.size} != configured {params.n_symbols}")
    fhat, _ = chandec_forward(params, symbols.symbols[None])
    return FeatureTensor(fhat[0].reshape(params.feature_shape), symbols.source_shape)


# ---------------------------------------------------------------------------
# mutual information (Donsker-Varadhan lower bound)
# ---------------------------------------------------------------------------

def init_mi_params(dim_x: int, dim_y: int, hidden: int = 64, seed: int = 0) -> MIEstimatorParams:
    rng = np.random.default_rng(seed)
    d = dim_x + dim_y
    params = {
        "t_w1": nn.he_normal(rng, (d, hidden), d),
        "t_b1": np.zeros(hidden),
        "t_w2": nn.glorot_normal(rng, (hidden, 1), hidden, 1),
        "t_b2": np.zeros(1),
    }
    return MIEstimatorParams(params, hidden=hidden)


def _t_forward(p: nn.Params, xy: np.ndarray):
    h_pre, ac1 = nn.affine_forward(xy, p["t_w1"], p["t_b1"])
    h, rc = nn.relu_forward(h_pre)
    t, ac2 = nn.affine_forward(h, p["t_w2"], p["t_b2"])
    return t[:, 0], (ac1, rc, ac2)


def _t_backward(p: nn.Params, cache, dt):
    ac1, rc, ac2 = cache
    dh, dw2, db2 = nn.affine_backward(dt[:, None], ac2)
    dh_pre = nn.relu_backward(dh, rc)
    dxy, dw1, db1 = nn.affine_backward(dh_pre, ac1)
    return dxy, {"t_w1": dw1, "t_b1": db1, "t_w2": dw2, "t_b2": db2}


def dv_bound_forward(mp: MIEstimatorParams, x: np.ndarray, y: np.ndarray, perm: np.ndarray):
    """DV bound on a batch: mean T(joint) - log mean exp T(shuffled)."""
    b = x.shape[0]
    t_j, cache_j = _t_forward(mp.params, np.concatenate([x, y], axis=1))
    t_m, cache_m = _t_forward(mp.params, np.concatenate([x, y[perm]], axis=1))
    tmax = t_m.max()
    lse = tmax + np.log(np.mean(np.exp(t_m - tmax)))
    bound = float(t_j.mean() - lse)
    softmax_m = np.exp(t_m - tmax)
    softmax_m /= softmax_m.sum()
    return bound, (cache_j, cache_m, b, softmax_m, perm, x.shape[1])


def dv_bound_backward(mp: MIEstimatorParams, cache):
    """Gradients of the bound w.r.t. the statistics net and both inputs."""
    cache_j, cache_m, b, softmax_m, perm, dim_x = cache
    dxy_j, grads_j = _t_backward(mp.params, cache_j, np.full(b, 1.0 / b))
    dxy_m, grads_m = _t_backward(mp.params, cache_m, -softmax_m)
    grads = {k: grads_j[k] + grads_m[k] for k in grads_j}
    dx = dxy_j[:, :dim_x] + dxy_m[:, :dim_x]
    dy = dxy_j[:, dim_x:]
    np.add.at(dy, perm, dxy_m[:, dim_x:])
    return grads, dx, dy


def estimate_mi(x: np.ndarray, y: np.ndarray, params: MIEstimatorParams | None = None,
                steps: int = 500, batch: int = 256, lr: float = 1e-3, seed: int = 0,
                return_trace: bool = False):
    """Lower-bound the mutual information between paired samples.

    Runs ``steps`` maximisation updates of the statistics network on
    minibatches, then evaluates the bound on the full sample set.  The
    result is a lower bound on the true MI up to estimation error.

    Parameters
    ----------
    x, y : ndarray
        Paired samples, ``(n, d)`` or ``(n,)``, equal ``n >= 64``.
    params : MIEstimatorParams, optional
        Initial statistics network; trained on a copy.
    return_trace : bool
        Also return the periodic full-set bound evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch sizes differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 64:
        raise ValueError(f"need at least 64 samples, got {x.shape[0]}")
    n = x.shape[0]
    mp = (params.copy() if params is not None
          else init_mi_params(x.shape[1], y.shape[1], seed=seed))
    rng = np.random.default_rng(seed)
    opt = nn.Adam(mp.params, lr=lr)
    eval_perm = rng.permutation(n)
    batch = min(batch, n)

    def full_bound():
        bound, _ = dv_bound_forward(mp, x, y, eval_perm)
        return bound

    trace = []
    eval_every = max(1, steps // 20)
    for step in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        perm = rng.permutation(batch)
        bound, cache = dv_bound_forward(mp, x[idx], y[idx], perm)
        if not np.isfinite(bound):
            raise ArithmeticError("mutual-information bound became non-finite "
                                  "(exp overflow); reduce the learning rate")
        grads, _, _ = dv_bound_backward(mp, cache)
        opt.step({k: -g for k, g in grads.items()})  # ascend the bound
        if (step + 1) % eval_every == 0:
            trace.append(full_bound())
    final = full_bound()
    if not np.isfinite(final):
        raise ArithmeticError("mutual-information bound became non-finite "
                              "(exp overflow); reduce the learning rate")
    return (final, trace) if return_trace else final
