"""Minimal neural-network building blocks on numpy arrays.

Every layer is a pair of pure functions, ``*_forward`` returning
``(output, cache)`` and ``*_backward`` consuming the upstream gradient and
the cache.  Arrays are channels-last: images/batches are ``(N, H, W, C)``,
dense inputs are ``(N, D)``.  All math is float64 so that analytic
gradients can be validated against central finite differences.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def glorot_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def affine_forward(x, w, b):
    return x @ w + b, (x, w)


def affine_backward(dout, cache):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, x


def relu_backward(dout, cache):
    return dout * (cache > 0.0)


def leaky_relu_forward(x, slope: float = 0.1):
    return np.where(x > 0.0, x, slope * x), x


def leaky_relu_backward(dout, cache, slope: float = 0.1):
    return dout * np.where(cache > 0.0, 1.0, slope)


def sigmoid(x):
    # split by sign to avoid exp overflow on large negative inputs
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


# ---------------------------------------------------------------------------
# convolution (stride 1, zero 'same' padding) via im2col
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, pad):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, h, w, kh, kw, c),
        strides=(s[0], s[1], s[2], s[1], s[2], s[3]),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n * h * w, kh * kw * c)


def _col2im(dcols, xshape, kh, kw, pad):
    n, h, w, c = xshape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    dcols = dcols.reshape(n, h, w, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pad:pad + h, pad:pad + w, :]


def conv2d_forward(x, w, b):
    """3x3/7x7/1x1 convolution, stride 1, output spatially equal to input.

    ``x``: (N, H, W, Cin); ``w``: (kh, kw, Cin, Cout); ``b``: (Cout,).
    """
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin}")
    pad = (kh - 1) // 2
    cols = _im2col(x, kh, kw, pad)
    out = cols @ w.reshape(-1, cout) + b
    n, h, ww = x.shape[:3]
    return out.reshape(n, h, ww, cout), (cols, x.shape, w.shape)


def conv2d_backward(dout, cache, w):
    cols, xshape, wshape = cache
    kh, kw, cin, cout = wshape
    pad = (kh - 1) // 2
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(wshape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(-1, cout).T
    dx = _col2im(dcols, xshape, kh, kw, pad)
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2x2 max pooling / 2x nearest upsampling
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: odd spatial dims {(h, w)}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4, c)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, xshape = cache
    n, h, w, c = xshape
    dwin = np.zeros((n, h // 2, w // 2, 4, c))
    np.put_along_axis(dwin, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    return dwin.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


def upsample2_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), x.shape


def upsample2_backward(dout, xshape):
    n, h, w, c = xshape
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# unit average power normalisation (per row)
# ---------------------------------------------------------------------------

class DegenerateSymbolError(ValueError):
    """Raised when a pre-normalisation symbol vector has zero power."""


def power_normalize_forward(x):
    """Scale each row of ``x`` (N, D) to unit mean-square power."""
    p = np.mean(x * x, axis=1, keepdims=True)
    if np.any(p <= 0.0):
        raise DegenerateSymbolError("all-zero symbol vector: power normalisation undefined")
    s = 1.0 / np.sqrt(p)
    return x * s, (x, s)


def power_normalize_backward(dout, cache):
    x, s = cache
    d = x.shape[1]
    inner = np.sum(dout * x, axis=1, keepdims=True)
    return s * dout - (s ** 3 / d) * x * inner


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a dict of named parameter arrays (updates in place)."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Params) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            self.params[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: Params, analytic: Params, step: float = 1e-4,
               keys=None) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` evaluates the scalar loss at the current ``params`` (which
    are perturbed in place and restored).  Returns the worst relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over every element of every checked
    array.
    """
    worst = 0.0
    for key in (keys if keys is not None else sorted(params)):
        arr = params[key]
        ana = analytic[key]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(num), 1e-8)
            worst = max(worst, abs(a - num) / denom)
    return worst
