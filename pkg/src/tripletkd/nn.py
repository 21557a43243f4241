"""Minimal numpy neural-net kernels with explicit backward passes.

Layout is NHWC. Forward functions return (output, cache); backward functions
take the upstream gradient plus the cache and return input/parameter
gradients. Everything is a pure function of its arguments, so eval-mode
inference is safe to run concurrently on shared parameter dicts.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3-style same-padding convolution, stride 1.

    x: (N, H, W, Cin); w: (kh, kw, Cin, Cout) with odd kh, kw; b: (Cout,).
    """
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (N, H, W, Cin, kh, kw) -> (N*H*W, kh*kw*Cin), kernel-major to match w
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * wd, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout) + b
    return y.reshape(n, h, wd, cout), (cols, x.shape, w.shape)


def conv2d_backward(dy: np.ndarray, w: np.ndarray, cache):
    cols, x_shape, w_shape = cache
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w_shape
    ph, pw = kh // 2, kw // 2
    dy_flat = dy.reshape(n * h * wd, cout)
    dw = (cols.T @ dy_flat).reshape(w_shape)
    db = dy_flat.sum(axis=0)
    dcols = (dy_flat @ w.reshape(kh * kw * cin, cout).T).reshape(n, h, wd, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * ph, wd + 2 * pw, cin), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, ph : ph + h, pw : pw + wd, :]
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)


def relu_backward(dy: np.ndarray, mask: np.ndarray):
    return dy * mask


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. H and W must be even; ties take the first cell."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    idx, (n, h, w, c) = cache
    dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def global_avg_pool_forward(x: np.ndarray):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dy: np.ndarray, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dy[:, None, None, :] / (h * w), x_shape).astype(dy.dtype)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def dense_backward(dy: np.ndarray, w: np.ndarray, x: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)


class Adam:
    """Adam with externally supplied per-step learning rate.

    Parameters are updated in sorted name order so the arithmetic is
    independent of dict insertion order.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(params[name].dtype)
