"""Minimal numpy layers with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]`` shared by all layers; a layer
only knows the keys it owns. ``forward`` returns ``(output, cache)`` instead of
stashing state on the layer, so one layer can run on several batches before
any backward pass (the shared extractor sees both domains in one step).
"""

from __future__ import annotations

import logging
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]

LOG_FLOOR = 1e-12


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    name = ""

    def init(self, rng: np.random.Generator) -> Params:
        return {}

    def keys(self) -> list[str]:
        return []

    def forward(self, p: Params, x: np.ndarray, train: bool = False):
        raise NotImplementedError

    def backward(self, p: Params, cache, dy: np.ndarray) -> tuple[np.ndarray, Params]:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int):
        self.name, self.n_in, self.n_out = name, n_in, n_out

    def keys(self):
        return [f"{self.name}.W", f"{self.name}.b"]

    def init(self, rng):
        return {f"{self.name}.W": glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out),
                f"{self.name}.b": np.zeros(self.n_out)}

    def forward(self, p, x, train=False):
        return x @ p[f"{self.name}.W"] + p[f"{self.name}.b"], x

    def backward(self, p, x, dy):
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        grads = {f"{self.name}.W": x2.T @ dy2, f"{self.name}.b": dy2.sum(axis=0)}
        return dy @ p[f"{self.name}.W"].T, grads


class Conv2d(Layer):
    """Stride-1 convolution with zero 'same' padding, NCHW layout."""

    def __init__(self, name: str, c_in: int, c_out: int, k: int = 3):
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.name, self.c_in, self.c_out, self.k = name, c_in, c_out, k

    def keys(self):
        return [f"{self.name}.W", f"{self.name}.b"]

    def init(self, rng):
        k2 = self.k * self.k
        W = glorot(rng, (self.c_in * k2, self.c_out), self.c_in * k2, self.c_out * k2)
        return {f"{self.name}.W": W, f"{self.name}.b": np.zeros(self.c_out)}

    def _cols(self, x):
        # columns ordered (kernel row, kernel col, channel), gathered from one windowed view
        n, c, h, w = x.shape
        k, r = self.k, self.k // 2
        xt = x.transpose(0, 2, 3, 1)
        if r == 0:
            return xt.reshape(n * h * w, c)
        xp = np.zeros((n, h + 2 * r, w + 2 * r, c), x.dtype)
        xp[:, r:r + h, r:r + w] = xt
        view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
        return view.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)

    def forward(self, p, x, train=False):
        n, _, h, w = x.shape
        cols = self._cols(x)
        y = cols @ p[f"{self.name}.W"] + p[f"{self.name}.b"]
        return y.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, p, cache, dy):
        shape, cols = cache
        n, c, h, w = shape
        k, r = self.k, self.k // 2
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        grads = {f"{self.name}.W": cols.T @ dy2, f"{self.name}.b": dy2.sum(axis=0)}
        dcols = dy2 @ p[f"{self.name}.W"].T
        if r == 0:
            return dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2), grads
        dcols = dcols.reshape(n, h, w, k, k, c)
        dxp = np.zeros((n, h + 2 * r, w + 2 * r, c), dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w] += dcols[:, :, :, i, j]
        return dxp[:, r:r + h, r:r + w].transpose(0, 3, 1, 2), grads


class ReLU(Layer):
    def forward(self, p, x, train=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are discarded.

    Ties route the gradient to the first maximal element in row-major order.
    """

    def forward(self, p, x, train=False):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        quads = [x[:, :, di:2 * h2:2, dj:2 * w2:2] for di in (0, 1) for dj in (0, 1)]
        y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        which = np.where(quads[0] == y, 0, np.where(quads[1] == y, 1, np.where(quads[2] == y, 2, 3)))
        return y, (x.shape, which)

    def backward(self, p, cache, dy):
        shape, which = cache
        h2, w2 = which.shape[2:]
        dx = np.zeros(shape, dy.dtype)
        for q, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, di:2 * h2:2, dj:2 * w2:2] = dy * (which == q)
        return dx, {}


class Flatten(Layer):
    def forward(self, p, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) during training.

    The mask generator is passed per call so masks are reproducible per step.
    """

    def __init__(self, rate: float):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, p, x, train=False, rng: np.random.Generator | None = None):
        if not train or self.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("training-mode dropout needs a generator")
        mask = ((rng.random(x.shape) >= self.rate) / (1.0 - self.rate)).astype(x.dtype)
        return x * mask, mask

    def backward(self, p, mask, dy):
        return (dy if mask is None else dy * mask), {}


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LSTM(Layer):
    """Single LSTM layer over (N, T, D) input; returns all hidden states (N, T, H).

    Gates are packed [input, forget, output, candidate]; initial h and c are 0.
    """

    def __init__(self, name: str, n_in: int, hidden: int = 128):
        self.name, self.n_in, self.hidden = name, n_in, hidden

    def keys(self):
        return [f"{self.name}.Wx", f"{self.name}.Wh", f"{self.name}.b"]

    def init(self, rng):
        H = self.hidden
        return {f"{self.name}.Wx": glorot(rng, (self.n_in, 4 * H), self.n_in, 4 * H),
                f"{self.name}.Wh": glorot(rng, (H, 4 * H), H, 4 * H),
                f"{self.name}.b": np.zeros(4 * H)}

    def forward(self, p, x, train=False):
        n, T, _ = x.shape
        H = self.hidden
        Wh = p[f"{self.name}.Wh"]
        # input projection for every step at once, as one 2-D product
        xw = (x.reshape(n * T, -1) @ p[f"{self.name}.Wx"]).reshape(n, T, -1) + p[f"{self.name}.b"]
        dt = xw.dtype
        h = np.zeros((n, H), dt)
        c = np.zeros((n, H), dt)
        hs = np.empty((n, T, H), dt)
        gates = np.empty((n, T, 4 * H), dt)
        cs = np.empty((n, T, H), dt)
        for t in range(T):
            z = xw[:, t] + h @ Wh
            g = np.empty_like(z)
            g[:, :3 * H] = sigmoid(z[:, :3 * H])
            g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
            h = g[:, 2 * H:3 * H] * np.tanh(c)
            gates[:, t], cs[:, t], hs[:, t] = g, c, h
        return hs, (x, gates, cs, hs)

    def backward(self, p, cache, dhs, input_grad: bool = True):
        """BPTT; with ``input_grad=False`` the (unused) input gradient is returned as None."""
        x, gates, cs, hs = cache
        n, T, _ = x.shape
        H = self.hidden
        Wh = p[f"{self.name}.Wh"]
        dt = gates.dtype
        dz_all = np.empty((n, T, 4 * H), dt)
        dh_next = np.zeros((n, H), dt)
        dc_next = np.zeros((n, H), dt)
        for t in reversed(range(T)):
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            c = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else np.zeros((n, H), dt)
            tc = np.tanh(c)
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz = np.empty((n, 4 * H))
            dz[:, :H] = dc * cand * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1 - o)
            dz[:, 3 * H:] = dc * i * (1 - cand * cand)
            dz_all[:, t] = dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((n, 1, H), dt), hs[:, :-1]], axis=1)
        dz2 = dz_all.reshape(-1, 4 * H)
        grads = {f"{self.name}.Wx": x.reshape(-1, self.n_in).T @ dz2,
                 f"{self.name}.Wh": h_prev.reshape(-1, H).T @ dz2,
                 f"{self.name}.b": dz2.sum(axis=0)}
        dx = (dz2 @ p[f"{self.name}.Wx"].T).reshape(n, T, -1) if input_grad else None
        return dx, grads


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def keys(self):
        return [k for layer in self.layers for k in layer.keys()]

    def init(self, rng):
        p: Params = {}
        for layer in self.layers:
            p.update(layer.init(rng))
        return p

    def forward(self, p, x, train=False):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(p, x, train)
            caches.append(cache)
        return x, caches

    def backward(self, p, caches, dy):
        grads: Params = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(p, cache, dy)
            grads.update(g)
        return dy, grads


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    ls = log_softmax(logits)
    loss = -ls[np.arange(n), labels].mean()
    d = np.exp(ls)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def uniform_cross_entropy(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against the uniform distribution, and its logit gradient.

    Per sample this is -sum_d (1/D) log p_d; the gradient is p - 1/D.
    """
    n, D = logits.shape
    ls = log_softmax(logits)
    loss = -ls.mean(axis=1).mean()
    return float(loss), (np.exp(ls) - 1.0 / D) / n


def clamped_log(p: np.ndarray) -> tuple[np.ndarray, bool]:
    p = np.asarray(p, dtype=float)
    clamped = bool(np.any(p <= LOG_FLOOR))
    if clamped:
        log.warning("probability at or below %g clamped before log", LOG_FLOOR)
    return np.log(np.maximum(p, LOG_FLOOR)), clamped


def sgd(params: Params, grads: Params, lr: float, keys: Iterable[str] | None = None) -> None:
    """In-place plain gradient-descent update of ``keys`` (default: all graded keys)."""
    if lr == 0:
        return
    for k in (grads if keys is None else keys):
        if k in grads:
            params[k] -= lr * grads[k]


def all_finite(grads: Params) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())
