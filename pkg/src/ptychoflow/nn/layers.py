"""Layers with hand-written backward passes.

Activations are NHWC internally; each layer caches what its backward
needs during ``forward`` and writes parameter gradients into ``grads``.
"""

from __future__ import annotations

import numpy as np


class StateError(RuntimeError):
    """backward() called without a matching forward()."""


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding; weight layout (3, 3, cin, cout)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        std = np.sqrt(2.0 / (9 * cin))
        self.params["w"] = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        b, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=-1)
        cols = cols.reshape(b * h * w, 9 * c)
        wmat = self.params["w"].reshape(9 * c, -1)
        out = cols @ wmat
        out += self.params["b"]
        if keep:
            self._cache = (cols, x.shape)
        return out.reshape(b, h, w, -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, (b, h, w, c) = self._take_cache()
        d2 = dout.reshape(b * h * w, -1)
        self.grads["w"] += (cols.T @ d2).reshape(self.params["w"].shape)
        self.grads["b"] += d2.sum(axis=0)
        dcols = (d2 @ self.params["w"].reshape(9 * c, -1).T).reshape(b, h, w, 9, c)
        dxp = np.zeros((b, h + 2, w + 2, c), dtype=dout.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
        return dxp[:, 1:-1, 1:-1, :]


class Conv1x1(Layer):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        super().__init__()
        std = 0.0 if zero else np.sqrt(1.0 / cin)
        self.params["w"] = (rng.standard_normal((cin, cout)) * std).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        out = x @ self.params["w"] + self.params["b"]
        if keep:
            self._cache = x
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        c = x.shape[-1]
        self.grads["w"] += x.reshape(-1, c).T @ dout.reshape(-1, dout.shape[-1])
        self.grads["b"] += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dout @ self.params["w"].T


class ReLU(Layer):
    def forward(self, x, keep: bool = True):
        mask = x > 0
        if keep:
            self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self._take_cache(), dout, 0).astype(dout.dtype, copy=False)


class MaxPool2(Layer):
    """2x2 max pool; the gradient goes to the first maximal element of each window."""

    def forward(self, x, keep: bool = True):
        b, h, w, c = x.shape
        win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
        arg = win.argmax(axis=-1)
        if keep:
            self._cache = (arg, x.shape)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        arg, (b, h, w, c) = self._take_cache()
        dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
        return dwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 fan-out."""

    def forward(self, x, keep: bool = True):
        b, h, w, c = x.shape
        if keep:
            self._cache = True
        return np.broadcast_to(x[:, :, None, :, None, :], (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)

    def backward(self, dout):
        self._take_cache()
        b, h2, w2, c = dout.shape
        return dout.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class ScaledTanh(Layer):
    """y = pi * tanh(x), mapping onto (-pi, pi).

    Saturated outputs are clipped to the largest value below pi in the
    working dtype, since rounding pi * 1.0 to float32 lands above pi.
    """

    def forward(self, x, keep: bool = True):
        t = np.tanh(x)
        if keep:
            self._cache = t
        bound = np.nextafter(x.dtype.type(np.pi), x.dtype.type(0))
        return np.clip(np.pi * t, -bound, bound).astype(x.dtype, copy=False)

    def backward(self, dout):
        t = self._take_cache()
        return (dout * (np.pi * (1 - t * t))).astype(dout.dtype, copy=False)
