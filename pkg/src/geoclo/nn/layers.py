"""Parameterized layers built on :mod:`geoclo.nn.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Module", "Dense", "Conv2d", "ConvTranspose2d", "LSTM"]


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Module:
    """Holds named :class:`Tensor` parameters and child modules."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        out.update(v.parameters(f"{prefix}{name}.{i}."))
        return out

    def bind(self, tensors: dict[str, Tensor]) -> None:
        """Replace parameters by name (as keyed by :meth:`parameters`)."""
        for key, val in tensors.items():
            *path, leaf = key.split(".")
            obj = self
            for part in path:
                obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
            if not isinstance(getattr(obj, leaf, None), Tensor):
                raise KeyError(f"no parameter {key!r}")
            setattr(obj, leaf, val)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = _uniform(rng, n_in, (n_in, n_out))
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.add(T.matmul(x, self.W), self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.W = _uniform(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel))
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return T.conv2d(x, self.W, self.b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, output_padding: int = 0):
        self.W = _uniform(rng, c_in * kernel * kernel, (c_in, c_out, kernel, kernel))
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def __call__(self, y) -> Tensor:
        return T.conv_transpose2d(y, self.W, self.b, self.stride, self.padding,
                                  self.output_padding)


class LSTM(Module):
    """Single-layer LSTM with forget gate; gate order is input, forget, cell, output."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.Wx = _uniform(rng, n_in, (n_in, 4 * n_hidden))
        self.Wh = _uniform(rng, n_hidden, (n_hidden, 4 * n_hidden))
        b = np.zeros(4 * n_hidden)
        b[n_hidden:2 * n_hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def cell(self, x, h, c, xw=None):
        """One step. ``xw`` may carry a precomputed ``x @ Wx``."""
        H = self.n_hidden
        z = T.add(T.matmul(x, self.Wx) if xw is None else xw, T.matmul(h, self.Wh))
        z = T.add(z, self.b)
        i = T.sigmoid(z[:, :H])
        f = T.sigmoid(z[:, H:2 * H])
        g = T.tanh(z[:, 2 * H:3 * H])
        o = T.sigmoid(z[:, 3 * H:])
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, c

    def __call__(self, xs, h0=None, c0=None) -> Tensor:
        """Run over ``xs`` (B, T, D); returns hidden states (B, T, H)."""
        xs = T.as_tensor(xs)
        if xs.ndim != 3:
            raise T.ShapeError(f"LSTM expects (batch, time, features), got {xs.shape}")
        B, n_t, D = xs.shape
        H = self.n_hidden
        h = T.Tensor(np.zeros((B, H))) if h0 is None else T.as_tensor(h0)
        c = T.Tensor(np.zeros((B, H))) if c0 is None else T.as_tensor(c0)
        xw = T.reshape(T.matmul(T.reshape(xs, (B * n_t, D)), self.Wx), (B, n_t, 4 * H))
        hs = []
        for t in range(n_t):
            h, c = self.cell(None, h, c, xw=xw[:, t, :])
            hs.append(T.reshape(h, (B, 1, H)))
        return T.concat(hs, axis=1)
