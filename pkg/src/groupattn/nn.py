"""Parameterized layers and the AdamW optimizer built on the tensor engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["Linear", "LayerNorm", "dropout", "AdamW"]


class Linear:
    """Affine map on the trailing axis; init uniform within 1/sqrt(fan_in).

    ``fan_in`` may be overridden when this linear is one half of a split
    weight matrix (the effective fan-in is the unsplit width).
    """

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, bias=True,
                 fan_in=None):
        bound = 1.0 / np.sqrt(fan_in or in_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)),
                        requires_grad=True, dtype=dtype)
        self.b = None
        if bias:
            self.b = Tensor(rng.uniform(-bound, bound, size=(out_dim,)),
                            requires_grad=True, dtype=dtype)

    def __call__(self, x):
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, self.in_dim)) if x.ndim != 2 else x
        y = ad.affine(flat, self.W, self.b)
        if x.ndim != 2:
            y = ad.reshape(y, lead + (self.out_dim,))
        return y

    def params(self, prefix):
        out = {f"{prefix}.W": self.W}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class LayerNorm:
    """Standardize the trailing axis, then learnable gain and bias."""

    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def params(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(size=x.shape, dtype=np.float32) >= p).astype(x.data.dtype)
    keep /= x.data.dtype.type(1.0 - p)
    return ad.mul(x, Tensor(keep))


class AdamW:
    """Decoupled weight-decay Adam over a named parameter dict.

    ``lr_map`` may override the base learning rate per parameter name
    (used to fine-tune the backbone at a lower rate than the head).
    """

    def __init__(self, params, lr=1e-3, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8, lr_map=None):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_map = dict(lr_map or {})
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            lr = self.lr_map.get(name, self.lr)
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.m:
            if k in state["m"]:
                self.m[k] = np.asarray(state["m"][k]).astype(self.m[k].dtype)
                self.v[k] = np.asarray(state["v"][k]).astype(self.v[k].dtype)
