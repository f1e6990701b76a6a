"""Parameter initialization helpers and the training optimizer."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def he_normal(rng, shape, fan_in, gain=1.0):
    return Tensor(rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in),
                  requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def conv3x3_init(rng, c_out, c_in, gain=1.0):
    return he_normal(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9, gain=gain)


def linear_init(rng, out_dim, in_dim, gain=1.0):
    return he_normal(rng, (out_dim, in_dim), fan_in=in_dim, gain=gain)


class AdamW:
    """Adaptive moments with decoupled weight decay, fixed parameter order."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.names = sorted(params)
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def zero_grads(self):
        for name in self.names:
            self.params[name].grad = None
