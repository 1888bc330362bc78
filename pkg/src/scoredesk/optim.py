"""Minimal SGD and Adam over dicts of numpy arrays."""

from __future__ import annotations

import numpy as np


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for k in params:
            params[k] -= self.lr * grads[k]


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g**2
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, lr, beta1=0.9, beta2=0.99, eps=1e-8):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {name!r}")
