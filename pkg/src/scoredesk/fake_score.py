"""Learned score network trained by denoising score matching.

The network parameterizes the score field directly:
s_phi(x_t, c, t) -> R^dim. Inputs are the concatenation of x_t, a
sinusoidal embedding of t, and a one-hot conditioning vector. The
training target for a draw (x0, eps, t) is the conditional score
-eps / sigma_t, weighted by lambda(t):

    loss = E[ lambda(t) || s_phi(alpha_t x0 + sigma_t eps, c, t) + eps/sigma_t ||^2 ]

Forward and backward passes are written out layer by layer (tanh hidden
layers, linear zero-initialized output) so the package has no autodiff
dependency; the backward pass is finite-difference checked by
``grad_check`` and the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .generator import GeneratorState, ViewTransform
from .optim import make_optimizer
from .schedule import NoiseSchedule, TimeWeighting


@dataclass(frozen=True)
class DsmConfig:
    hidden: tuple = (64, 64)
    n_freqs: int = 4
    batch: int = 128
    lr: float = 3e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_kind: str = "sigma_sq"
    updates_per_step: int = 1


class ScoreNet:
    """Small tanh MLP over (x_t, t-embedding, one-hot view)."""

    def __init__(self, dim, n_views, hidden=(64, 64), n_freqs=4,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.n_views = n_views
        self.hidden = tuple(hidden)
        self.n_freqs = n_freqs
        self.in_dim = dim + 2 * n_freqs + n_views
        self.params = {}
        prev = self.in_dim
        for i, h in enumerate(self.hidden):
            self.params[f"w{i}"] = rng.standard_normal((h, prev)) / np.sqrt(prev)
            self.params[f"b{i}"] = np.zeros(h)
            prev = h
        # zero-initialized output layer: the net starts as the zero field
        self.params["w_out"] = np.zeros((dim, prev))
        self.params["b_out"] = np.zeros(dim)

    def features(self, x, c, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = np.atleast_1d(np.asarray(c))
        n = x.shape[0]
        freqs = 2.0 ** np.arange(self.n_freqs)
        ang = 2.0 * np.pi * t[:, None] * freqs[None, :]
        onehot = np.zeros((n, self.n_views))
        onehot[np.arange(n), c.astype(int)] = 1.0
        return np.concatenate([x, np.sin(ang), np.cos(ang), onehot], axis=1)

    def _forward(self, feats):
        acts = [feats]
        h = feats
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.params[f"w{i}"].T + self.params[f"b{i}"])
            acts.append(h)
        out = h @ self.params["w_out"].T + self.params["b_out"]
        return out, acts

    def forward(self, x, c, t):
        """Score field values, (B, dim); accepts single points too."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out, _ = self._forward(self.features(x, c, t))
        return out[0] if single else out

    def _backward(self, acts, dout):
        """Parameter grads and input-feature grads for loss with dL/dout."""
        grads = {"w_out": dout.T @ acts[-1], "b_out": dout.sum(axis=0)}
        dh = dout @ self.params["w_out"]
        for i in reversed(range(len(self.hidden))):
            dpre = dh * (1.0 - acts[i + 1] ** 2)
            grads[f"w{i}"] = dpre.T @ acts[i]
            grads[f"b{i}"] = dpre.sum(axis=0)
            dh = dpre @ self.params[f"w{i}"]
        return grads, dh

    def vjp_x(self, x, c, t, v):
        """d/dx of v . s_phi(x, c, t), batched; the x-slice of the input grad."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        v = np.atleast_2d(np.asarray(v, dtype=float))
        _, acts = self._forward(self.features(x, c, t))
        _, dfeats = self._backward(acts, v)
        dx = dfeats[:, : self.dim]
        return dx[0] if single else dx

    def param_vector(self):
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_param_vector(self, vec):
        i = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = vec[i:i + n].reshape(self.params[k].shape)
            i += n


def dsm_loss_and_grads(net: ScoreNet, x_t, c, t, target, lam):
    """Weighted DSM loss on a batch plus parameter gradients.

    target is the conditional score -eps/sigma; lam is lambda(t), (B,).
    """
    feats = net.features(x_t, c, t)
    out, acts = net._forward(feats)
    res = out - target
    lam = np.asarray(lam, dtype=float)
    loss = float(np.mean(lam * np.sum(res**2, axis=1)))
    dout = (2.0 * lam[:, None] * res) / res.shape[0]
    grads, _ = net._backward(acts, dout)
    return loss, grads


class DsmTrainer:
    """Owns the optimizer state for score-network training."""

    def __init__(self, net: ScoreNet, cfg: DsmConfig):
        self.net = net
        self.cfg = cfg
        self.opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.beta1,
                                  cfg.beta2, cfg.adam_eps)
        self.weighting = TimeWeighting(cfg.lambda_kind)

    def draw_batch(self, state: GeneratorState, views, sched: NoiseSchedule,
                   rng: np.random.Generator):
        b = self.cfg.batch
        view_idx = rng.integers(len(views), size=b)
        if state.kind == "particles":
            sel = rng.integers(state.n_particles, size=b)
            x0 = np.empty((b, state.dim))
            for vi in range(len(views)):
                mask = view_idx == vi
                if not np.any(mask):
                    continue
                v = views[vi]
                x0[mask] = state.particles[sel[mask]] @ v.matrix.T + v.offset
        else:
            from .generator import render
            lat = rng.standard_normal((b, state.latent_dim))
            x0 = np.empty((b, state.dim))
            for j in range(b):
                x0[j], _ = render(state, views[view_idx[j]], lat[j],
                                  view_index=int(view_idx[j]))
        t = rng.uniform(sched.t_min, sched.t_max, b)
        eps = rng.standard_normal((b, state.dim))
        a, s = sched.alpha_sigma(t)
        x_t = a[:, None] * x0 + s[:, None] * eps
        target = -eps / s[:, None]
        return x_t, view_idx, t, target

    def update(self, state: GeneratorState, views, sched: NoiseSchedule,
               rng: np.random.Generator, n_updates=None, lr_schedule=None):
        """Run DSM updates; returns the last minibatch loss.

        lr_schedule, if given, maps the within-call step index to a learning
        rate (e.g. a cosine ramp for one-shot fits at frozen theta).
        """
        n = self.cfg.updates_per_step if n_updates is None else n_updates
        loss = float("nan")
        for i in range(n):
            if lr_schedule is not None:
                self.opt.lr = float(lr_schedule(i))
            x_t, c, t, target = self.draw_batch(state, views, sched, rng)
            lam = self.weighting.weight(sched, t)
            loss, grads = dsm_loss_and_grads(self.net, x_t, c, t, target, lam)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite DSM loss at t range [{t.min():.4f}, "
                    f"{t.max():.4f}], sigma range "
                    f"[{sched.sigma(t.min()):.4g}, {sched.sigma(t.max()):.4g}]"
                )
            self.opt.step(self.net.params, grads)
        return loss


def grad_check(net: ScoreNet, state: GeneratorState, views,
               sched: NoiseSchedule, rng: np.random.Generator,
               n_checks=200, h=1e-4):
    """Finite-difference check of the DSM backward pass.

    Compares analytic parameter gradients against central differences on
    up to n_checks randomly chosen parameters of a fixed batch; returns
    the relative error over that coordinate set.
    """
    cfg = DsmConfig(batch=16)
    trainer = DsmTrainer(net, cfg)
    x_t, c, t, target = trainer.draw_batch(state, views, sched, rng)
    lam = trainer.weighting.weight(sched, t)
    _, grads = dsm_loss_and_grads(net, x_t, c, t, target, lam)
    gvec = np.concatenate([grads[k].ravel() for k in sorted(grads)])
    theta0 = net.param_vector()
    idx = rng.choice(theta0.size, size=min(n_checks, theta0.size), replace=False)

    def loss_at(vec):
        net.set_param_vector(vec)
        feats = net.features(x_t, c, t)
        out, _ = net._forward(feats)
        return float(np.mean(lam * np.sum((out - target) ** 2, axis=1)))

    fd = np.zeros(idx.size)
    for j, i in enumerate(idx):
        e = np.zeros_like(theta0)
        e[i] = h
        fd[j] = (loss_at(theta0 + e) - loss_at(theta0 - e)) / (2 * h)
    net.set_param_vector(theta0)
    an = gvec[idx]
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-12))
