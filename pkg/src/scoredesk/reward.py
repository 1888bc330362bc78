"""Differentiable rewards evaluated through the posterior-mean denoiser.

A reward r(y, x0) scores clean points. During distillation it is always
evaluated at the denoised estimate x0_hat(x_t) from the conditional
prior's Tweedie map, and objectives need its gradient with respect to
the noisy point:

    grad_xt r(y, x0_hat(x_t)) = J_tweedie(x_t)^T grad_x0 r(y, x0_hat)

The Jacobian of that vector field (needed by the score-matching family)
adds a curvature term from the Tweedie map itself, which brings in the
third derivative tensor of the diffused prior's log density:

    d/dx [J_tw^T g] = (sigma^2/alpha) * T . g + J_tw^T H_r J_tw

with T the third-derivative tensor and H_r the reward Hessian in
x0-space (constant for both reward kinds here).
"""

from __future__ import annotations

import numpy as np

from .prior import GaussianMixture, diffused_stats
from .schedule import NoiseSchedule

REWARD_KINDS = ("quadratic", "inner_product")


class RewardModel:
    """Per-prompt reward over clean points.

    quadratic: r = -0.5 * scale * ||x0 - target_y||^2
    inner_product: r = (F x0) . h_y with F full row rank.

    ``targets``/``feats`` map prompt names to vectors; a ``None`` key acts
    as the fallback for prompts not listed.
    """

    def __init__(self, kind, *, targets=None, scale=1.0, matrix=None, feats=None):
        if kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {kind!r}")
        self.kind = kind
        self.scale = float(scale)
        if kind == "quadratic":
            if not targets:
                raise ValueError("quadratic reward needs targets")
            self.targets = {k: np.asarray(v, dtype=float)
                            for k, v in targets.items()}
            self.matrix = None
            self.feats = None
        else:
            self.matrix = np.asarray(matrix, dtype=float)
            if self.matrix.ndim != 2:
                raise ValueError("inner_product reward needs a 2-D matrix")
            if np.linalg.matrix_rank(self.matrix) < self.matrix.shape[0]:
                raise ValueError("inner_product matrix must have full row rank")
            if not feats:
                raise ValueError("inner_product reward needs per-prompt feats")
            self.feats = {k: np.asarray(v, dtype=float) for k, v in feats.items()}
            self.targets = None

    def _lookup(self, table, y):
        if y in table:
            return table[y]
        if None in table:
            return table[None]
        raise ValueError(f"reward has no entry for prompt {y!r}")

    def value(self, y, x0):
        x0 = np.asarray(x0, dtype=float)
        if self.kind == "quadratic":
            tgt = self._lookup(self.targets, y)
            return -0.5 * self.scale * np.sum((x0 - tgt) ** 2, axis=-1)
        h = self._lookup(self.feats, y)
        return self.scale * np.einsum("...i,i->...", x0 @ self.matrix.T, h)

    def grad_x0(self, y, x0):
        x0 = np.asarray(x0, dtype=float)
        if self.kind == "quadratic":
            return -self.scale * (x0 - self._lookup(self.targets, y))
        h = self._lookup(self.feats, y)
        g = self.scale * (self.matrix.T @ h)
        return np.broadcast_to(g, x0.shape).copy()

    def hess_x0(self, y, dim):
        if self.kind == "quadratic":
            return -self.scale * np.eye(dim)
        return np.zeros((dim, dim))


def reward_score_xt(model: RewardModel, y, mix0: GaussianMixture,
                    sched: NoiseSchedule, t: float, x_t):
    """Gradient of r(y, x0_hat(x_t)) with respect to x_t."""
    x0_hat, jac = mix0.tweedie(sched, t, x_t)
    g = model.grad_x0(y, x0_hat)
    return np.einsum("...li,...l->...i", jac, g)


def reward_score_jacobian(model: RewardModel, y, mix0: GaussianMixture,
                          sched: NoiseSchedule, t: float, x_t):
    """Jacobian (= Hessian of the scalar field) of reward_score_xt."""
    a, s = sched.alpha_sigma(float(t))
    mix_t = mix0.diffuse(sched, t)
    stats = mix_t._stats(x_t, want_jac=True, want_third=True)
    x_t = np.asarray(x_t, dtype=float)
    x0_hat = (x_t + s**2 * stats["score"]) / a
    jac_tw = (np.eye(mix0.dim) + s**2 * stats["jac"]) / a
    g = model.grad_x0(y, x0_hat)
    curv = (s**2 / a) * np.einsum("...lij,...l->...ij", stats["third"], g)
    hess_r = model.hess_x0(y, mix0.dim)
    return curv + np.einsum("...li,lm,...mj->...ij", jac_tw, hess_r, jac_tw)


def er_log_density(model: RewardModel, y, mix0: GaussianMixture,
                   sched: NoiseSchedule, t: float, x_t):
    """Unnormalized reward-tilt log density: r(y, x0_hat(x_t))."""
    x0_hat, _ = mix0.tweedie(sched, t, x_t)
    return model.value(y, x0_hat)


def reward_stats_batch(model: RewardModel, y, mix0: GaussianMixture,
                       alpha, sigma, x, want_jac=False):
    """Batched reward field at per-sample times; see reward_score_xt.

    alpha, sigma: (B,); x: (B, d). Returns dict with "value", "score",
    and optionally "jac".
    """
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    x = np.asarray(x, dtype=float)
    stats = diffused_stats(mix0, alpha, sigma, x,
                           want_jac=True, want_third=want_jac)
    x0_hat = (x + sigma[:, None] ** 2 * stats["score"]) / alpha[:, None]
    jac_tw = (
        np.eye(mix0.dim) + sigma[:, None, None] ** 2 * stats["jac"]
    ) / alpha[:, None, None]
    g = model.grad_x0(y, x0_hat)
    out = {
        "value": model.value(y, x0_hat),
        "score": np.einsum("bli,bl->bi", jac_tw, g),
    }
    if want_jac:
        curv = (sigma**2 / alpha)[:, None, None] * np.einsum(
            "blij,bl->bij", stats["third"], g
        )
        hess_r = model.hess_x0(y, mix0.dim)
        out["jac"] = curv + np.einsum("bli,lm,bmj->bij", jac_tw, hess_r, jac_tw)
    return out
