"""Particle and small-MLP generators with linear view maps.

A generator owns the trainable parameter vector theta. Rendering applies
an orthogonal view transform to one output of the generator and yields
both the rendered point and a pullback closure that maps x-space
cotangents back to theta-space gradients. All objective modules emit
x-space cotangents; this is the only place they get chained into theta.

``particles``: theta is N stacked dim-vectors, one independent particle
per slot; rendering picks one slot.

``mlp_map``: theta flattens a 2-layer tanh map from (latent, one-hot
conditioning) to R^dim; the selector is a latent vector and the pullback
is a hand-written backward pass (finite-difference checked in the tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prior import GaussianMixture, isotropic_stats
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ViewTransform:
    """Orthogonal map plus offset applied to generator outputs.

    ``prompt`` names the conditional prior this view renders against.
    """

    prompt: str
    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        o = np.asarray(self.offset, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("view matrix must be square")
        if np.max(np.abs(m.T @ m - np.eye(m.shape[0]))) > 1e-10:
            raise ValueError(f"view {self.prompt!r} matrix is not orthogonal")
        if o.shape != (m.shape[0],):
            raise ValueError("view offset has wrong shape")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", o)

    @classmethod
    def identity(cls, prompt: str, dim: int):
        return cls(prompt, np.eye(dim), np.zeros(dim))

    @classmethod
    def rotation2d(cls, prompt: str, angle: float, offset=(0.0, 0.0)):
        c, s = np.cos(angle), np.sin(angle)
        return cls(prompt, np.array([[c, -s], [s, c]]), np.asarray(offset, float))


def _mlp_shapes(latent_dim, n_views, hidden, dim):
    in_dim = latent_dim + n_views
    return [(hidden, in_dim), (hidden,), (dim, hidden), (dim,)]


def _unpack(theta, shapes):
    out, i = [], 0
    for sh in shapes:
        n = int(np.prod(sh))
        out.append(theta[i:i + n].reshape(sh))
        i += n
    return out


@dataclass
class GeneratorState:
    """Trainable generator parameters plus static architecture info."""

    kind: str
    theta: np.ndarray
    n_particles: int
    dim: int
    latent_dim: int = 0
    n_views: int = 1
    hidden: int = 32

    @classmethod
    def particles_init(cls, n_particles, dim, init_mean=0.0, init_std=0.5,
                       rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        init_mean = np.asarray(init_mean, dtype=float)
        theta = (init_mean + init_std * rng.standard_normal((n_particles, dim)))
        return cls("particles", theta.ravel(), n_particles, dim)

    @classmethod
    def mlp_init(cls, latent_dim, n_views, hidden, dim, rng, scale=0.5):
        shapes = _mlp_shapes(latent_dim, n_views, hidden, dim)
        parts = []
        for sh in shapes:
            if len(sh) == 2:
                parts.append(scale / np.sqrt(sh[1]) * rng.standard_normal(sh).ravel())
            else:
                parts.append(np.zeros(sh))
        return cls("mlp_map", np.concatenate(parts), 0, dim,
                   latent_dim=latent_dim, n_views=n_views, hidden=hidden)

    @property
    def particles(self):
        if self.kind != "particles":
            raise ValueError("particles only defined for the particle generator")
        return self.theta.reshape(self.n_particles, self.dim)

    def copy(self):
        return GeneratorState(self.kind, self.theta.copy(), self.n_particles,
                              self.dim, self.latent_dim, self.n_views, self.hidden)

    def _mlp_forward(self, view_index, latent):
        shapes = _mlp_shapes(self.latent_dim, self.n_views, self.hidden, self.dim)
        w1, b1, w2, b2 = _unpack(self.theta, shapes)
        onehot = np.zeros(self.n_views)
        onehot[view_index] = 1.0
        inp = np.concatenate([latent, onehot])
        pre = w1 @ inp + b1
        h = np.tanh(pre)
        out = w2 @ h + b2
        return out, (inp, h, w1, w2)


def render(state: GeneratorState, view: ViewTransform, selector, view_index=0):
    """Render one generator output through a view.

    Args:
        state: generator parameters.
        view: orthogonal view transform.
        selector: particle index (int) for ``particles``, latent vector
            for ``mlp_map``.
        view_index: position of the view in the experiment's view list
            (feeds the mlp conditioning one-hot).

    Returns:
        (x0, pullback) where x0 = view.matrix @ g(theta) + view.offset and
        pullback maps an x-space cotangent to a theta-shaped gradient.
    """
    r = view.matrix
    if state.kind == "particles":
        i = int(selector)
        if not 0 <= i < state.n_particles:
            raise ValueError(f"particle selector {i} out of range")
        x0 = r @ state.particles[i] + view.offset

        def pullback(cot):
            g = np.zeros((state.n_particles, state.dim))
            g[i] = r.T @ np.asarray(cot, dtype=float)
            return g.ravel()

        return x0, pullback

    out, (inp, h, w1, w2) = state._mlp_forward(view_index, np.asarray(selector, float))
    x0 = r @ out + view.offset

    def pullback(cot):
        dout = r.T @ np.asarray(cot, dtype=float)
        dw2 = np.outer(dout, h)
        db2 = dout
        dh = w2.T @ dout
        dpre = dh * (1.0 - h**2)
        dw1 = np.outer(dpre, inp)
        db1 = dpre
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    return x0, pullback


def perturb(x0, sched: NoiseSchedule, t: float, eps):
    """Forward-perturb a rendered point: x_t = alpha x0 + sigma eps.

    Also returns the conditional score of the perturbation kernel at x_t,
    grad_x log q_t(x_t | x0) = -eps / sigma_t, which several objectives
    consume as the regression target.
    """
    a, s = sched.alpha_sigma(float(t))
    eps = np.asarray(eps, dtype=float)
    return a * np.asarray(x0, dtype=float) + s * eps, -eps / s


def diffused_particle_mixture(state: GeneratorState, view: ViewTransform,
                              sched: NoiseSchedule, t: float) -> GaussianMixture:
    """The generator's exact noisy marginal under one view at time t.

    The particle cloud is an equal-weight mixture of point masses, so its
    diffusion is an equal-weight isotropic mixture: components
    N(alpha_t (R p_i + b), sigma_t^2 I).
    """
    a, s = sched.alpha_sigma(float(t))
    pts = state.particles @ view.matrix.T + view.offset
    w = np.full(state.n_particles, 1.0 / state.n_particles)
    return GaussianMixture(w, a * pts, s**2)


def empirical_noisy_score(state: GeneratorState, view: ViewTransform,
                          sched: NoiseSchedule, t: float, x):
    """Exact score of the diffused particle cloud, via the mixture path."""
    return diffused_particle_mixture(state, view, sched, t).score(x)


def particle_noisy_stats(state: GeneratorState, view: ViewTransform,
                         alpha, sigma, x, want_jac=False):
    """Vectorized per-sample-time version of empirical_noisy_score.

    alpha, sigma, x are batched (B,), (B,), (B, d); returns the stats dict
    from prior.isotropic_stats. Agreement with empirical_noisy_score is a
    tested invariant.
    """
    pts = state.particles @ view.matrix.T + view.offset
    alpha = np.asarray(alpha, dtype=float)
    means_t = alpha[..., None, None] * pts
    return isotropic_stats(means_t, np.asarray(sigma, float) ** 2, x,
                           want_jac=want_jac)
