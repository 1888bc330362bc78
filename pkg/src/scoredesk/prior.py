"""Gaussian-mixture target densities with exact scores and derivatives.

All density work happens in log space with max-subtraction for stability.
For a mixture p(x) = sum_k w_k N(x; mu_k, Sigma_k) with responsibilities
r_k(x) = softmax_k(log w_k + log N_k(x)) and per-component scores
s_k(x) = -Sigma_k^{-1} (x - mu_k), the derivatives used here are

    score        s(x) = sum_k r_k s_k
    jacobian     J(x) = sum_k r_k (-P_k + s_k s_k^T) - s s^T,   P_k = Sigma_k^{-1}
    third        T_ijl(x) = d J_ij / d x_l
               = sum_k r_k (s_k - s)_l (-P_k + s_k s_k^T)_ij
               - sum_k r_k (P_k,il s_k,j + s_k,i P_k,jl)
               - J_il s_j - s_i J_jl

T is symmetric in all three indices (it is the third derivative of
log p); that symmetry is exercised by the tests rather than assumed by
the code.

Diffusing a mixture under a variance-preserving schedule is closed form:
means scale by alpha_t, covariances become alpha_t^2 Sigma + sigma_t^2 I,
weights are unchanged.
"""

from __future__ import annotations

import math

import numpy as np

from .schedule import NoiseSchedule

_LOG_2PI = math.log(2.0 * math.pi)


def _gm_core(logw, means, prec, logdet, x, want_jac=False, want_third=False):
    """Shared batched mixture math.

    Args:
        logw: (..., K) or (K,) log weights.
        means: (..., K, d) component means.
        prec: (..., K, d, d) component precisions.
        logdet: (..., K) log-determinants of the covariances.
        x: (..., d) evaluation points; leading dims broadcast against the
            mixture parameter arrays.

    Returns:
        dict with "logp" (...,), "score" (..., d), and optionally
        "jac" (..., d, d) and "third" (..., d, d, d).
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    diff = x[..., None, :] - means                       # ..., K, d
    sol = np.einsum("...kij,...kj->...ki", prec, diff)   # P_k (x - mu_k)
    quad = np.einsum("...ki,...ki->...k", diff, sol)
    a = logw - 0.5 * (d * _LOG_2PI + logdet) - 0.5 * quad
    amax = np.max(a, axis=-1, keepdims=True)
    lse = amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=-1))
    r = np.exp(a - lse[..., None])                       # responsibilities
    s_k = -sol
    score = np.einsum("...k,...ki->...i", r, s_k)
    out = {"logp": lse, "score": score, "resp": r}
    if not (want_jac or want_third):
        return out
    jac = (
        -np.einsum("...k,...kij->...ij", r, prec)
        + np.einsum("...k,...ki,...kj->...ij", r, s_k, s_k)
        - score[..., :, None] * score[..., None, :]
    )
    out["jac"] = jac
    if want_third:
        m_k = -prec + s_k[..., :, None] * s_k[..., None, :]
        ds = s_k - score[..., None, :]
        third = (
            np.einsum("...k,...kij,...kl->...ijl", r, m_k, ds)
            - np.einsum("...k,...kil,...kj->...ijl", r, prec, s_k)
            - np.einsum("...k,...ki,...kjl->...ijl", r, s_k, prec)
            - np.einsum("...il,...j->...ijl", jac, score)
            - np.einsum("...i,...jl->...ijl", score, jac)
        )
        out["third"] = third
    return out


def _expand_covs(covs, n_components, dim):
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 0:
        covs = np.tile(covs * np.eye(dim), (n_components, 1, 1))
    elif covs.ndim == 1:
        if covs.shape[0] != n_components:
            raise ValueError("per-component variance vector has wrong length")
        covs = covs[:, None, None] * np.eye(dim)
    elif covs.ndim == 2:
        covs = np.tile(covs, (n_components, 1, 1))
    if covs.shape != (n_components, dim, dim):
        raise ValueError(f"covariances have shape {covs.shape}, "
                         f"expected {(n_components, dim, dim)}")
    return covs


class GaussianMixture:
    """Immutable Gaussian mixture with cached Cholesky/precision factors.

    ``covs`` accepts a scalar (shared isotropic variance), a length-K
    vector of isotropic variances, a single (d, d) matrix shared by all
    components, or the full (K, d, d) stack.
    """

    def __init__(self, weights, means, covs):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if weights.ndim != 1 or weights.shape[0] != means.shape[0]:
            raise ValueError("weights and means disagree on component count")
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
        self.n_components, self.dim = means.shape
        covs = _expand_covs(covs, self.n_components, self.dim)
        if np.max(np.abs(covs - np.swapaxes(covs, -1, -2))) > 1e-10:
            raise ValueError("covariances must be symmetric")
        try:
            self.chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariances must be positive definite") from e
        self.weights = weights
        self.logw = np.log(weights)
        self.means = means
        self.covs = covs
        self.prec = np.linalg.inv(covs)
        self.logdet = 2.0 * np.sum(
            np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)), axis=-1
        )

    def _stats(self, x, want_jac=False, want_third=False):
        return _gm_core(self.logw, self.means, self.prec, self.logdet, x,
                        want_jac=want_jac, want_third=want_third)

    def log_density(self, x):
        return self._stats(x)["logp"]

    def score(self, x):
        """Gradient of log density at x, batched over leading dims of x."""
        return self._stats(x)["score"]

    def responsibilities(self, x):
        """Posterior component probabilities at x, shape (..., K)."""
        return self._stats(x)["resp"]

    def score_jacobian(self, x):
        return self._stats(x, want_jac=True)["jac"]

    def score_third(self, x):
        """Third-derivative tensor of log density, (..., d, d, d)."""
        return self._stats(x, want_third=True)["third"]

    def sample(self, n, rng: np.random.Generator, return_components=False):
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        x = self.means[comps] + np.einsum("nij,nj->ni", self.chol[comps], eps)
        if return_components:
            return x, comps
        return x

    def diffuse(self, sched: NoiseSchedule, t: float) -> "GaussianMixture":
        """Closed-form forward diffusion of the mixture to time t."""
        a, s = sched.alpha_sigma(float(t))
        covs = a**2 * self.covs + s**2 * np.eye(self.dim)
        return GaussianMixture(self.weights, a * self.means, covs)

    def tweedie(self, sched: NoiseSchedule, t: float, x_t):
        """Posterior-mean denoiser treating self as the time-0 density.

        Returns (x0_hat, jac) where x0_hat = (x_t + sigma_t^2 s_t(x_t)) / alpha_t
        and jac = (I + sigma_t^2 ds_t/dx) / alpha_t, batched over leading
        dims of x_t.
        """
        a, s = sched.alpha_sigma(float(t))
        mix_t = self.diffuse(sched, t)
        stats = mix_t._stats(x_t, want_jac=True)
        x_t = np.asarray(x_t, dtype=float)
        x0_hat = (x_t + s**2 * stats["score"]) / a
        jac = (np.eye(self.dim) + s**2 * stats["jac"]) / a
        return x0_hat, jac

    def mean_cov(self):
        m = self.weights @ self.means
        second = np.einsum(
            "k,kij->ij",
            self.weights,
            self.covs + self.means[:, :, None] * self.means[:, None, :],
        )
        return m, second - np.outer(m, m)


def diffused_stats(mix: GaussianMixture, alpha, sigma, x,
                   want_jac=False, want_third=False):
    """Mixture statistics at per-sample diffusion times.

    alpha, sigma: (B,) coefficient arrays; x: (B, d) evaluation points.
    Equivalent to looping mix.diffuse(t_b) over the batch but vectorized;
    used in the Monte Carlo and training hot paths.
    """
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    means_t = alpha[:, None, None] * mix.means[None, :, :]
    covs_t = (
        alpha[:, None, None, None] ** 2 * mix.covs[None]
        + sigma[:, None, None, None] ** 2 * np.eye(mix.dim)
    )
    prec_t = np.linalg.inv(covs_t)
    _, logdet_t = np.linalg.slogdet(covs_t)
    return _gm_core(mix.logw, means_t, prec_t, logdet_t, x,
                    want_jac=want_jac, want_third=want_third)


def isotropic_stats(means_t, var, x, want_jac=False):
    """Fast path for equal-weight isotropic mixtures (particle clouds).

    Args:
        means_t: (B, K, d) per-sample component means.
        var: (B,) shared per-sample component variance.
        x: (B, d) evaluation points.

    Returns the same dict layout as _gm_core. Agreement with the general
    path is a tested invariant (<= 1e-12), not an assumption.
    """
    means_t = np.asarray(means_t, dtype=float)
    var = np.asarray(var, dtype=float)
    x = np.asarray(x, dtype=float)
    n_comp, d = means_t.shape[-2], means_t.shape[-1]
    diff = x[..., None, :] - means_t                      # B, K, d
    quad = np.sum(diff**2, axis=-1) / var[..., None]
    a = -0.5 * quad
    amax = np.max(a, axis=-1, keepdims=True)
    lse = amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=-1))
    logp = lse - math.log(n_comp) - 0.5 * d * (_LOG_2PI + np.log(var))
    r = np.exp(a - lse[..., None])
    s_k = -diff / var[..., None, None]
    score = np.einsum("...k,...ki->...i", r, s_k)
    out = {"logp": logp, "score": score}
    if want_jac:
        eye = np.eye(d)
        out["jac"] = (
            -eye / var[..., None, None]
            + np.einsum("...k,...ki,...kj->...ij", r, s_k, s_k)
            - score[..., :, None] * score[..., None, :]
        )
    return out


class PromptBank:
    """Unconditional mixture plus named conditional reweightings of it.

    Every conditional mixture must be a subset-reweighting of the
    unconditional one: each of its components matches an unconditional
    component's mean and covariance, only the weights differ. That keeps
    classifier-free guidance well posed (the two score fields share
    component geometry) and is validated at construction.
    """

    def __init__(self, unconditional: GaussianMixture,
                 conditional: dict[str, GaussianMixture]):
        self.unconditional = unconditional
        self.conditional = dict(conditional)
        for name, mix in self.conditional.items():
            if mix.dim != unconditional.dim:
                raise ValueError(f"conditional {name!r} has dim {mix.dim}, "
                                 f"unconditional has {unconditional.dim}")
            for j in range(mix.n_components):
                matched = any(
                    np.max(np.abs(mix.means[j] - unconditional.means[i])) <= 1e-8
                    and np.max(np.abs(mix.covs[j] - unconditional.covs[i])) <= 1e-8
                    for i in range(unconditional.n_components)
                )
                if not matched:
                    raise ValueError(
                        f"conditional {name!r} component {j} does not match any "
                        "unconditional component; conditionals must be "
                        "subset-reweightings"
                    )

    @classmethod
    def from_subsets(cls, unconditional: GaussianMixture, subsets: dict):
        """Build conditionals from {name: indices} or {name: (indices, weights)}."""
        conditional = {}
        for name, spec in subsets.items():
            if isinstance(spec, tuple):
                idx, w = spec
                w = np.asarray(w, dtype=float)
                w = w / w.sum()
            else:
                idx = spec
                w = unconditional.weights[list(idx)]
                w = w / w.sum()
            idx = list(idx)
            conditional[name] = GaussianMixture(
                w, unconditional.means[idx], unconditional.covs[idx]
            )
        return cls(unconditional, conditional)

    @property
    def prompts(self):
        return list(self.conditional)

    def mixture(self, y) -> GaussianMixture:
        """The time-0 mixture for prompt y; y=None means unconditional."""
        if y is None:
            return self.unconditional
        try:
            return self.conditional[y]
        except KeyError:
            raise ValueError(
                f"unknown prompt {y!r}; have {sorted(self.conditional)}"
            ) from None

    def score(self, y, sched: NoiseSchedule, t: float, x):
        return self.mixture(y).diffuse(sched, t).score(x)

    def cfg_score(self, y, sched: NoiseSchedule, t: float, x, gamma: float):
        """Guided score s_c + gamma * (s_c - s_u) at diffusion time t."""
        s_c = self.score(y, sched, t, x)
        if gamma == 0.0:
            return s_c
        s_u = self.score(None, sched, t, x)
        return s_c + gamma * (s_c - s_u)
