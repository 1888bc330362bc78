"""Distillation objectives: KL-family and score-matching-family gradients.

Every objective here returns x-space cotangents, one per drawn sample;
the engine chains them through the generator's render pullback. Nothing
in this module touches theta directly.

KL family (noise-prediction residual form). With eps_hat = -sigma_t *
(guided or plain) prior score at x_t, the per-sample cotangent is
omega(t) * (eps_hat - eps). Classifier-free guidance enters through
eps_hat, and the guided residual decomposes exactly:

    omega * (eps_hat_gamma - eps)
        = (1 + gamma) * omega * (eps_cond - eps) - gamma * omega * (eps_uncond - eps)

which the tests and the verify suite check to near machine precision.
The reward term's cotangent is -lambda * omega(t) * grad_xt r(y, x0_hat),
i.e. ascent on the expected denoised reward.

Score-matching family. The divergence between a target score field s_p
and the generator's own noisy score s_q,

    D = integral w(t) E_{x_t ~ q_t} d(s_p(x_t) - s_q(x_t)) dt,

is differentiated through both the sampling path and the score field.
The field derivative is replaced by the score-projection surrogate
(E[u(x_t)^T (s_q(x_t) + eps/sigma)] = 0 for any probe u), which after
collecting the transport term gives the per-sample cotangent

    cot = -w(t) * alpha_t * [ J_p^T d'(k) + (J_q - J_p)^T H_d(k) b ]

with k = s_fake - s_p, b = s_fake + eps/sigma (the projection residual),
J_* the field Jacobians at x_t, and H_d the Hessian of the distance.
The d'(k) factor keeps the scores-matched configuration a fixed point;
the Hessian term carries the sampling-distribution dependence. Sign and
stop-gradient placement are pinned by a frozen-batch finite-difference
oracle over the directly evaluated divergence, not by derivation alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import (GeneratorState, ViewTransform, particle_noisy_stats,
                        render)
from .prior import GaussianMixture, PromptBank, diffused_stats
from .reward import RewardModel, reward_score_xt, reward_stats_batch
from .schedule import NoiseSchedule, TimeWeighting, sample_t

FAMILIES = ("kl", "sim")
DISTANCES = ("l2_sq", "pseudo_huber")
FAKE_SOURCES = ("analytic", "learned")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Static objective configuration shared by both families.

    ``alpha`` generalizes the (1+gamma, gamma, lambda) combination of the
    conditional, unconditional, and reward blocks; when None the
    gamma/lam form is used. ``lam`` is the reward weight.
    """

    family: str = "kl"
    gamma: float = 0.0
    lam: float = 0.0
    alpha: tuple | None = None
    distance: str = "l2_sq"
    huber_c: float = 1.0
    fake_source: str = "analytic"
    w_kind: str = "constant"
    omega_kind: str = "sigma_sq"
    independent_draws: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown objective family {self.family!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.fake_source not in FAKE_SOURCES:
            raise ValueError(f"unknown fake_source {self.fake_source!r}")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if self.alpha is not None and len(self.alpha) != 3:
            raise ValueError("alpha must have three entries")

    def coefficients(self):
        """(a1, a2, a3) weights for the cond/uncond/reward blocks."""
        if self.alpha is not None:
            return tuple(float(a) for a in self.alpha)
        return (1.0 + self.gamma, self.gamma, self.lam)


# ---------------------------------------------------------------- distances

def distance_value_grad(kind, v, c=1.0):
    """d(v) and d'(v) for a batch of difference vectors v (..., d)."""
    v = np.asarray(v, dtype=float)
    if kind == "l2_sq":
        return np.sum(v**2, axis=-1), 2.0 * v
    if kind == "pseudo_huber":
        s = np.sqrt(1.0 + np.sum(v**2, axis=-1) / c**2)
        return c**2 * (s - 1.0), v / s[..., None]
    raise ValueError(f"unknown distance {kind!r}")


def distance_hessian(kind, v, c=1.0):
    """Hessian of d at v, (..., d, d)."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    if kind == "l2_sq":
        return np.broadcast_to(2.0 * np.eye(d), v.shape + (d,)).copy()
    if kind == "pseudo_huber":
        s = np.sqrt(1.0 + np.sum(v**2, axis=-1) / c**2)
        outer = v[..., :, None] * v[..., None, :]
        return (np.eye(d) / s[..., None, None]
                - outer / (c**2 * s[..., None, None] ** 3))
    raise ValueError(f"unknown distance {kind!r}")


# ------------------------------------------------------------- step samples

@dataclass
class StepSample:
    """One drawn training sample with cached fields at x_t.

    Score caches are filled lazily by make_step_sample according to what
    the objective family needs; Jacobian caches only for the
    score-matching family.
    """

    view_index: int
    selector: object
    t: float
    eps: np.ndarray
    x0: np.ndarray
    x_t: np.ndarray
    alpha: float
    sigma: float
    s_cond: np.ndarray | None = None
    s_uncond: np.ndarray | None = None
    s_fake: np.ndarray | None = None
    s_reward: np.ndarray | None = None
    j_cond: np.ndarray | None = None
    j_uncond: np.ndarray | None = None
    j_fake: np.ndarray | None = None
    j_reward: np.ndarray | None = None
    fake_vjp: object = None  # callable v -> J_fake^T v when fake is learned


def make_step_sample(state: GeneratorState, views, sched: NoiseSchedule,
                     bank: PromptBank, spec: ObjectiveSpec,
                     view_index: int, selector, t: float, eps,
                     reward: RewardModel | None = None, net=None) -> StepSample:
    """Render, perturb, and cache every score the objective will read."""
    view = views[view_index]
    x0, _ = render(state, view, selector, view_index=view_index)
    a, s = sched.alpha_sigma(float(t))
    eps = np.asarray(eps, dtype=float)
    x_t = a * x0 + s * eps
    sample = StepSample(view_index, selector, float(t), eps, x0, x_t,
                        float(a), float(s))
    a1, a2, a3 = spec.coefficients()
    prompt = view.prompt
    want_jac = spec.family == "sim"
    cond_t = bank.mixture(prompt).diffuse(sched, t)
    sample.s_cond = cond_t.score(x_t)
    if want_jac:
        sample.j_cond = cond_t.score_jacobian(x_t)
    if a2 != 0.0:
        unc_t = bank.mixture(None).diffuse(sched, t)
        sample.s_uncond = unc_t.score(x_t)
        if want_jac:
            sample.j_uncond = unc_t.score_jacobian(x_t)
    if a3 != 0.0:
        if reward is None:
            raise ValueError("objective uses a reward block but no reward model "
                             "was provided")
        mix0 = bank.mixture(prompt)
        sample.s_reward = reward_score_xt(reward, prompt, mix0, sched, t, x_t)
        if want_jac:
            from .reward import reward_score_jacobian
            sample.j_reward = reward_score_jacobian(reward, prompt, mix0,
                                                    sched, t, x_t)
    if spec.family == "sim":
        if spec.fake_source == "analytic":
            stats = particle_noisy_stats(state, view, np.array([a]),
                                         np.array([s]), x_t[None],
                                         want_jac=True)
            sample.s_fake = stats["score"][0]
            sample.j_fake = stats["jac"][0]
        else:
            if net is None:
                raise ValueError("fake_source='learned' needs a score net")
            sample.s_fake = net.forward(x_t, view_index, t)
            sample.fake_vjp = lambda v: net.vjp_x(x_t, view_index, t, v)
    return sample


# ------------------------------------------------------------- KL family

def _omega(spec: ObjectiveSpec, sched: NoiseSchedule, t):
    return TimeWeighting(spec.omega_kind).weight(sched, t)


def grad_cdp(sample: StepSample, spec: ObjectiveSpec, sched: NoiseSchedule):
    """Conditional-prior residual cotangent omega * (eps_cond - eps)."""
    om = _omega(spec, sched, sample.t)
    eps_hat = -sample.sigma * sample.s_cond
    return om * (eps_hat - sample.eps)


def grad_udp(sample: StepSample, spec: ObjectiveSpec, sched: NoiseSchedule):
    """Unconditional-prior residual cotangent omega * (eps_uncond - eps)."""
    om = _omega(spec, sched, sample.t)
    eps_hat = -sample.sigma * sample.s_uncond
    return om * (eps_hat - sample.eps)


def grad_sds(sample: StepSample, spec: ObjectiveSpec, sched: NoiseSchedule,
             gamma=None):
    """Guided residual cotangent using the CFG-combined noise prediction."""
    g = spec.gamma if gamma is None else gamma
    om = _omega(spec, sched, sample.t)
    s_cfg = sample.s_cond if g == 0.0 else (
        sample.s_cond + g * (sample.s_cond - sample.s_uncond)
    )
    eps_hat = -sample.sigma * s_cfg
    return om * (eps_hat - sample.eps)


def grad_er_kl(sample: StepSample, spec: ObjectiveSpec, sched: NoiseSchedule):
    """Reward cotangent -lam * omega * grad_xt r: ascent on denoised reward."""
    om = _omega(spec, sched, sample.t)
    return -spec.lam * om * sample.s_reward


def grad_kl_unified(sample: StepSample, spec: ObjectiveSpec,
                    sched: NoiseSchedule):
    """General a1 * cond - a2 * uncond + a3 * reward combination.

    With alpha=None this reduces to (1+gamma, gamma, lam), i.e. the
    guided residual plus reward; the reward weight lam is folded into a3.
    """
    a1, a2, a3 = spec.coefficients()
    om = _omega(spec, sched, sample.t)
    cot = a1 * (om * (-sample.sigma * sample.s_cond - sample.eps))
    if a2 != 0.0:
        cot = cot - a2 * (om * (-sample.sigma * sample.s_uncond - sample.eps))
    if a3 != 0.0:
        cot = cot + a3 * (-om * sample.s_reward)
    return cot


# ---------------------------------------------------- score-matching family

def _sim_block(s_fake, fake_apply, s_tgt, j_tgt, b, w, alpha, spec,
               _sign=1.0):
    """One score-matching block, batched.

    Args:
        s_fake: (B, d) generator score estimate at x_t.
        fake_apply: callable v -> J_fake^T v, (B, d) -> (B, d).
        s_tgt, j_tgt: (B, d), (B, d, d) target field and Jacobian.
        b: (B, d) projection residual s_fake + eps/sigma.
        w: (B,) divergence time weight, alpha: (B,) schedule coefficient.

    Returns:
        (loss (B,), cotangent (B, d)).
    """
    k = s_fake - s_tgt
    _, dgrad = distance_value_grad(spec.distance, k, spec.huber_c)
    hd = distance_hessian(spec.distance, k, spec.huber_c)
    hdb = np.einsum("...ij,...j->...i", hd, b)
    loss = w * np.sum(-dgrad * b, axis=-1)
    jt_dgrad = np.einsum("...li,...l->...i", j_tgt, dgrad)
    jt_hdb = np.einsum("...li,...l->...i", j_tgt, hdb)
    wa = np.asarray(w * alpha, dtype=float)[..., None]
    cot = -wa * (jt_dgrad + fake_apply(hdb) - jt_hdb)
    return loss, _sign * cot


def sim_surrogate(sample: StepSample, target_score, target_jac,
                  spec: ObjectiveSpec, sched: NoiseSchedule, _sign=1.0):
    """Score-matching surrogate for one target field at one sample.

    Returns (loss_contrib, x-space cotangent). The loss is the projection
    surrogate w * (-d'(k)) . (s_fake + eps/sigma); it may be negative and
    is reported for diagnostics only.

    The (t_max - t_min) factor converts the uniform-t sample average into
    the t-integral, so assembled gradients line up with finite
    differences of divergence_on_batch without rescaling.
    """
    w = float(TimeWeighting(spec.w_kind).weight(sched, sample.t))
    w *= sched.t_max - sched.t_min
    b = sample.s_fake + sample.eps / sample.sigma
    if sample.fake_vjp is not None:
        fake_apply = lambda v: sample.fake_vjp(v)
    else:
        j_fake = sample.j_fake
        fake_apply = lambda v: np.einsum("li,l->i", j_fake, v)
    loss, cot = _sim_block(sample.s_fake, fake_apply,
                           np.asarray(target_score, float),
                           np.asarray(target_jac, float), b,
                           w, sample.alpha, spec, _sign=_sign)
    return float(loss), cot


def grad_sim_total(sample: StepSample, spec: ObjectiveSpec,
                   sched: NoiseSchedule, _sign=1.0):
    """Combined score-matching cotangent a1*cond - a2*uncond + a3*reward.

    All blocks share the sample's single (t, eps, x_t, s_fake) draw.
    Returns (total_loss, cotangent).
    """
    a1, a2, a3 = spec.coefficients()
    loss, cot = sim_surrogate(sample, sample.s_cond, sample.j_cond, spec,
                              sched, _sign=_sign)
    total_loss = a1 * loss
    total_cot = a1 * cot
    if a2 != 0.0:
        l2, c2 = sim_surrogate(sample, sample.s_uncond, sample.j_uncond,
                               spec, sched, _sign=_sign)
        total_loss -= a2 * l2
        total_cot = total_cot - a2 * c2
    if a3 != 0.0:
        l3, c3 = sim_surrogate(sample, sample.s_reward, sample.j_reward,
                               spec, sched, _sign=_sign)
        total_loss += a3 * l3
        total_cot = total_cot + a3 * c3
    return total_loss, total_cot


# --------------------------------------------------------- batched assembly

@dataclass
class DrawBatch:
    """Frozen randomness for a batch of samples: who, when, which noise.

    ``t_weight`` holds per-sample importance factors 1/pi(t) when t was
    drawn from a non-uniform density pi; None means uniform t, for which
    the factor is the constant (t_max - t_min).
    """

    view_idx: np.ndarray   # (B,) ints
    selector: np.ndarray   # (B,) particle indices
    t: np.ndarray          # (B,)
    eps: np.ndarray        # (B, d)
    t_weight: np.ndarray | None = None


def sample_draw_batch(state: GeneratorState, views, sched: NoiseSchedule,
                      n: int, rng: np.random.Generator,
                      t_strategy="uniform", step=0, total_steps=1,
                      antithetic=False, low_t_frac=0.0) -> DrawBatch:
    """Draw frozen per-sample randomness (view, particle, t, noise).

    With ``antithetic`` each draw is emitted twice, once with eps and once
    with -eps (n must be even). The pairing leaves every marginal unchanged
    but cancels most of the odd-in-eps noise, which matters at small t
    where eps/sigma scales like 1/sigma.

    ``low_t_frac`` > 0 oversamples the bottom of the t range: that
    fraction of draws lands uniformly in the lowest 15% of the span and
    the rest stays uniform overall, with t_weight = 1/pi(t) recorded so
    weighted estimates stay unbiased. Integrand variance piles up near
    t_min (score magnitudes grow like inverse powers of sigma), so
    spending extra samples there at reduced weight cuts the variance of
    both the divergence value and its assembled gradient.
    """
    if antithetic:
        if n % 2:
            raise ValueError("antithetic batches need an even sample count")
        half = sample_draw_batch(state, views, sched, n // 2, rng,
                                 t_strategy, step, total_steps,
                                 low_t_frac=low_t_frac)
        rep = lambda v: np.repeat(v, 2, axis=0)
        eps = rep(half.eps)
        eps[1::2] *= -1.0
        tw = None if half.t_weight is None else rep(half.t_weight)
        return DrawBatch(rep(half.view_idx), rep(half.selector),
                         rep(half.t), eps, tw)
    view_idx = rng.integers(len(views), size=n)
    if state.kind == "particles":
        selector = rng.integers(state.n_particles, size=n)
    else:
        selector = rng.standard_normal((n, state.latent_dim))
    eps = rng.standard_normal((n, state.dim))
    if low_t_frac:
        span = sched.t_max - sched.t_min
        t_cut = sched.t_min + 0.15 * span
        in_low = rng.random(n) < low_t_frac
        t = np.where(in_low,
                     rng.uniform(sched.t_min, t_cut, size=n),
                     rng.uniform(sched.t_min, sched.t_max, size=n))
        dens = (1.0 - low_t_frac) / span + np.where(
            t < t_cut, low_t_frac / (t_cut - sched.t_min), 0.0)
        return DrawBatch(view_idx, selector, t, eps, 1.0 / dens)
    t = sample_t(sched, t_strategy, step, total_steps, rng, size=n)
    return DrawBatch(view_idx, selector, t, eps)


def batch_positions(state: GeneratorState, views, sched: NoiseSchedule,
                    batch: DrawBatch):
    """x0, x_t, alpha, sigma for a draw batch (particle generators)."""
    pts = state.particles
    x0 = np.empty((batch.t.size, state.dim))
    for vi, view in enumerate(views):
        mask = batch.view_idx == vi
        if np.any(mask):
            x0[mask] = pts[batch.selector[mask]] @ view.matrix.T + view.offset
    a, s = sched.alpha_sigma(batch.t)
    x_t = a[:, None] * x0 + s[:, None] * batch.eps
    return x0, x_t, a, s


def assemble_theta_grad(state: GeneratorState, views, batch: DrawBatch,
                        cot):
    """Average the per-sample cotangents through the render pullbacks."""
    cot = np.asarray(cot, dtype=float)
    grad = np.zeros((state.n_particles, state.dim))
    for vi, view in enumerate(views):
        mask = batch.view_idx == vi
        if np.any(mask):
            np.add.at(grad, batch.selector[mask], cot[mask] @ view.matrix)
    return grad.ravel() / batch.t.size


def active_blocks(spec: ObjectiveSpec):
    """Names of the objective blocks with nonzero coefficients."""
    names = ("cond", "uncond", "reward")
    return tuple(n for n, c in zip(names, spec.coefficients()) if c != 0.0)


def kl_cotangents_batch(state: GeneratorState, views, sched: NoiseSchedule,
                        bank: PromptBank, spec: ObjectiveSpec,
                        batch: DrawBatch, reward: RewardModel | None = None,
                        blocks=None):
    """Per-sample unified KL cotangents for a whole draw batch.

    ``blocks`` restricts which of (cond, uncond, reward) contribute, each
    keeping its signed coefficient; by default all blocks with nonzero
    coefficients do, sharing the batch's single set of draws.

    Returns (cot (B, d), stats dict with per-sample residual norms).
    """
    _, x_t, a, s = batch_positions(state, views, sched, batch)
    om = TimeWeighting(spec.omega_kind).weight(sched, batch.t)
    a1, a2, a3 = spec.coefficients()
    if blocks is None:
        blocks = active_blocks(spec)
    coef = {"cond": a1, "uncond": -a2, "reward": a3}
    cot = np.zeros_like(x_t)
    loss = np.zeros(batch.t.size)
    for vi, view in enumerate(views):
        mask = batch.view_idx == vi
        if not np.any(mask):
            continue
        am, sm, omm = a[mask], s[mask], om[mask]
        xm, epsm = x_t[mask], batch.eps[mask]
        res = np.zeros_like(xm)
        for block in blocks:
            if block == "cond":
                s_c = diffused_stats(bank.mixture(view.prompt), am, sm,
                                     xm)["score"]
                res = res + coef[block] * (
                    omm[:, None] * (-sm[:, None] * s_c - epsm))
            elif block == "uncond":
                s_u = diffused_stats(bank.mixture(None), am, sm, xm)["score"]
                res = res + coef[block] * (
                    omm[:, None] * (-sm[:, None] * s_u - epsm))
            else:
                rstats = reward_stats_batch(reward, view.prompt,
                                            bank.mixture(view.prompt), am,
                                            sm, xm)
                res = res + coef[block] * (-omm[:, None] * rstats["score"])
        cot[mask] = res
        loss[mask] = 0.5 * np.sum(res**2, axis=-1)
    return cot, {"loss": loss}


def sim_cotangents_batch(state: GeneratorState, views, sched: NoiseSchedule,
                         bank: PromptBank, spec: ObjectiveSpec,
                         batch: DrawBatch, reward: RewardModel | None = None,
                         net=None, blocks=None, _sign=1.0):
    """Per-sample combined score-matching cotangents for a draw batch.

    ``blocks`` restricts which of (cond, uncond, reward) contribute; by
    default all blocks with nonzero coefficients do, sharing the batch's
    single set of draws.
    """
    _, x_t, a, s = batch_positions(state, views, sched, batch)
    w = TimeWeighting(spec.w_kind).weight(sched, batch.t)
    if batch.t_weight is None:
        w = w * (sched.t_max - sched.t_min)
    else:
        w = w * batch.t_weight
    a1, a2, a3 = spec.coefficients()
    if blocks is None:
        blocks = active_blocks(spec)
    coef = {"cond": a1, "uncond": -a2, "reward": a3}
    cot = np.zeros_like(x_t)
    loss = np.zeros(batch.t.size)
    for vi, view in enumerate(views):
        mask = batch.view_idx == vi
        if not np.any(mask):
            continue
        am, sm, wm = a[mask], s[mask], w[mask]
        xm, epsm = x_t[mask], batch.eps[mask]
        if spec.fake_source == "analytic":
            fstats = particle_noisy_stats(state, view, am, sm, xm,
                                          want_jac=True)
            s_fake = fstats["score"]
            fake_apply = lambda v, jf=fstats["jac"]: np.einsum(
                "bli,bl->bi", jf, v)
        else:
            if net is None:
                raise ValueError("fake_source='learned' needs a score net")
            tm = batch.t[mask]
            cm = np.full(tm.size, vi)
            s_fake = net.forward(xm, cm, tm)
            fake_apply = lambda v, xm=xm, cm=cm, tm=tm: net.vjp_x(
                xm, cm, tm, v)
        b = s_fake + epsm / sm[:, None]
        for block in blocks:
            if block == "cond":
                st = diffused_stats(bank.mixture(view.prompt), am, sm, xm,
                                    want_jac=True)
                s_tgt, j_tgt = st["score"], st["jac"]
            elif block == "uncond":
                st = diffused_stats(bank.mixture(None), am, sm, xm,
                                    want_jac=True)
                s_tgt, j_tgt = st["score"], st["jac"]
            else:
                rs = reward_stats_batch(reward, view.prompt,
                                        bank.mixture(view.prompt), am, sm,
                                        xm, want_jac=True)
                s_tgt, j_tgt = rs["score"], rs["jac"]
            bl, bc = _sim_block(s_fake, fake_apply, s_tgt, j_tgt, b, wm, am,
                                spec, _sign=_sign)
            loss[mask] += coef[block] * bl
            cot[mask] += coef[block] * bc
    return cot, {"loss": loss}


# ------------------------------------------------------ divergence estimate

class MixtureField:
    """Target score field from diffusing a fixed time-0 mixture."""

    def __init__(self, mix0: GaussianMixture):
        self.mix0 = mix0

    def stats(self, alpha, sigma, x, want_jac=False):
        return diffused_stats(self.mix0, alpha, sigma, x, want_jac=want_jac)


class RewardField:
    """Target field grad_xt r(y, x0_hat(x_t)) through the given prior."""

    def __init__(self, model: RewardModel, y, mix0: GaussianMixture):
        self.model = model
        self.y = y
        self.mix0 = mix0

    def stats(self, alpha, sigma, x, want_jac=False):
        return reward_stats_batch(self.model, self.y, self.mix0, alpha,
                                  sigma, x, want_jac=want_jac)


def divergence_on_batch(state: GeneratorState, view: ViewTransform,
                        sched: NoiseSchedule, batch: DrawBatch, field,
                        spec: ObjectiveSpec) -> float:
    """Direct evaluation of the score divergence on frozen randomness.

    Every quantity is recomputed from the current theta, so central
    differences of this function through theta probe the full gradient
    (sampling path and score field together).
    """
    pts = state.particles @ view.matrix.T + view.offset
    x0 = pts[batch.selector]
    a, s = sched.alpha_sigma(batch.t)
    x_t = a[:, None] * x0 + s[:, None] * batch.eps
    q = particle_noisy_stats(state, view, a, s, x_t)
    p = field.stats(a, s, x_t)
    dval, _ = distance_value_grad(spec.distance, p["score"] - q["score"],
                                  spec.huber_c)
    w = TimeWeighting(spec.w_kind).weight(sched, batch.t)
    if batch.t_weight is None:
        return float((sched.t_max - sched.t_min) * np.mean(w * dval))
    return float(np.mean(batch.t_weight * w * dval))


def combined_divergence_on_batch(state, view, sched, batch, bank, spec,
                                 reward=None) -> float:
    """a1 * D_cond - a2 * D_uncond + a3 * D_reward on shared randomness."""
    a1, a2, a3 = spec.coefficients()
    total = a1 * divergence_on_batch(
        state, view, sched, batch, MixtureField(bank.mixture(view.prompt)),
        spec)
    if a2 != 0.0:
        total -= a2 * divergence_on_batch(
            state, view, sched, batch, MixtureField(bank.mixture(None)), spec)
    if a3 != 0.0:
        total += a3 * divergence_on_batch(
            state, view, sched, batch,
            RewardField(reward, view.prompt, bank.mixture(view.prompt)), spec)
    return total


def divergence_estimate(state: GeneratorState, target_mix: GaussianMixture,
                        spec: ObjectiveSpec, sched: NoiseSchedule,
                        n_mc: int, rng: np.random.Generator,
                        view: ViewTransform | None = None) -> float:
    """Monte Carlo estimate of the score divergence to a target mixture.

    Times are uniform on [t_min, t_max] with the matching importance
    factor; x_t is drawn from the generator's own noisy marginal.
    """
    if view is None:
        view = ViewTransform.identity(None, state.dim)
    batch = sample_draw_batch(state, [view], sched, n_mc, rng)
    return divergence_on_batch(state, view, sched, batch,
                               MixtureField(target_mix), spec)


def score_projection_check(state: GeneratorState, views, sched: NoiseSchedule,
                           u, n_mc: int, rng: np.random.Generator,
                           t: float | None = None):
    """Monte Carlo check of E[u(x_t)^T (s_q(x_t) + eps/sigma)] = 0.

    Args:
        u: probe function (x_t (B, d), t (B,)) -> (B, d).
        t: fix the diffusion time, or None to draw uniformly.

    Returns:
        (estimate, standard_error).
    """
    batch = sample_draw_batch(state, views, sched, n_mc, rng)
    if t is not None:
        batch.t[:] = t
    vals = np.empty(n_mc)
    _, x_t, a, s = batch_positions(state, views, sched, batch)
    for vi, view in enumerate(views):
        mask = batch.view_idx == vi
        if not np.any(mask):
            continue
        q = particle_noisy_stats(state, view, a[mask], s[mask], x_t[mask])
        resid = q["score"] + batch.eps[mask] / s[mask][:, None]
        vals[mask] = np.sum(u(x_t[mask], batch.t[mask]) * resid, axis=-1)
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(n_mc))
    return est, se
