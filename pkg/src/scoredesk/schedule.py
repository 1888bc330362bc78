"""Variance-preserving noise schedules and time-sampling strategies.

Conventions used throughout the package: a schedule maps diffusion time
t in [t_min, t_max] to coefficients (alpha_t, sigma_t) of the forward
perturbation x_t = alpha_t * x_0 + sigma_t * eps, with the
variance-preserving constraint alpha_t^2 + sigma_t^2 = 1.

Two schedule kinds are provided:

* ``vp_linear``: beta(s) = beta_min + s * (beta_max - beta_min), so
  log alpha_t = -1/2 * (beta_min * t + 1/2 * (beta_max - beta_min) * t^2)
* ``vp_cosine``: alpha_t = cos(pi * t / 2), sigma_t = sin(pi * t / 2)

sigma_t is always derived as sqrt(1 - alpha_t^2) for ``vp_linear`` so the
VP identity holds to rounding error by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("vp_linear", "vp_cosine")
WEIGHT_KINDS = ("constant", "sigma_sq", "snr")
T_STRATEGIES = ("uniform", "annealed_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-diffusion coefficient schedule on a clipped time range."""

    kind: str = "vp_linear"
    t_min: float = 0.02
    t_max: float = 0.98
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ValueError(
                f"need 0 < t_min < t_max < 1, got ({self.t_min}, {self.t_max})"
            )
        if self.kind == "vp_linear" and not (0.0 <= self.beta_min <= self.beta_max):
            raise ValueError("need 0 <= beta_min <= beta_max")

    def _check_range(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min - 1e-12) or np.any(t > self.t_max + 1e-12):
            raise ValueError(
                f"t outside schedule range [{self.t_min}, {self.t_max}]"
            )
        return t

    def alpha(self, t):
        t = self._check_range(t)
        if self.kind == "vp_linear":
            integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2
            return np.exp(-0.5 * integral)
        return np.cos(0.5 * np.pi * t)

    def sigma(self, t):
        a = self.alpha(t)
        return np.sqrt(1.0 - a**2)

    def alpha_sigma(self, t):
        """Both coefficients at once; t may be a scalar or an array."""
        a = self.alpha(t)
        return a, np.sqrt(1.0 - a**2)


@dataclass(frozen=True)
class TimeWeighting:
    """Scalar weight lambda(t) applied to per-sample objective terms.

    ``sigma_sq`` is the customary choice for the KL-family objectives and
    for denoising score matching; ``constant`` is the default for the
    score-matching divergence; ``snr`` = alpha_t^2 / sigma_t^2.
    """

    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValueError(f"unknown weighting kind {self.kind!r}")

    def weight(self, sched: NoiseSchedule, t):
        a, s = sched.alpha_sigma(t)
        if self.kind == "constant":
            return np.ones_like(np.asarray(t, dtype=float))
        if self.kind == "sigma_sq":
            return s**2
        return a**2 / s**2


def sample_t(
    sched: NoiseSchedule,
    strategy: str,
    step: int,
    total_steps: int,
    rng: np.random.Generator,
    size=None,
):
    """Draw diffusion times for one optimization step.

    ``uniform`` draws t ~ U(t_min, t_max) regardless of step.
    ``annealed_linear`` shrinks the upper end of the window linearly with
    step, so late steps only see times near t_min:
    hi(step) = t_min + (t_max - t_min) * (1 - step / total_steps).
    """
    if strategy not in T_STRATEGIES:
        raise ValueError(f"unknown t strategy {strategy!r}")
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if strategy == "uniform":
        hi = sched.t_max
    else:
        frac = 1.0 - step / total_steps
        hi = sched.t_min + (sched.t_max - sched.t_min) * frac
    return rng.uniform(sched.t_min, hi, size)
