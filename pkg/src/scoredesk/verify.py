"""Self-verification suite for the analytic machinery.

Each check recomputes a quantity two independent ways and compares. Two
checks are deliberate mutation probes: they rerun a passing check with a
known fault injected (a sign flip in the score-matching cotangent, a
skewed guidance weight between two algebraically equal routes) and pass
only when the fault is detected. A suite that cannot fail is not
checking anything.
"""

import time

import numpy as np

from .fdcheck import fd_jacobian, rel_err
from .generator import GeneratorState, ViewTransform
from .objectives import (MixtureField, ObjectiveSpec, assemble_theta_grad,
                         divergence_on_batch, grad_cdp, grad_sds, grad_udp,
                         make_step_sample, sample_draw_batch,
                         score_projection_check, sim_cotangents_batch)
from .prior import GaussianMixture, PromptBank
from .schedule import NoiseSchedule


def _fd_theta_grad(state, view, sched, batch, field, spec, h=1e-5):
    g = np.zeros(state.theta.size)
    for i in range(state.theta.size):
        sp, sm = state.copy(), state.copy()
        sp.theta[i] += h
        sm.theta[i] -= h
        g[i] = (divergence_on_batch(sp, view, sched, batch, field, spec)
                - divergence_on_batch(sm, view, sched, batch, field, spec)
                ) / (2 * h)
    return g


def _sim_check_instance():
    sched = NoiseSchedule("vp_linear", t_min=0.2, t_max=0.98)
    views = [ViewTransform.identity("a", 2)]
    mix = GaussianMixture([0.6, 0.4], [[-1.5, 0.0], [1.5, 0.5]], [1.0, 0.8])
    bank = PromptBank.from_subsets(mix, {"a": ([0, 1], [0.5, 0.5])})
    state = GeneratorState(
        "particles",
        np.asarray([[-3.0, -1.0], [0.0, 3.0], [3.5, -1.5]], float).ravel(),
        3, 2)
    return sched, views, bank, state


def _sim_frozen_rel_err(n_mc, seed=7, _sign=1.0, distance="l2_sq"):
    sched, views, bank, state = _sim_check_instance()
    spec = ObjectiveSpec(family="sim", distance=distance,
                         fake_source="analytic")
    batch = sample_draw_batch(state, views, sched, n_mc,
                              np.random.default_rng(seed), antithetic=True,
                              low_t_frac=0.5)
    cot, _ = sim_cotangents_batch(state, views, sched, bank, spec, batch,
                                  blocks=("cond",), _sign=_sign)
    g_sur = assemble_theta_grad(state, views, batch, cot)
    field = MixtureField(bank.mixture("a"))
    g_fd = _fd_theta_grad(state, views[0], sched, batch, field, spec)
    return rel_err(g_sur, g_fd)


def _decomposition_gap(gamma_shift=0.0, n=64, seed=0):
    """Max |sds - ((1+g)*cdp - g*udp)| over random samples.

    gamma_shift skews the gamma used on one side only; zero shift must
    give an identity at machine precision.
    """
    rng = np.random.default_rng(seed)
    sched = NoiseSchedule("vp_linear")
    mix = GaussianMixture([0.5, 0.5], [[-2.0, 0.5], [2.0, -0.5]], [1.0, 1.5])
    bank = PromptBank.from_subsets(mix, {"a": ([0, 1], [0.7, 0.3])})
    views = [ViewTransform.identity("a", 2)]
    state = GeneratorState("particles", rng.normal(size=8), 4, 2)
    worst = 0.0
    cache_spec = ObjectiveSpec(family="kl", gamma=1.0)
    for gamma in (0.0, 1.0, 7.5, 20.0):
        spec = ObjectiveSpec(family="kl", gamma=gamma)
        for _ in range(n // 4):
            t = rng.uniform(sched.t_min, sched.t_max)
            sample = make_step_sample(state, views, sched, bank, cache_spec,
                                      0, int(rng.integers(4)), t,
                                      rng.standard_normal(2))
            g_sds = grad_sds(sample, spec, sched)
            g_c = grad_cdp(sample, spec, sched)
            g_u = grad_udp(sample, spec, sched)
            g2 = (1.0 + gamma + gamma_shift) * g_c - gamma * g_u
            worst = max(worst, float(np.max(np.abs(g_sds - g2))))
    return worst


def verify_suite(quick=False):
    """Run every check; returns a list of result dicts."""
    results = []

    def record(name, value, threshold, ok, t0):
        results.append({
            "name": name,
            "value": float(value),
            "threshold": float(threshold),
            "pass": bool(ok),
            "seconds": round(time.perf_counter() - t0, 3),
        })

    # schedule identity alpha^2 + sigma^2 = 1
    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("vp_linear", "vp_cosine"):
        sched = NoiseSchedule(kind)
        t = np.linspace(sched.t_min, sched.t_max, 1001)
        a, s = sched.alpha_sigma(t)
        worst = max(worst, float(np.max(np.abs(a**2 + s**2 - 1.0))))
    record("schedule_vp_identity", worst, 1e-12, worst <= 1e-12, t0)

    # mixture score vs finite differences of log density
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(3 if quick else 10):
        d = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        w = rng.dirichlet(np.ones(k))
        means = rng.normal(scale=2.0, size=(k, d))
        covs = []
        for _ in range(k):
            m = rng.normal(size=(d, d))
            covs.append(m @ m.T + d * np.eye(d))
        mix = GaussianMixture(w, means, np.array(covs))
        for _ in range(5 if quick else 20):
            x = rng.normal(scale=2.5, size=d)
            g_fd = fd_jacobian(lambda y: mix.log_density(y[None]),
                               x).ravel()
            worst = max(worst, rel_err(mix.score(x[None])[0], g_fd))
    record("mixture_score_vs_fd", worst, 1e-6, worst <= 1e-6, t0)

    # guidance decomposition identity, exact algebra
    t0 = time.perf_counter()
    gap = _decomposition_gap(0.0, n=16 if quick else 64)
    record("cfg_decomposition_identity", gap, 1e-12, gap <= 1e-12, t0)

    # score-projection residual within 4 standard errors
    t0 = time.perf_counter()
    sched, views, bank, state = _sim_check_instance()
    rng = np.random.default_rng(23)
    n_mc = 20000 if quick else 100000
    worst_z = 0.0
    for u_seed in range(2 if quick else 5):
        u_rng = np.random.default_rng(1000 + u_seed)
        a_vec = u_rng.normal(size=2)
        b_vec = u_rng.normal(size=2)
        u = lambda x, t: np.tanh(x @ a_vec)[:, None] * b_vec
        est, se = score_projection_check(state, views, sched, u, n_mc, rng)
        worst_z = max(worst_z, abs(est) / se)
    record("score_projection_residual", worst_z, 4.0, worst_z <= 4.0, t0)

    # frozen-batch consistency of the score-matching gradient
    t0 = time.perf_counter()
    err = _sim_frozen_rel_err(100000 if quick else 400000)
    record("sim_frozen_batch_grad", err, 2e-2, err <= 2e-2, t0)

    # mutation probe: sign flip must be caught
    t0 = time.perf_counter()
    err = _sim_frozen_rel_err(20000, _sign=-1.0)
    record("mutation_sim_sign_flip", err, 1.0, err > 1.0, t0)

    # mutation probe: skewed gamma must break the decomposition
    t0 = time.perf_counter()
    gap = _decomposition_gap(0.05, n=16)
    record("mutation_gamma_skew", gap, 1e-6, gap > 1e-6, t0)

    return results


def format_results(results):
    lines = []
    for r in results:
        status = "PASS" if r["pass"] else "FAIL"
        lines.append(f"[{status}] {r['name']:32s} value={r['value']:.3e} "
                     f"threshold={r['threshold']:.1e} ({r['seconds']}s)")
    n_fail = sum(not r["pass"] for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
