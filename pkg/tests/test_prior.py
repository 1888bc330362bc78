import numpy as np
import pytest

from scoredesk import GaussianMixture, NoiseSchedule, PromptBank
from scoredesk.fdcheck import fd_gradient, fd_jacobian, rel_err
from scoredesk.prior import diffused_stats, isotropic_stats

from oracles import grid_convolution_density, random_mixture_params


def _random_mix(seed, n_components=3, dim=2):
    rng = np.random.default_rng(seed)
    w, means, covs = random_mixture_params(rng, n_components, dim)
    return GaussianMixture(w, means, covs)


# ------------------------------------------------------------ score vs FD

def test_score_matches_fd_of_log_density():
    worst = 0.0
    for seed in range(3):
        mix = _random_mix(seed)
        rng = np.random.default_rng(100 + seed)
        for _ in range(20):
            x = 4.0 * rng.standard_normal(2)
            g_fd = fd_gradient(lambda v: mix.log_density(v), x)
            worst = max(worst, rel_err(mix.score(x), g_fd))
    assert worst <= 1e-6


def test_score_jacobian_matches_fd_of_score():
    worst = 0.0
    for seed in range(3):
        mix = _random_mix(seed)
        rng = np.random.default_rng(200 + seed)
        for _ in range(10):
            x = 3.0 * rng.standard_normal(2)
            j_fd = fd_jacobian(lambda v: mix.score(v), x)
            worst = max(worst, rel_err(mix.score_jacobian(x), j_fd))
    assert worst <= 1e-6


def test_score_third_matches_fd_of_jacobian():
    mix = _random_mix(7)
    rng = np.random.default_rng(3)
    for _ in range(5):
        # probe near the bulk so the tensor is O(1) and FD noise is tiny
        k = rng.integers(mix.n_components)
        x = mix.means[k] + 0.7 * rng.standard_normal(2)
        t_an = mix.score_third(x)
        t_fd = np.empty((2, 2, 2))
        h = 1e-5
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            t_fd[..., i] = (mix.score_jacobian(x + e)
                            - mix.score_jacobian(x - e)) / (2 * h)
        assert rel_err(t_an, t_fd) <= 1e-5


def test_jacobian_symmetry():
    # the score is a gradient field, so its Jacobian is a Hessian
    mix = _random_mix(11)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 2))
    j = mix.score_jacobian(x)
    assert np.allclose(j, np.swapaxes(j, -1, -2), atol=1e-12)


def test_responsibilities_normalized():
    mix = _random_mix(5)
    rng = np.random.default_rng(5)
    x = 3.0 * rng.standard_normal((40, 2))
    r = mix.responsibilities(x)
    assert r.shape == (40, 3)
    assert np.all(r >= 0)
    assert np.allclose(r.sum(axis=-1), 1.0, atol=1e-12)


def test_responsibilities_pick_nearest_for_separated_modes():
    mix = GaussianMixture([0.5, 0.5], [[-5.0, 0.0], [5.0, 0.0]], 1.0)
    r = mix.responsibilities(np.array([[-5.0, 0.3], [5.2, -0.1]]))
    assert np.argmax(r[0]) == 0
    assert np.argmax(r[1]) == 1
    assert r[0, 0] > 0.999


# ------------------------------------------------- diffusion convolution

def test_diffuse_density_matches_grid_convolution():
    rng = np.random.default_rng(42)
    w, means, covs = random_mixture_params(rng, 2, 2, spread=2.0)
    mix = GaussianMixture(w, means, covs)
    sched = NoiseSchedule("vp_linear")
    t = 0.37
    a, s = sched.alpha_sigma(t)
    mt = mix.diffuse(sched, t)
    probes = means[0] + np.array([[0.0, 0.0], [1.3, -0.8], [-2.0, 2.5]])
    ref = grid_convolution_density(w, means, covs, float(a), float(s), probes)
    got = np.exp(mt.log_density(probes))
    assert rel_err(got, ref) <= 1e-6


def test_diffuse_moments():
    mix = _random_mix(9)
    sched = NoiseSchedule("vp_linear")
    t = 0.55
    a, s = sched.alpha_sigma(t)
    m0, c0 = mix.mean_cov()
    mt, ct = mix.diffuse(sched, t).mean_cov()
    assert np.allclose(mt, a * m0, atol=1e-12)
    # second moments: cov_t = a^2 cov_0 + s^2 I
    assert np.allclose(ct, a**2 * c0 + s**2 * np.eye(2), atol=1e-10)


def test_diffuse_at_both_ends():
    mix = _random_mix(13)
    sched = NoiseSchedule("vp_linear", t_min=0.001, t_max=0.999)
    near0 = mix.diffuse(sched, 0.001)
    assert np.allclose(near0.means, mix.means, atol=1e-2)
    near1 = mix.diffuse(sched, 0.999)
    # late-time marginal forgets the data: mean near zero, cov near I
    m, c = near1.mean_cov()
    assert np.linalg.norm(m) < 0.05
    assert np.allclose(c, np.eye(2), atol=0.05)


def test_diffused_stats_matches_pointwise_loop():
    mix = _random_mix(21)
    sched = NoiseSchedule("vp_linear")
    rng = np.random.default_rng(6)
    t = rng.uniform(0.1, 0.9, 8)
    a, s = sched.alpha_sigma(t)
    x = 3.0 * rng.standard_normal((8, 2))
    batch = diffused_stats(mix, a, s, x, want_jac=True)
    for i in range(8):
        mt = mix.diffuse(sched, float(t[i]))
        assert np.allclose(batch["score"][i], mt.score(x[i]), atol=1e-12)
        assert np.allclose(batch["jac"][i], mt.score_jacobian(x[i]),
                           atol=1e-12)


def test_isotropic_stats_matches_generic_path():
    # the particle fast path and the general mixture code must agree
    rng = np.random.default_rng(8)
    means = rng.standard_normal((5, 2)) * 2.0
    var = 0.41
    x = rng.standard_normal((11, 2)) * 2.0
    fast = isotropic_stats(np.broadcast_to(means, (11, 5, 2)),
                           np.full(11, var), x, want_jac=True)
    mix = GaussianMixture(np.ones(5) / 5, means, var)
    assert np.allclose(fast["score"], mix.score(x), atol=1e-10)
    assert np.allclose(fast["jac"], mix.score_jacobian(x), atol=1e-10)


# ------------------------------------------------------------- tweedie

def test_tweedie_definition():
    mix = _random_mix(17)
    sched = NoiseSchedule("vp_linear")
    t = 0.4
    a, s = sched.alpha_sigma(t)
    x = np.array([0.7, -1.1])
    x0_hat, jac = mix.tweedie(sched, t, x)
    mt = mix.diffuse(sched, t)
    assert np.allclose(x0_hat, (x + s**2 * mt.score(x)) / a, atol=1e-12)
    j_fd = fd_jacobian(lambda v: mix.tweedie(sched, t, v)[0], x)
    assert rel_err(jac, j_fd) <= 1e-6


def test_tweedie_unit_gaussian_closed_form():
    # for a unit-covariance Gaussian prior the posterior mean is affine:
    # x0_hat = alpha x + sigma^2 mu
    mu = np.array([1.5, -2.0])
    mix = GaussianMixture([1.0], [mu], 1.0)
    sched = NoiseSchedule("vp_linear")
    for t in (0.1, 0.5, 0.9):
        a, s = sched.alpha_sigma(t)
        x = np.array([0.3, 0.9])
        x0_hat, jac = mix.tweedie(sched, t, x)
        assert np.allclose(x0_hat, a * x + s**2 * mu, atol=1e-10)
        assert np.allclose(jac, a * np.eye(2), atol=1e-10)


# ------------------------------------------------------------- sampling

def test_sample_moments():
    mix = _random_mix(23)
    rng = np.random.default_rng(9)
    x = mix.sample(200_000, rng)
    m, c = mix.mean_cov()
    assert np.allclose(x.mean(axis=0), m, atol=0.03)
    assert np.allclose(np.cov(x.T), c, atol=0.08)


def test_sample_components_match_weights():
    mix = GaussianMixture([0.2, 0.8], [[-4.0, 0.0], [4.0, 0.0]], 0.5)
    rng = np.random.default_rng(10)
    x, comp = mix.sample(50_000, rng, return_components=True)
    frac = np.mean(comp == 1)
    assert abs(frac - 0.8) < 0.01
    assert np.all(x[comp == 0][:, 0] < 0)


# ------------------------------------------------------------ validation

def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], 1.0)  # weights sum
    with pytest.raises(ValueError):
        GaussianMixture([-0.2, 1.2], [[0.0], [1.0]], 1.0)  # negative
    with pytest.raises(ValueError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.5], [[0.0, 0.0]], 1.0)  # count mismatch


# ------------------------------------------------------------ prompt bank

def test_prompt_bank_subsets():
    base = _random_mix(31, n_components=4)
    bank = PromptBank.from_subsets(base, {"a": [0, 2],
                                          "b": ([1, 3], [0.3, 0.7])})
    assert set(bank.prompts) == {"a", "b"}
    assert bank.mixture(None) is base or np.allclose(
        bank.mixture(None).means, base.means)
    ma = bank.mixture("a")
    assert ma.n_components == 2
    # conditional weights renormalize the base weights on the subset
    expect = base.weights[[0, 2]] / base.weights[[0, 2]].sum()
    assert np.allclose(ma.weights, expect, atol=1e-12)
    mb = bank.mixture("b")
    assert np.allclose(mb.weights, [0.3, 0.7], atol=1e-12)
    with pytest.raises(ValueError):
        bank.mixture("missing")


def test_cfg_score_interpolates():
    base = _random_mix(33, n_components=3)
    bank = PromptBank.from_subsets(base, {"a": [0, 1]})
    sched = NoiseSchedule("vp_linear")
    t = 0.45
    x = np.array([0.4, -0.2])
    s_c = bank.score("a", sched, t, x)
    s_u = bank.score(None, sched, t, x)
    got = bank.cfg_score("a", sched, t, x, gamma=2.5)
    assert np.allclose(got, s_c + 2.5 * (s_c - s_u), atol=1e-12)
    assert np.allclose(bank.cfg_score("a", sched, t, x, gamma=0.0), s_c,
                       atol=1e-15)


def test_cfg_score_degenerate_prompt_is_gamma_invariant():
    # prompt covering all components with the base weights has
    # s_cond == s_uncond, so guidance must change nothing
    base = _random_mix(35, n_components=3)
    bank = PromptBank.from_subsets(base, {"all": [0, 1, 2]})
    sched = NoiseSchedule("vp_linear")
    x = np.array([1.0, 0.5])
    for gamma in (0.0, 1.0, 7.5):
        assert np.allclose(bank.cfg_score("all", sched, 0.3, x, gamma),
                           bank.score(None, sched, 0.3, x), atol=1e-12)
