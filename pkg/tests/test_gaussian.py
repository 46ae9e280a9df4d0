import numpy as np
import pytest
from scipy import integrate, stats

from dualdiff.errors import ContractError
from dualdiff.gaussian import (
    GaussianReverseParams, g_ddim_step, g_ddpm_step, g_eps_loss, g_forward_marginal, g_forward_step,
    g_kl_prior, g_posterior_from_eps, g_posterior_from_x0, predict_x0,
)
from dualdiff.schedule import alpha_bar_at, make_linear_schedule, schedule_from_betas, timestep_sequence

from conftest import random_binary


def test_marginal_zero_noise(default_schedule, rng):
    x0 = random_binary(rng, (8, 8))
    for t in (1, 17, 500, 1000):
        out = g_forward_marginal(x0, t, default_schedule, np.zeros_like(x0))
        np.testing.assert_array_equal(out, np.sqrt(alpha_bar_at(default_schedule, t)) * x0)


def test_marginal_first_step(default_schedule, rng):
    x0 = random_binary(rng, (4, 4))
    eps = rng.standard_normal((4, 4))
    b1 = default_schedule.betas[0]
    np.testing.assert_allclose(g_forward_marginal(x0, 1, default_schedule, eps),
                               np.sqrt(1 - b1) * x0 + np.sqrt(b1) * eps, rtol=0, atol=1e-14)


def test_marginal_shape_mismatch(default_schedule):
    with pytest.raises(ContractError):
        g_forward_marginal(np.zeros((4, 4)), 3, default_schedule, np.zeros((4, 5)))


def test_marginal_per_item_timesteps(default_schedule, rng):
    x0 = random_binary(rng, (3, 4, 4))
    eps = rng.standard_normal((3, 4, 4))
    ts = np.array([1, 400, 1000])
    batched = g_forward_marginal(x0, ts, default_schedule, eps)
    for i, t in enumerate(ts):
        np.testing.assert_array_equal(batched[i], g_forward_marginal(x0[i], int(t), default_schedule, eps[i]))


def test_forward_step_degenerate_and_noiseless(rng):
    x = rng.standard_normal((5, 5))
    zero = schedule_from_betas(np.zeros(3))
    np.testing.assert_array_equal(g_forward_step(x, 2, zero, rng.standard_normal((5, 5))), x)
    s = make_linear_schedule(10, 0.1, 0.2)
    np.testing.assert_allclose(g_forward_step(x, 4, s, np.zeros_like(x)), np.sqrt(1 - s.betas[3]) * x)


def test_composed_steps_match_marginal(rng):
    # two-sample moment check: chain of k steps vs single-shot marginal
    s = make_linear_schedule(50, 1e-3, 0.05)
    x0 = np.array([0.0, 1.0])
    k, n = 30, 10_000
    x = np.broadcast_to(x0, (n, 2)).copy()
    for t in range(1, k + 1):
        x = g_forward_step(x, t, s, rng.standard_normal((n, 2)))
    y = g_forward_marginal(np.broadcast_to(x0, (n, 2)), k, s, rng.standard_normal((n, 2)))
    for j in range(2):
        se = np.sqrt(x[:, j].var() / n + y[:, j].var() / n)
        assert abs(x[:, j].mean() - y[:, j].mean()) < 4 * se
        # variance: compare with the F-distribution spread
        ratio = x[:, j].var() / y[:, j].var()
        assert stats.f.cdf(ratio, n - 1, n - 1) == pytest.approx(0.5, abs=0.4999)
        assert abs(np.log(ratio)) < 4 * np.sqrt(4.0 / n)


def test_posterior_variance_zero_at_first_step(default_schedule, rng):
    x0 = random_binary(rng, (6, 6))
    eps = rng.standard_normal((6, 6))
    x1 = g_forward_marginal(x0, 1, default_schedule, eps)
    rp = g_posterior_from_eps(x1, eps, 1, default_schedule)
    assert float(rp.variance) == 0.0
    np.testing.assert_allclose(rp.mean, x0, atol=1e-12)
    np.testing.assert_allclose(rp.mean, predict_x0(x1, eps, 1, default_schedule), atol=1e-12)


@pytest.mark.parametrize("t", [2, 10, 250, 999, 1000])
def test_posterior_mean_matches_closed_form(default_schedule, rng, t):
    x0 = random_binary(rng, (8, 8))
    eps = rng.standard_normal((8, 8))
    xt = g_forward_marginal(x0, t, default_schedule, eps)
    from_eps = g_posterior_from_eps(xt, eps, t, default_schedule).mean
    from_x0 = g_posterior_from_x0(xt, x0, t, default_schedule)
    np.testing.assert_allclose(from_eps, from_x0, atol=1e-10)
    # and the variance matches beta_t (1 - abar_{t-1}) / (1 - abar_t)
    b = default_schedule.betas[t - 1]
    ab, ab_prev = alpha_bar_at(default_schedule, t), alpha_bar_at(default_schedule, t - 1)
    assert float(g_posterior_from_eps(xt, eps, t, default_schedule).variance) == pytest.approx(
        b * (1 - ab_prev) / (1 - ab), rel=1e-12)


def test_posterior_linearity(default_schedule):
    z = np.zeros((3, 3))
    np.testing.assert_array_equal(g_posterior_from_eps(z, z, 77, default_schedule).mean, z)


def test_ddim_terminal_returns_x0_hat(default_schedule, rng):
    xt = rng.standard_normal((5, 5))
    e = rng.standard_normal((5, 5))
    np.testing.assert_array_equal(g_ddim_step(xt, e, 300, 0, default_schedule), predict_x0(xt, e, 300, default_schedule))


def test_ddim_with_true_noise_is_self_consistent(default_schedule, rng):
    x0 = random_binary(rng, (8, 8))
    eps = rng.standard_normal((8, 8))
    for t, t_next in [(10, 9), (500, 450), (1000, 1)]:
        xt = g_forward_marginal(x0, t, default_schedule, eps)
        expected = g_forward_marginal(x0, t_next, default_schedule, eps)
        np.testing.assert_allclose(g_ddim_step(xt, eps, t, t_next, default_schedule), expected, atol=1e-12)


def test_ddim_zero_noise_trajectory(default_schedule, rng):
    x0 = random_binary(rng, (8, 8))
    seq = timestep_sequence(1000, 50)
    x = g_forward_marginal(x0, 1000, default_schedule, np.zeros_like(x0))
    for k, t in enumerate(seq):
        t_next = seq[k + 1] if k + 1 < len(seq) else 0
        x = g_ddim_step(x, np.zeros_like(x), t, t_next, default_schedule)
        scale = np.sqrt(alpha_bar_at(default_schedule, t_next))
        np.testing.assert_allclose(x, scale * x0, atol=1e-12)
    np.testing.assert_allclose(x, x0, atol=1e-12)


def test_ddim_rejects_non_decreasing(default_schedule):
    z = np.zeros((2, 2))
    with pytest.raises(ContractError):
        g_ddim_step(z, z, 5, 5, default_schedule)


def test_ddim_is_deterministic(default_schedule, rng):
    xt, e = rng.standard_normal((2, 6, 6))
    a = g_ddim_step(xt, e, 700, 650, default_schedule)
    b = g_ddim_step(xt.copy(), e.copy(), 700, 650, default_schedule)
    assert a.tobytes() == b.tobytes()


def test_ddpm_step_at_one_is_mean(default_schedule, rng):
    xt, e = rng.standard_normal((2, 4, 4))
    out = g_ddpm_step(xt, e, 1, default_schedule, rng.standard_normal((4, 4)))
    np.testing.assert_array_equal(out, g_posterior_from_eps(xt, e, 1, default_schedule).mean)


def test_eps_loss(rng):
    a = rng.standard_normal((7, 7))
    assert g_eps_loss(a, a) == 0.0
    assert g_eps_loss(a, a + 0.3) == pytest.approx(0.09, rel=1e-12)
    b = rng.standard_normal((7, 7))
    brute = sum((b[i, j] - a[i, j]) ** 2 for i in range(7) for j in range(7)) / 49
    assert g_eps_loss(a, b) == pytest.approx(brute, rel=1e-13)
    assert g_eps_loss(a, b) > 0


def test_kl_prior_closed_forms():
    assert g_kl_prior(GaussianReverseParams(np.zeros((3, 3)), np.ones((3, 3)))) == 0.0
    assert g_kl_prior(GaussianReverseParams(np.ones((3, 3)), 1.0)) == pytest.approx(0.5)


def test_kl_prior_matches_quadrature(rng):
    mu = rng.normal(size=4)
    var = rng.uniform(0.2, 3.0, size=4)

    def kl_numeric(m, v):
        p = stats.norm(m, np.sqrt(v))
        f = lambda x: p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))
        val, _ = integrate.quad(f, m - 40 * np.sqrt(v), m + 40 * np.sqrt(v), epsabs=1e-13, epsrel=1e-12, limit=200)
        return val

    expected = np.mean([kl_numeric(m, v) for m, v in zip(mu, var)])
    got = g_kl_prior(GaussianReverseParams(mu, var))
    assert got == pytest.approx(expected, abs=1e-6)


def test_kl_prior_rejects_zero_variance():
    with pytest.raises(ContractError):
        g_kl_prior(GaussianReverseParams(np.zeros(3), 0.0))
