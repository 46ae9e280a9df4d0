import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdiff.bernoulli import (
    b_bce_loss, b_forward_marginal_prob, b_forward_marginal_sample, b_forward_step, b_kl_prior,
    b_posterior_grad, b_posterior_prob, b_posterior_prob_between, b_reverse_step,
)
from dualdiff.errors import ContractError
from dualdiff.schedule import make_linear_schedule, schedule_from_betas

from conftest import random_binary
from oracles import bayes_posterior, iterate_bernoulli_marginal, two_point_kl


def test_zero_beta_step_is_identity(rng):
    s = schedule_from_betas(np.zeros(4))
    x = random_binary(rng, (16, 16))
    np.testing.assert_array_equal(b_forward_step(x, 3, s, rng), x)


def test_step_rejects_non_binary(default_schedule, rng):
    with pytest.raises(ContractError):
        b_forward_step(np.full((2, 2), 0.5), 1, default_schedule, rng)


def test_forward_step_flip_rate(rng):
    s = make_linear_schedule(10, 0.2, 0.3)
    n = 100_000
    out = b_forward_step(np.zeros(n), 1, s, rng)
    p = 0.2 / 2
    assert abs(out.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_marginal_first_step(default_schedule):
    b1 = default_schedule.betas[0]
    assert b_forward_marginal_prob(np.ones(1), 1, default_schedule)[0] == pytest.approx(1 - b1 / 2, rel=1e-15)
    assert b_forward_marginal_prob(np.zeros(1), 1, default_schedule)[0] == pytest.approx(b1 / 2, rel=1e-12)


def test_marginal_terminal_is_near_half(default_schedule):
    p = b_forward_marginal_prob(np.array([0.0, 1.0]), 1000, default_schedule)
    np.testing.assert_allclose(p, 0.5, atol=0.01)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.integers(1, 16))
def test_marginal_matches_iteration_short(seed, t):
    r = np.random.default_rng(seed)
    s = schedule_from_betas(r.uniform(1e-4, 0.5, size=16))
    for bit in (0.0, 1.0):
        got = b_forward_marginal_prob(np.array([bit]), t, s)[0]
        assert abs(got - iterate_bernoulli_marginal(bit, s.betas, t)) < 1e-12


def test_marginal_sample_is_binary(default_schedule, rng):
    out = b_forward_marginal_sample(random_binary(rng, (8, 8)), 400, default_schedule, rng)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_posterior_zero_beta_copies(rng):
    s = schedule_from_betas(np.zeros(5))
    for bit in (0, 1):
        for x0p in (0.1, 0.5, 0.93):
            assert b_posterior_prob(np.array(bit), np.array(x0p), 3, s) == pytest.approx(bit, abs=0)


def test_posterior_uninformative_prior(default_schedule):
    # x0_hat = 0.5 makes the t-1 marginal 0.5; only the likelihood ratio remains
    t = 300
    b = default_schedule.betas[t - 1]
    got = b_posterior_prob(np.array(1), np.array(0.5), t, default_schedule)
    assert got == pytest.approx(1 - b / 2, rel=1e-12)
    assert got == pytest.approx(bayes_posterior(1, 0.5, t, t - 1, default_schedule.betas), rel=1e-12)


def test_posterior_matches_enumeration_on_many_tuples(rng):
    s = make_linear_schedule(40, 1e-3, 0.3)
    n = 10_000
    ts = rng.integers(2, 41, size=n)
    bits = rng.integers(0, 2, size=n)
    x0p = rng.random(n)
    got = b_posterior_prob(bits, x0p, ts, s)
    assert np.all((got > 0) & (got < 1))
    # enumeration is slow in pure Python; check a deterministic subset of 400
    for i in range(0, n, 25):
        assert got[i] == pytest.approx(bayes_posterior(bits[i], x0p[i], ts[i], ts[i] - 1, s.betas), rel=1e-10)


@pytest.mark.parametrize("t,s_", [(10, 5), (1000, 950), (50, 1), (2, 1)])
def test_strided_posterior_matches_enumeration(default_schedule, t, s_):
    for bit in (0, 1):
        for x0p in (0.0, 0.2, 0.5, 0.97, 1.0):
            got = b_posterior_prob_between(np.array(bit), np.array(x0p), t, s_, default_schedule)
            assert float(got) == pytest.approx(bayes_posterior(bit, x0p, t, s_, default_schedule.betas), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(bit=st.integers(0, 1), x0p=st.floats(0, 1), t=st.integers(2, 1000))
def test_posterior_complement_symmetry(bit, x0p, t):
    s = make_linear_schedule(1000)
    p = b_posterior_prob(np.array(bit), np.array(x0p), t, s)
    q = b_posterior_prob(np.array(1 - bit), np.array(1 - x0p), t, s)
    assert float(p) == pytest.approx(1 - float(q), abs=1e-12)


def test_posterior_requires_t_at_least_two(default_schedule):
    with pytest.raises(ContractError):
        b_posterior_prob(np.array(1), np.array(0.5), 1, default_schedule)


def test_posterior_grad_matches_difference(default_schedule, rng):
    for _ in range(20):
        t = int(rng.integers(2, 1000))
        s_ = int(rng.integers(1, t))
        bit = int(rng.integers(0, 2))
        x = float(rng.uniform(0.05, 0.95))
        h = 1e-6
        fd = (b_posterior_prob_between(np.array(bit), np.array(x + h), t, s_, default_schedule)
              - b_posterior_prob_between(np.array(bit), np.array(x - h), t, s_, default_schedule)) / (2 * h)
        an = b_posterior_grad(np.array(bit), np.array(x), t, s_, default_schedule)
        assert float(an) == pytest.approx(float(fd), rel=1e-6, abs=1e-9)


def test_reverse_terminal_threshold(default_schedule, rng):
    x = random_binary(rng, (4, 4))
    np.testing.assert_array_equal(b_reverse_step(x, np.full((4, 4), 0.9), 1, default_schedule, rng), np.ones((4, 4)))
    np.testing.assert_array_equal(b_reverse_step(x, np.full((4, 4), 0.5), 1, default_schedule, rng), np.ones((4, 4)))
    np.testing.assert_array_equal(b_reverse_step(x, np.full((4, 4), 0.49), 1, default_schedule, rng), np.zeros((4, 4)))


def test_reverse_zero_beta_is_copy(rng):
    s = schedule_from_betas(np.zeros(6))
    x = random_binary(rng, (8, 8))
    np.testing.assert_array_equal(b_reverse_step(x, rng.random((8, 8)), 4, s, rng), x)


def test_reverse_shape_mismatch(default_schedule, rng):
    with pytest.raises(ContractError):
        b_reverse_step(np.zeros((4, 4)), np.zeros((4, 5)), 5, default_schedule, rng)


def test_bce_examples(rng):
    x0 = random_binary(rng, (6, 6))
    assert b_bce_loss(x0, x0) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)
    assert b_bce_loss(x0, np.full((6, 6), 0.5)) == pytest.approx(math.log(2), rel=1e-14)
    p = rng.random((6, 6))
    brute = 0.0
    for i in range(6):
        for j in range(6):
            q = min(max(p[i, j], 1e-7), 1 - 1e-7)
            brute += -(x0[i, j] * math.log(q) + (1 - x0[i, j]) * math.log(1 - q))
    assert b_bce_loss(x0, p) == pytest.approx(brute / 36, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bce_minimised_at_target(seed):
    r = np.random.default_rng(seed)
    x0 = random_binary(r, (5, 5))
    best = b_bce_loss(x0, x0)
    assert b_bce_loss(x0, r.random((5, 5))) >= best


def test_kl_prior_examples():
    assert b_kl_prior(np.full(4, 0.5)) == 0.0
    assert b_kl_prior(np.ones(4)) == pytest.approx(math.log(2))
    assert b_kl_prior(np.zeros(4)) == pytest.approx(math.log(2))
    assert b_kl_prior(np.array([0.75])) == pytest.approx(two_point_kl(0.75, 0.5), rel=1e-14)
    assert b_kl_prior(np.array([0.75])) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), rel=1e-14)


def test_kl_prior_rejects_out_of_range():
    with pytest.raises(ContractError):
        b_kl_prior(np.array([1.2]))
