import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdiff.errors import ContractError
from dualdiff.fusion import binarize, staple_fuse

from conftest import random_binary
from oracles import staple_reference


def test_identical_masks_reproduced(rng):
    m = random_binary(rng, (8, 8), 0.3)
    res = staple_fuse([m, m])
    np.testing.assert_array_equal(binarize(res.fused_prob, 0.5), m)


def test_complementary_masks_cancel(rng):
    m = random_binary(rng, (6, 6))
    res = staple_fuse([m, 1 - m], prior=0.5, max_iter=0)
    np.testing.assert_allclose(res.fused_prob, 0.5, atol=1e-15)
    assert res.iterations == 0


def test_dissenting_rater_matches_reference():
    base = np.zeros((4, 4))
    base[1:3, 1:3] = 1
    dissent = base.copy()
    dissent[0, 0] = 1
    dissent[1, 1] = 0
    masks = [base, base.copy(), dissent]
    prior = float(np.mean(masks))
    res = staple_fuse(masks)
    ref_w, ref_p, ref_q, ref_it, ref_conv = staple_reference(masks, prior)
    np.testing.assert_allclose(res.fused_prob, ref_w, atol=1e-9, rtol=0)
    np.testing.assert_allclose(res.sensitivities, ref_p, atol=1e-9)
    np.testing.assert_allclose(res.specificities, ref_q, atol=1e-9)
    assert res.iterations == ref_it and res.converged == ref_conv


def test_per_pixel_prior_matches_reference(rng):
    masks = [random_binary(rng, (5, 5), 0.4) for _ in range(3)]
    prior = rng.uniform(0.1, 0.9, (5, 5))
    res = staple_fuse(masks, prior=prior)
    ref_w = staple_reference(masks, prior)[0]
    np.testing.assert_allclose(res.fused_prob, ref_w, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 5))
def test_permutation_invariance(seed, n):
    r = np.random.default_rng(seed)
    masks = [random_binary(r, (8, 8), r.uniform(0.1, 0.6)) for _ in range(n)]
    a = staple_fuse(masks)
    order = r.permutation(n)
    b = staple_fuse([masks[i] for i in order])
    np.testing.assert_allclose(a.fused_prob, b.fused_prob, atol=1e-12)
    np.testing.assert_allclose(np.asarray(a.sensitivities)[order], b.sensitivities, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_log_likelihood_non_decreasing(seed):
    r = np.random.default_rng(seed)
    truth = random_binary(r, (8, 8), 0.4)
    masks = [np.where(r.random((8, 8)) < 0.15, 1 - truth, truth) for _ in range(3)]
    res = staple_fuse(masks, tol=0.0, max_iter=30)
    ll = np.asarray(res.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_outputs_are_probabilities(seed):
    r = np.random.default_rng(seed)
    masks = [random_binary(r, (8, 8), r.uniform(0, 1)) for _ in range(int(r.integers(2, 5)))]
    res = staple_fuse(masks, max_iter=25)
    assert np.all((res.fused_prob >= 0) & (res.fused_prob <= 1))
    assert res.iterations <= 25
    for v in list(res.sensitivities) + list(res.specificities):
        assert 0 < v < 1


def test_recovers_generating_rates():
    r = np.random.default_rng(7)
    truth = np.zeros((64, 64))
    truth[10:40, 15:50] = 1
    rates = [(0.9, 0.95), (0.8, 0.97), (0.95, 0.85)]
    masks = []
    for p, q in rates:
        u = r.random(truth.shape)
        masks.append(np.where(truth == 1, u < p, u >= q).astype(np.float64))
    res = staple_fuse(masks, prior=float(truth.mean()))
    for (p, q), pe, qe in zip(rates, res.sensitivities, res.specificities):
        assert abs(pe - p) < 0.05 and abs(qe - q) < 0.05


def test_non_convergence_is_reported(rng):
    masks = [random_binary(rng, (8, 8)) for _ in range(3)]
    res = staple_fuse(masks, tol=0.0, max_iter=3)
    assert res.iterations == 3 and not res.converged


@pytest.mark.parametrize("bad", [
    lambda: staple_fuse([np.zeros((2, 2))]),
    lambda: staple_fuse([np.zeros((2, 2)), np.zeros((3, 2))]),
    lambda: staple_fuse([np.zeros((2, 2)), np.full((2, 2), 0.5)]),
])
def test_rejects_bad_inputs(bad):
    with pytest.raises(ContractError):
        bad()


def test_binarize_tie_and_identity(rng):
    np.testing.assert_array_equal(binarize(np.full((3, 3), 0.5), 0.5), np.ones((3, 3)))
    m = random_binary(rng, (5, 5))
    np.testing.assert_array_equal(binarize(m, 0.5), m)


def test_binarize_complement_symmetry(rng):
    p = rng.random((32, 32))
    p[p == 0.5] = 0.25
    np.testing.assert_array_equal(binarize(1 - p, 0.5), 1 - binarize(p, 0.5))


@pytest.mark.parametrize("thr", [0.0, 1.0, -0.1])
def test_binarize_rejects_threshold(thr):
    with pytest.raises(ContractError):
        binarize(np.zeros(3), thr)
