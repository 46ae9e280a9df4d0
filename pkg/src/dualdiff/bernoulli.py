"""Discrete (Bernoulli) branch of the dual-noise diffusion.

The forward step keeps a bit with probability ``1 - beta_t`` and otherwise
resamples it uniformly, so the marginal after ``t`` steps is the affine map
``abar_t * x0 + (1 - abar_t) / 2``. The reverse step is realised as the
analytic posterior q(x_s | x_t, x0_hat) with ``x0_hat`` a soft probability.
"""
import numpy as np

from .errors import ContractError, NumericalError
from .gaussian import _bcast
from .schedule import alpha_bar_table, beta_table

BCE_CLAMP = 1e-7


def _check_binary(x, what="input"):
    x = np.asarray(x)
    if not np.all((x == 0) | (x == 1)):
        raise ContractError(f"{what} must be binary")


def b_forward_step(x_prev, t, sched, rng):
    _check_binary(x_prev, "x_prev")
    beta = _bcast(beta_table(sched, t), x_prev)
    p = (1.0 - beta) * x_prev + beta / 2.0
    return (rng.random(np.shape(x_prev)) < p).astype(np.float64)


def b_forward_marginal_prob(x0, t, sched):
    """P(x_t = 1 | x0) per pixel."""
    _check_binary(x0, "x0")
    ab = _bcast(alpha_bar_table(sched, t), x0)
    return ab * x0 + (1.0 - ab) / 2.0


def b_forward_marginal_sample(x0, t, sched, rng):
    p = b_forward_marginal_prob(x0, t, sched)
    return (rng.random(np.shape(x0)) < p).astype(np.float64)


def _posterior_terms(x_t_bit, x0_prob, t, s, sched):
    """Likelihoods and prior masses for the two outcomes of x_s."""
    t, s = np.asarray(t), np.asarray(s)
    ab_t = alpha_bar_table(sched, t)
    ab_s = alpha_bar_table(sched, s)
    # adjacent steps use 1 - beta_t directly; wider gaps the marginal ratio
    keep = np.where(s == t - 1, 1.0 - beta_table(sched, t), ab_t / ab_s)
    keep = _bcast(keep, x0_prob)
    ab_s = _bcast(ab_s, x0_prob)
    like1 = np.where(x_t_bit == 1, keep + (1.0 - keep) / 2.0, (1.0 - keep) / 2.0)
    like0 = np.where(x_t_bit == 1, (1.0 - keep) / 2.0, keep + (1.0 - keep) / 2.0)
    m1 = ab_s * x0_prob + (1.0 - ab_s) / 2.0
    return like1, like0, m1, ab_s


def b_posterior_prob_between(x_t_bit, x0_prob, t, s, sched):
    """P(x_s = 1 | x_t, x0_hat) for any ``0 < s < t``.

    ``s = t - 1`` is the single-step posterior; larger gaps use the marginal
    ratio ``abar_t / abar_s`` as the keep probability, which is exact for this
    chain.
    """
    if np.any(np.asarray(s) < 1) or np.any(np.asarray(s) >= np.asarray(t)):
        raise ContractError(f"need 1 <= s < t, got s={s!r}, t={t!r}")
    x0_prob = np.asarray(x0_prob, dtype=np.float64)
    x_t_bit = np.asarray(x_t_bit)
    like1, like0, m1, _ = _posterior_terms(x_t_bit, x0_prob, t, s, sched)
    num = like1 * m1
    den = num + like0 * (1.0 - m1)
    if np.any(den <= 0):
        raise NumericalError("degenerate Bernoulli posterior normaliser", term="b_posterior")
    return num / den


def b_posterior_prob(x_t_bit, x0_prob, t, sched):
    """P(x_{t-1} = 1 | x_t, x0_hat); requires ``t >= 2``."""
    return b_posterior_prob_between(x_t_bit, x0_prob, t, np.asarray(t) - 1, sched)


def b_posterior_grad(x_t_bit, x0_prob, t, s, sched):
    """d P(x_s = 1 | x_t, x0_hat) / d x0_hat."""
    x0_prob = np.asarray(x0_prob, dtype=np.float64)
    like1, like0, m1, ab_s = _posterior_terms(np.asarray(x_t_bit), x0_prob, t, s, sched)
    den = like1 * m1 + like0 * (1.0 - m1)
    return like1 * like0 / (den * den) * ab_s


def b_reverse_step(x_t, x0_prob_hat, t, sched, rng, t_next=None):
    """Sample x_{t_next} (default ``t - 1``); landing on 0 decodes x0_prob_hat at 0.5."""
    if np.shape(x_t) != np.shape(x0_prob_hat):
        raise ContractError(f"shape mismatch: {np.shape(x_t)} vs {np.shape(x0_prob_hat)}")
    _check_binary(x_t, "x_t")
    if t_next is None:
        t_next = int(t) - 1
    if t_next == 0:
        return (np.asarray(x0_prob_hat) >= 0.5).astype(np.float64)
    p = b_posterior_prob_between(x_t, x0_prob_hat, t, t_next, sched)
    return (rng.random(np.shape(x_t)) < p).astype(np.float64)


def b_bce_loss(x0, x0_prob_hat):
    """Pixel-mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    if np.shape(x0) != np.shape(x0_prob_hat):
        raise ContractError(f"shape mismatch: {np.shape(x0)} vs {np.shape(x0_prob_hat)}")
    p = np.clip(x0_prob_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(-(x0 * np.log(p) + (1.0 - x0) * np.log(1.0 - p))))


def bernoulli_kl_half(p):
    """Elementwise KL(Bernoulli(p) || Bernoulli(0.5)) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(2.0 * p), 0.0)
        b = np.where(p < 1, (1.0 - p) * np.log(2.0 * (1.0 - p)), 0.0)
    return a + b


def b_kl_prior(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ContractError("probabilities must lie in [0, 1]")
    return float(np.mean(bernoulli_kl_half(p)))
