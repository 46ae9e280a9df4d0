"""Continuous (Gaussian) branch of the dual-noise diffusion.

Lattices are plain float64 arrays. ``t`` may be a scalar or an integer array
with one entry per leading-axis item (a batch of images with per-image
timesteps); coefficients broadcast over the remaining axes.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .schedule import alpha_bar_table, beta_table


@dataclass
class GaussianReverseParams:
    mean: np.ndarray
    variance: np.ndarray  # scalar or per-item, broadcastable against mean


def _bcast(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (np.ndim(x) - coef.ndim))


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ContractError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def g_forward_marginal(x0, t, sched, noise):
    """Sample of q(x_t | x_0) given the standard-normal draw ``noise``."""
    _same_shape(x0, noise)
    ab = _bcast(alpha_bar_table(sched, t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def g_forward_step(x_prev, t, sched, noise):
    """One forward transition q(x_t | x_{t-1})."""
    _same_shape(x_prev, noise)
    beta = _bcast(beta_table(sched, t), x_prev)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def posterior_variance(sched, t):
    """beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t); zero at t = 1."""
    t = np.asarray(t)
    beta = beta_table(sched, t)
    ab = alpha_bar_table(sched, t)
    ab_prev = alpha_bar_table(sched, t - 1)
    return beta * (1.0 - ab_prev) / (1.0 - ab)


def g_posterior_from_eps(x_t, eps_hat, t, sched):
    """Reverse-step mean and (fixed) variance implied by a noise prediction."""
    _same_shape(x_t, eps_hat)
    beta = _bcast(beta_table(sched, t), x_t)
    ab = _bcast(alpha_bar_table(sched, t), x_t)
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    return GaussianReverseParams(mean=mean, variance=_bcast(posterior_variance(sched, t), x_t))


def g_posterior_from_x0(x_t, x0, t, sched):
    """Closed-form mean of q(x_{t-1} | x_t, x_0); independent of the eps form."""
    beta = _bcast(beta_table(sched, t), x_t)
    ab = _bcast(alpha_bar_table(sched, t), x_t)
    ab_prev = _bcast(alpha_bar_table(sched, np.asarray(t) - 1), x_t)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t


def g_ddpm_step(x_t, eps_hat, t, sched, noise):
    """Ancestral sample of x_{t-1}; the variance vanishes at t = 1."""
    rp = g_posterior_from_eps(x_t, eps_hat, t, sched)
    return rp.mean + np.sqrt(rp.variance) * noise


def predict_x0(x_t, eps_hat, t, sched):
    ab = _bcast(alpha_bar_table(sched, t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def g_ddim_step(x_t, eps_hat, t, t_next, sched):
    """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_next``; ``t_next = 0`` returns x0_hat."""
    _same_shape(x_t, eps_hat)
    if np.any(np.asarray(t_next) >= np.asarray(t)):
        raise ContractError(f"t_next={t_next!r} must be smaller than t={t!r}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    if np.all(np.asarray(t_next) == 0):
        return x0_hat
    ab_next = _bcast(alpha_bar_table(sched, t_next), x_t)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat


def g_eps_loss(eps_true, eps_hat):
    """Pixel-mean squared error."""
    _same_shape(eps_true, eps_hat)
    return float(np.mean((np.asarray(eps_hat) - eps_true) ** 2))


def g_kl_prior(params):
    """Pixel-mean KL(N(mean, variance) || N(0, 1))."""
    var = np.broadcast_to(params.variance, np.shape(params.mean))
    if np.any(var <= 0):
        raise ContractError("KL to the prior needs a strictly positive variance")
    mu = params.mean
    return float(np.mean(0.5 * (var + mu * mu - 1.0 - np.log(var))))
