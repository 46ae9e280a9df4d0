"""STAPLE label fusion for binary masks, and thresholding."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

RATE_CLAMP = 1e-6


@dataclass
class StapleResult:
    fused_prob: np.ndarray
    sensitivities: np.ndarray
    specificities: np.ndarray
    iterations: int
    converged: bool
    log_likelihoods: list


def _e_step(d, prior, p, q):
    # d: (R, P) rater decisions; returns per-pixel P(true = 1) and the two evidence terms
    fg = prior * np.prod(np.where(d == 1, p[:, None], 1.0 - p[:, None]), axis=0)
    bg = (1.0 - prior) * np.prod(np.where(d == 1, 1.0 - q[:, None], q[:, None]), axis=0)
    total = fg + bg
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(total > 0, fg / total, prior)
    return w, total


def staple_log_likelihood(masks, prior, sensitivities, specificities):
    """Observed-data log-likelihood of the rater decisions."""
    d = np.stack([np.asarray(m, dtype=np.float64).ravel() for m in masks])
    _, total = _e_step(d, np.broadcast_to(prior, d.shape[1:]), np.asarray(sensitivities), np.asarray(specificities))
    return float(np.sum(np.log(total)))


def staple_fuse(masks, prior=None, tol=1e-6, max_iter=100, init=0.95):
    """Fuse two or more binary rater masks by expectation-maximisation.

    ``prior`` is the probability that a pixel is truly foreground, either a
    scalar or a per-pixel map; it defaults to the mean foreground fraction
    over all raters and stays fixed during the iterations. Sensitivities and
    specificities start at ``init`` and are clamped to ``[1e-6, 1 - 1e-6]``.
    """
    if len(masks) < 2:
        raise ContractError("STAPLE needs at least two raters")
    shape = np.shape(masks[0])
    for m in masks:
        if np.shape(m) != shape:
            raise ContractError(f"rater shapes differ: {np.shape(m)} vs {shape}")
    d = np.stack([np.asarray(m, dtype=np.float64).ravel() for m in masks])
    if not np.all((d == 0) | (d == 1)):
        raise ContractError("rater masks must be binary")
    if prior is None:
        prior = float(d.mean())
    prior = np.broadcast_to(np.asarray(prior, dtype=np.float64).ravel() if np.ndim(prior) else prior, d.shape[1:])
    n_raters = d.shape[0]
    p = np.full(n_raters, init)
    q = np.full(n_raters, init)

    w, total = _e_step(d, prior, p, q)
    log_liks = [float(np.sum(np.log(total)))]
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        fg_mass = w.sum()
        bg_mass = (1.0 - w).sum()
        if fg_mass > 0:
            p = (d @ w) / fg_mass
        if bg_mass > 0:
            q = ((1.0 - d) @ (1.0 - w)) / bg_mass
        p = np.clip(p, RATE_CLAMP, 1.0 - RATE_CLAMP)
        q = np.clip(q, RATE_CLAMP, 1.0 - RATE_CLAMP)
        w_new, total = _e_step(d, prior, p, q)
        log_liks.append(float(np.sum(np.log(total))))
        delta = np.max(np.abs(w_new - w))
        w = w_new
        if delta < tol:
            converged = True
            break
    return StapleResult(
        fused_prob=w.reshape(shape),
        sensitivities=p,
        specificities=q,
        iterations=iterations,
        converged=converged,
        log_likelihoods=log_liks,
    )


def binarize(prob, threshold=0.5):
    """1 where ``prob >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.float64)
