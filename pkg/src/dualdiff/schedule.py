"""Linear variance schedule shared by the Gaussian and Bernoulli chains.

Timesteps are 1-based in every public function (``t`` in ``1..T``); the
arrays themselves are stored 0-based, so ``betas[t - 1]`` is the variance
added at step ``t``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    kind: str = "linear"
    betas: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, compare=False, default=None)

    def descriptor(self):
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max, "kind": self.kind}


def make_linear_schedule(T, beta_min=1e-4, beta_max=0.02):
    """Betas interpolated linearly from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min!r}, {beta_max!r})")
    T = int(T)
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    # linspace can miss the right endpoint by an ulp
    betas[0], betas[-1] = beta_min, beta_max
    return schedule_from_betas(betas, beta_min=beta_min, beta_max=beta_max)


def schedule_from_betas(betas, beta_min=None, beta_max=None, kind="linear"):
    """Build a schedule from an explicit beta table.

    Used directly for degenerate test schedules (``beta = 0``) that
    :func:`make_linear_schedule` refuses to construct.
    """
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.ndim != 1 or betas.size == 0:
        raise ConfigError("betas must be a non-empty 1-d sequence")
    if np.any(betas < 0) or np.any(betas >= 1):
        raise ConfigError("betas must lie in [0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(
        T=int(betas.size),
        beta_min=float(betas[0]) if beta_min is None else float(beta_min),
        beta_max=float(betas[-1]) if beta_max is None else float(beta_max),
        kind=kind,
        betas=betas,
        alpha_bars=alpha_bars,
    )


def _check_t(sched, t, allow_zero=False):
    lo = 0 if allow_zero else 1
    if int(t) != t or not (lo <= t <= sched.T):
        raise ContractError(f"timestep {t!r} outside {lo}..{sched.T}")
    return int(t)


def alpha_bar_at(sched, t):
    """Cumulative signal fraction after ``t`` steps; ``alpha_bar_at(sched, 0) == 1``."""
    t = _check_t(sched, t, allow_zero=True)
    return 1.0 if t == 0 else float(sched.alpha_bars[t - 1])


def beta_at(sched, t):
    t = _check_t(sched, t)
    return float(sched.betas[t - 1])


def alpha_bar_table(sched, ts):
    """Vectorised :func:`alpha_bar_at` for an integer array of timesteps (0 allowed)."""
    ts = np.asarray(ts)
    if np.any(ts < 0) or np.any(ts > sched.T):
        raise ContractError(f"timesteps outside 0..{sched.T}")
    padded = np.concatenate(([1.0], sched.alpha_bars))
    return padded[ts]


def beta_table(sched, ts):
    ts = np.asarray(ts)
    if np.any(ts < 1) or np.any(ts > sched.T):
        raise ContractError(f"timesteps outside 1..{sched.T}")
    return sched.betas[ts - 1]


def timestep_sequence(T, stride):
    """Descending reverse-chain timesteps ``T, T - stride, ...`` down to >= 1."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return list(range(T, 0, -stride))
