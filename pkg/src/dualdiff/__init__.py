"""Dual-noise (Gaussian + Bernoulli) diffusion for binary segmentation.

The Gaussian branch denoises a real-valued mask with an eps-predicting
network and DDIM sampling; the Bernoulli branch flips bits and predicts the
clean-mask probability. Both terminal masks are fused by STAPLE.
"""
__version__ = "0.1.0"

from ._core import BACKEND
from .bernoulli import (
    b_bce_loss, b_forward_marginal_prob, b_forward_step, b_kl_prior, b_posterior_prob, b_reverse_step,
)
from .config import TrainingConfig
from .data import SampleRecord, synth_dataset
from .fusion import StapleResult, binarize, staple_fuse
from .gaussian import (
    g_ddim_step, g_eps_loss, g_forward_marginal, g_forward_step, g_kl_prior, g_posterior_from_eps,
)
from .network import ConditioningFeatures, DenoiserOutput, ModelParams, ToyDenoiser, time_embedding
from .pipeline import dice, evaluate, sample_segmentation, scc_loss, total_loss, train_step
from .schedule import NoiseSchedule, alpha_bar_at, make_linear_schedule
