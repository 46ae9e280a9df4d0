"""Composite loss, training step, dual-chain sampling and Dice evaluation."""
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .bernoulli import (
    BCE_CLAMP, b_forward_marginal_prob, b_posterior_grad, b_posterior_prob_between,
    b_reverse_step, bernoulli_kl_half,
)
from .errors import ContractError, NumericalError
from .fusion import binarize, staple_fuse
from .gaussian import (
    _bcast, g_ddim_step, g_ddpm_step, g_forward_marginal, posterior_variance, predict_x0,
)
from .network import ConditioningFeatures, DenoiserOutput, ToyDenoiser, init_params
from .schedule import alpha_bar_table, beta_table, make_linear_schedule, timestep_sequence

LOSS_TERMS = ("L_G", "L_B", "L_KLG", "L_KLB", "L_SCC")
STREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3}


def substream(seed, name, *extra):
    """Independent generator for a named purpose (data, init, train, sample)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],) + tuple(int(e) for e in extra))
    return np.random.Generator(np.random.PCG64(ss))


def schedule_for(cfg):
    return make_linear_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


def build_model(cfg, seed=None):
    net = cfg.net_config()
    params = init_params(net, substream(cfg.seed if seed is None else seed, "init"))
    return ToyDenoiser(params, net)


# -- losses ------------------------------------------------------------------

def scc_loss(x0, scc_out):
    if np.shape(x0) != np.shape(scc_out):
        raise ContractError(f"shape mismatch: {np.shape(x0)} vs {np.shape(scc_out)}")
    return float(np.mean((np.asarray(x0) - scc_out) ** 2))


def total_loss(parts, lambdas):
    """Weighted sum of the five loss terms; a non-finite term raises."""
    total = 0.0
    for name, lam in zip(LOSS_TERMS, lambdas):
        value = parts[name]
        if not math.isfinite(value):
            raise NumericalError(f"loss term {name} is not finite ({value})", term=name)
        total += lam * value
    return total


def kl_variance(sched, t):
    """Reverse-step variance used by the Gaussian prior KL.

    The true posterior variance vanishes at t = 1, where the KL is
    undefined; that step borrows the t = 2 value.
    """
    t = np.asarray(t)
    if sched.T == 1:
        return beta_table(sched, np.ones_like(t))
    return posterior_variance(sched, np.maximum(t, 2))


@dataclass
class StepNoise:
    """Everything random in one training step, drawn up front."""
    t: np.ndarray
    eps: np.ndarray
    uniforms: np.ndarray
    flips: np.ndarray


def draw_step_noise(rng, n, h, w, T):
    return StepNoise(
        t=rng.integers(1, T + 1, size=n),
        eps=rng.standard_normal((n, h, w)),
        uniforms=rng.random((n, h, w)),
        flips=rng.random(n) < 0.5,
    )


def loss_and_grad(model, images, x0, noise, cfg, sched, compute_grad=True):
    """Loss parts and (optionally) parameter gradients for fixed noise draws.

    Gradients are accumulated into ``model.params.grad`` (zeroed first).
    Returns ``(parts, total)``.
    """
    lambdas = cfg.effective_lambdas()
    branches = cfg.branches
    t = noise.t
    m = x0.size
    tape = Tape()
    if compute_grad:
        model.params.zero_grad()
    cond = model.condition(images, tape=tape)
    x_g = g_forward_marginal(x0, t, sched, noise.eps) if "gaussian" in branches else None
    x_b = None
    if "bernoulli" in branches:
        x_b = (noise.uniforms < b_forward_marginal_prob(x0, t, sched)).astype(np.float64)
    out = model.denoise(x_g, x_b, cond, t, tape=tape, branches=branches)

    parts = dict.fromkeys(LOSS_TERMS, 0.0)
    d_eps = d_prob = None
    if "gaussian" in branches:
        diff = out.eps_hat - noise.eps
        parts["L_G"] = float(np.mean(diff * diff))
        beta = _bcast(beta_table(sched, t), x0)
        ab = _bcast(alpha_bar_table(sched, t), x0)
        dmu_deps = -(beta / np.sqrt(1.0 - ab)) / np.sqrt(1.0 - beta)
        mu = (x_g + dmu_deps * out.eps_hat)
        var = _bcast(kl_variance(sched, t), x0)
        parts["L_KLG"] = float(np.mean(0.5 * (var + mu * mu - 1.0 - np.log(var))))
        d_eps = lambdas[0] * 2.0 * diff / m + lambdas[2] * mu * dmu_deps / m
    if "bernoulli" in branches:
        p_hat = out.x0_prob_hat
        pc = np.clip(p_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
        parts["L_B"] = float(np.mean(-(x0 * np.log(pc) + (1.0 - x0) * np.log(1.0 - pc))))
        inside = (p_hat > BCE_CLAMP) & (p_hat < 1.0 - BCE_CLAMP)
        d_bce = np.where(inside, (-x0 / pc + (1.0 - x0) / (1.0 - pc)) / m, 0.0)
        # reverse-step distribution: posterior over x_{t-1} for t >= 2, x0_hat itself at t = 1
        t_safe = np.maximum(t, 2)
        first = _bcast(t == 1, x0)
        post = b_posterior_prob_between(x_b, p_hat, t_safe, t_safe - 1, sched) if sched.T > 1 else p_hat
        q = np.where(first, p_hat, post)
        parts["L_KLB"] = float(np.mean(bernoulli_kl_half(q)))
        qc = np.clip(q, 1e-300, 1.0)
        qc1 = np.clip(1.0 - q, 1e-300, 1.0)
        dkl_dq = (np.log(qc) - np.log(qc1)) / m
        dq_dp = np.where(first, 1.0, b_posterior_grad(x_b, p_hat, t_safe, t_safe - 1, sched)
                         if sched.T > 1 else 1.0)
        d_prob = lambdas[1] * d_bce + lambdas[3] * dkl_dq * dq_dp
    diff_scc = cond.scc_out - x0
    parts["L_SCC"] = float(np.mean(diff_scc * diff_scc))
    d_scc = lambdas[4] * 2.0 * diff_scc / m

    total = total_loss(parts, lambdas)
    if compute_grad:
        model.backward(out, d_eps=d_eps, d_prob=d_prob, cond=cond, d_scc=d_scc)
    return parts, total


# -- optimiser -----------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def learning_rate_at(cfg, step):
    """Learning rate for 1-based ``step``; cosine decays to zero at ``train_steps``."""
    if cfg.lr_schedule == "constant" or cfg.train_steps == 0:
        return cfg.learning_rate
    frac = min(step, cfg.train_steps) / cfg.train_steps
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_update(params, grad, state, cfg):
    """In-place AdamW step with decoupled weight decay."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    lr = learning_rate_at(cfg, state.step)
    if lr == 0.0:
        return
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params.flat *= 1.0 - lr * cfg.weight_decay
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class StepResult:
    parts: dict
    total: float
    grad: np.ndarray
    params: object


def train_step(batch, model, opt, cfg, sched, rng):
    """One optimisation step on a list of records; updates ``model.params`` in place."""
    if not batch:
        raise ContractError("empty batch")
    images = np.stack([r.image for r in batch])
    x0 = np.stack([r.mask for r in batch])
    n, h, w = x0.shape
    noise = draw_step_noise(rng, n, h, w, cfg.T)
    if cfg.hflip and noise.flips.any():
        images = np.where(noise.flips[:, None, None], images[:, :, ::-1], images)
        x0 = np.where(noise.flips[:, None, None], x0[:, :, ::-1], x0)
    parts, total = loss_and_grad(model, images, x0, noise, cfg, sched)
    adamw_update(model.params, model.params.grad, opt, cfg)
    return StepResult(parts=parts, total=total, grad=model.params.grad, params=model.params)


@dataclass
class TrainState:
    model: ToyDenoiser
    opt: AdamWState
    rng: np.random.Generator
    step: int = 0


def init_train_state(cfg):
    model = build_model(cfg)
    return TrainState(model=model, opt=AdamWState.zeros(model.params.size), rng=substream(cfg.seed, "train"))


def run_training(records, cfg, state, until, on_step=None):
    """Advance ``state`` to step ``until``; ``on_step(step, parts, total)`` after each."""
    sched = schedule_for(cfg)
    n = len(records)
    bs = cfg.batch_size
    while state.step < until:
        idx = state.rng.choice(n, size=bs, replace=n < bs)
        try:
            res = train_step([records[i] for i in idx], state.model, state.opt, cfg, sched, state.rng)
        except NumericalError as exc:
            exc.step = state.step + 1
            raise
        state.step += 1
        if on_step is not None:
            on_step(state.step, res.parts, res.total)
    return state


# -- sampling ------------------------------------------------------------------

class OracleDenoiser:
    """Returns the exact noise and the true mask for known ground truth."""

    def __init__(self, x0, sched):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def condition(self, image, tape=None, fusion=None):
        image = np.asarray(image, dtype=np.float64)
        return ConditioningFeatures(scales=[image], scc_out=self.x0.copy())

    def denoise(self, x_t_g, x_t_b, cond, t, tape=None, branches=("gaussian", "bernoulli")):
        out = DenoiserOutput()
        ref = x_t_g if x_t_g is not None else x_t_b
        x0 = np.broadcast_to(self.x0, np.shape(ref))
        if "gaussian" in branches:
            ab = _bcast(alpha_bar_table(self.sched, t), x0)
            out.eps_hat = (x_t_g - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        if "bernoulli" in branches:
            out.x0_prob_hat = x0.copy()
        return out


@dataclass
class SegmentationResult:
    mask: np.ndarray
    branch_masks: dict
    fused_prob: np.ndarray
    staple: object = None


def _fuse(raters, names):
    if len(raters) == 1:
        return SegmentationResult(mask=raters[0], branch_masks=dict(zip(names, raters)), fused_prob=raters[0].copy())
    res = staple_fuse(raters)
    return SegmentationResult(mask=binarize(res.fused_prob, 0.5), branch_masks=dict(zip(names, raters)),
                              fused_prob=res.fused_prob, staple=res)


def sample_batch(images, model, cfg, sched, rngs):
    """Run both reverse chains for a stack of images; one generator per image.

    Conditioning features are computed once and reused at every step.
    """
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if len(rngs) != n:
        raise ContractError("need one generator per image")
    branches = cfg.branches
    stride = 1 if cfg.sampler == "ddpm" else cfg.stride
    seq = timestep_sequence(cfg.T, stride)
    cond = model.condition(images)
    raters = [[] for _ in range(n)]
    names = []
    for member in range(cfg.ensemble):
        x_g = np.stack([r.standard_normal((h, w)) for r in rngs]) if "gaussian" in branches else None
        x_b = np.stack([(r.random((h, w)) < 0.5).astype(np.float64) for r in rngs]) \
            if "bernoulli" in branches else None
        for k, t in enumerate(seq):
            t_next = seq[k + 1] if k + 1 < len(seq) else 0
            out = model.denoise(x_g, x_b, cond, t, branches=branches)
            if x_g is not None:
                if cfg.sampler == "ddim":
                    x_g = g_ddim_step(x_g, out.eps_hat, t, t_next, sched)
                elif t > 1:
                    z = np.stack([r.standard_normal((h, w)) for r in rngs])
                    x_g = g_ddpm_step(x_g, out.eps_hat, t, sched, z)
                else:
                    x_g = predict_x0(x_g, out.eps_hat, t, sched)
            if x_b is not None:
                if t_next == 0:
                    x_b = (out.x0_prob_hat >= 0.5).astype(np.float64)
                else:
                    p = b_posterior_prob_between(x_b, out.x0_prob_hat, t, t_next, sched)
                    u = np.stack([r.random((h, w)) for r in rngs])
                    x_b = (u < p).astype(np.float64)
        for i in range(n):
            if x_g is not None:
                raters[i].append(binarize(x_g[i], 0.5))
            if x_b is not None:
                raters[i].append(x_b[i])
        names += [f"{b}{member}" if cfg.ensemble > 1 else b for b in branches]
    return [_fuse(raters[i], names) for i in range(n)]


def sample_segmentation(image, model, cfg, sched, rng):
    """Segment one (H, W) image with the dual reverse chains plus STAPLE fusion."""
    return sample_batch(np.asarray(image)[None], model, cfg, sched, [rng])[0]


# -- evaluation ----------------------------------------------------------------

def dice(a, b):
    """2|a & b| / (|a| + |b|), with two empty masks scoring 1."""
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / float(denom)


@dataclass
class EvalResult:
    mean_dice: float
    per_sample: list
    seconds_per_image: float
    branch_dice: dict = field(default_factory=dict)


def evaluate(records, model, cfg, seed=None, chunk=16):
    """Segment every record and score it against its mask.

    Each record ``i`` samples from its own ``sample`` substream, so results do
    not depend on how records are chunked. With ``cfg.model == "oracle"`` the
    model argument is ignored and an oracle is built from the masks.
    """
    if not records:
        raise ContractError("empty dataset")
    sched = schedule_for(cfg)
    seed = cfg.seed if seed is None else seed
    per_sample = []
    branch_scores = {}
    start = time.perf_counter()
    for lo in range(0, len(records), chunk):
        part = records[lo:lo + chunk]
        images = np.stack([r.image for r in part])
        truth = np.stack([r.mask for r in part])
        m = OracleDenoiser(truth, sched) if cfg.model == "oracle" else model
        rngs = [substream(seed, "sample", lo + i) for i in range(len(part))]
        for res, gt in zip(sample_batch(images, m, cfg, sched, rngs), truth):
            per_sample.append(dice(res.mask, gt))
            for name, bm in res.branch_masks.items():
                branch_scores.setdefault(name, []).append(dice(bm, gt))
    elapsed = time.perf_counter() - start
    return EvalResult(
        mean_dice=float(np.mean(per_sample)),
        per_sample=per_sample,
        seconds_per_image=elapsed / len(records),
        branch_dice={k: float(np.mean(v)) for k, v in branch_scores.items()},
    )
