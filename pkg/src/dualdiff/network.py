"""Toy multi-scale conditioner and twin noise-estimation networks.

Everything here is written against :mod:`dualdiff.autodiff`, so a forward
pass recorded on a tape can be differentiated exactly. Parameters live in one
flat float64 vector with a named-segment index; segment names are prefixed
``mfcm.``, ``gnem.`` or ``bnem.`` and each prefix occupies one contiguous
range.
"""
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ContractError

BRANCHES = ("gaussian", "bernoulli")
BRANCH_PREFIX = {"gaussian": "gnem", "bernoulli": "bnem"}


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 12
    cond_channels: tuple = (8, 12, 16)
    time_dim: int = 32
    mfcm_stages: int = 2
    fusion: bool = True
    attention: bool = True
    cross_attention: bool = False
    T: int = 1000

    @property
    def scales(self):
        return len(self.cond_channels)

    def level_channels(self):
        c = self.base_channels
        return [c * min(2 ** i, 2) for i in range(self.scales)]


@dataclass
class ModelParams:
    flat: np.ndarray
    grad: np.ndarray
    index: dict  # name -> (offset, shape)

    def view(self, name):
        off, shape = self.index[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def grad_view(self, name):
        off, shape = self.index[name]
        return self.grad[off:off + int(np.prod(shape))].reshape(shape)

    def segment(self, prefix):
        """(start, stop) of the contiguous block holding every ``prefix.*`` entry."""
        spans = [(off, off + int(np.prod(shape))) for name, (off, shape) in self.index.items()
                 if name.startswith(prefix + ".")]
        if not spans:
            return (0, 0)
        start, stop = min(s for s, _ in spans), max(e for _, e in spans)
        if sum(e - s for s, e in spans) != stop - start:
            raise ContractError(f"segment {prefix!r} is not contiguous")
        return start, stop

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self):
        return ModelParams(self.flat.copy(), self.grad.copy(), dict(self.index))

    @property
    def size(self):
        return self.flat.size


@dataclass
class ConditioningFeatures:
    scales: list  # channel-first: (C, N, h, w), or (C, h, w) for a single image
    scc_out: np.ndarray
    nodes: list = field(default=None, repr=False)
    scc_node: object = field(default=None, repr=False)
    tape: object = field(default=None, repr=False)


@dataclass
class DenoiserOutput:
    eps_hat: np.ndarray = None
    x0_prob_hat: np.ndarray = None
    eps_node: object = field(default=None, repr=False)
    prob_node: object = field(default=None, repr=False)
    tape: object = field(default=None, repr=False)


def time_embedding(t, dim, T=1000):
    """Sinusoidal embedding, interleaved as (sin, cos) pairs.

    ``t`` may be a scalar (returns shape ``(dim,)``) or an array of
    timesteps (returns ``(len(t), dim)``). Frequencies are geometrically
    spaced between 1 and 1/10000.
    """
    if dim <= 0 or dim % 2:
        raise ContractError(f"embedding dim must be even and positive, got {dim}")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > T):
        raise ContractError(f"timestep outside 0..{T}")
    half = dim // 2
    omega = 10000.0 ** (np.arange(half) / half)
    arg = t[:, None] / omega[None, :]
    emb = np.empty((t.size, dim))
    emb[:, 0::2] = np.sin(arg)
    emb[:, 1::2] = np.cos(arg)
    return emb[0] if scalar else emb


# -- parameter layout --------------------------------------------------------

def param_layout(net):
    """Ordered list of (name, shape, fan_in, init) triples.

    ``init`` is "uniform" (fan-in scaled), "zero" for biases, or "head" for
    the zero-initialised output projections.
    """
    cc = net.cond_channels
    S = net.scales
    entries = []

    def conv(name, c_out, c_in, k=3, init="uniform"):
        shape = (c_out, c_in, 3, 3) if k == 3 else (c_out, c_in)
        entries.append((name + ".w", shape, c_in * (9 if k == 3 else 1), init))
        entries.append((name + ".b", (c_out,), 0, "zero" if init != "head" else "head"))

    conv("mfcm.stem", cc[0], 1)
    for i in range(1, S):
        conv(f"mfcm.down{i}", cc[i], cc[i - 1])
    for s in range(net.mfcm_stages):
        for i in range(S):
            conv(f"mfcm.s{s}.block{i}", cc[i], cc[i])
        for i in range(S):
            for j in range(S):
                if i != j:
                    conv(f"mfcm.s{s}.mix{j}to{i}", cc[i], cc[j], k=1)
    conv("mfcm.scc", 1, cc[0], k=1)

    ch = net.level_channels()
    td = net.time_dim
    for branch in BRANCHES:
        p = BRANCH_PREFIX[branch]
        entries.append((f"{p}.time.w", (td, 2 * td), td, "uniform"))
        entries.append((f"{p}.time.b", (2 * td,), 0, "zero"))
        for i in range(S):
            c_in = 1 + cc[0] if i == 0 else ch[i - 1]
            conv(f"{p}.enc{i}", ch[i], c_in)
            entries.append((f"{p}.enc{i}.tw", (2 * td, ch[i]), 2 * td, "uniform"))
            entries.append((f"{p}.enc{i}.tb", (ch[i],), 0, "zero"))
            conv(f"{p}.gate{i}", ch[i], cc[i], k=1)
        cl = ch[-1]
        kv = cc[-1] if net.cross_attention else cl
        entries.append((f"{p}.attn.wq", (cl, cl), cl, "uniform"))
        entries.append((f"{p}.attn.wk", (cl, kv), kv, "uniform"))
        entries.append((f"{p}.attn.wv", (cl, kv), kv, "uniform"))
        entries.append((f"{p}.attn.wo", (cl, cl), cl, "uniform"))
        for i in range(S - 2, -1, -1):
            conv(f"{p}.dec{i}", ch[i], ch[i + 1] + ch[i])
            entries.append((f"{p}.dec{i}.tw", (2 * td, ch[i]), 2 * td, "uniform"))
            entries.append((f"{p}.dec{i}.tb", (ch[i],), 0, "zero"))
        conv(f"{p}.head", 1, ch[0], k=1, init="head")
    return entries


def layout_index(net):
    """Segment index (name -> (offset, shape)) and total parameter count."""
    index = {}
    offset = 0
    for name, shape, _, _ in param_layout(net):
        index[name] = (offset, tuple(shape))
        offset += int(np.prod(shape))
    return index, offset


def init_params(net, rng):
    """Fan-in scaled uniform weights, zero biases, zero output heads."""
    layout = param_layout(net)
    index, offset = layout_index(net)
    flat = np.zeros(offset)
    params = ModelParams(flat, np.zeros(offset), index)
    for name, shape, fan_in, init in layout:
        if init == "uniform":
            bound = np.sqrt(3.0 / fan_in)
            params.view(name)[...] = rng.uniform(-bound, bound, size=shape)
    return params


# -- forward passes ------------------------------------------------------------

class ToyDenoiser:
    """MFCM-lite conditioner plus GNEM/BNEM U-Nets over one parameter vector."""

    def __init__(self, params, net):
        self.params = params
        self.net = net

    def _p(self, tape, name):
        cache = tape.__dict__.setdefault("param_nodes", {})
        node = cache.get(name)
        if node is None:
            node = cache[name] = tape.param(self.params.view(name), self.params.grad_view(name))
        return node

    def _conv(self, tape, name, x, k=3):
        w, b = self._p(tape, name + ".w"), self._p(tape, name + ".b")
        return tape.conv3x3(x, w, b) if k == 3 else tape.conv1x1(x, w, b)

    def condition(self, image, tape=None, fusion=None):
        """Multi-scale conditioning features for a (N, H, W) or (H, W) image."""
        net = self.net
        fusion = net.fusion if fusion is None else fusion
        image = np.asarray(image, dtype=np.float64)
        single = image.ndim == 2
        if single:
            image = image[None]
        n, h, w = image.shape
        div = 2 ** (net.scales - 1)
        if h % div or w % div:
            raise ContractError(f"image {h}x{w} not divisible by {div} for {net.scales} scales")
        tape = tape or Tape(record=False)
        x = tape.constant(image[None])
        streams = [tape.silu(self._conv(tape, "mfcm.stem", x))]
        for i in range(1, net.scales):
            streams.append(tape.silu(self._conv(tape, f"mfcm.down{i}", tape.avgpool2(streams[-1]))))
        for s in range(net.mfcm_stages):
            hs = [tape.silu(self._conv(tape, f"mfcm.s{s}.block{i}", streams[i])) for i in range(net.scales)]
            if not fusion:
                streams = hs
                continue
            fused = []
            for i in range(net.scales):
                acc = hs[i]
                for j in range(net.scales):
                    if j == i:
                        continue
                    src = hs[j]
                    if j < i:  # finer stream: downsample, then mix
                        for _ in range(i - j):
                            src = tape.avgpool2(src)
                        src = self._conv(tape, f"mfcm.s{s}.mix{j}to{i}", src, k=1)
                    else:  # coarser stream: mix at low resolution, then upsample
                        src = self._conv(tape, f"mfcm.s{s}.mix{j}to{i}", src, k=1)
                        for _ in range(j - i):
                            src = tape.upsample2(src)
                    acc = tape.add(acc, src)
                fused.append(acc)
            streams = fused
        scc = tape.sigmoid(self._conv(tape, "mfcm.scc", streams[0], k=1))
        scales = [s.value for s in streams]  # (C, N, h, w)
        scc_out = scc.value[0]
        if single:
            scales = [s[:, 0] for s in scales]
            scc_out = scc_out[0]
        return ConditioningFeatures(scales, scc_out, nodes=streams, scc_node=scc, tape=tape)

    def _cond_nodes(self, tape, cond):
        if cond.tape is tape and cond.nodes is not None:
            return cond.nodes
        vals = [s if s.ndim == 4 else s[:, None] for s in cond.scales]
        return [tape.constant(v) for v in vals]

    def _branch(self, tape, prefix, x_in, cond_nodes, temb):
        net = self.net
        e = tape.silu(tape.linear(temb, self._p(tape, f"{prefix}.time.w"), self._p(tape, f"{prefix}.time.b")))

        def block(name, h):
            h = self._conv(tape, name, h)
            tproj = tape.linear(e, self._p(tape, name + ".tw"), self._p(tape, name + ".tb"))
            return tape.silu(tape.channel_bias(h, tproj))

        skips = []
        h = tape.concat([x_in, cond_nodes[0]])
        for i in range(net.scales):
            if i > 0:
                h = tape.avgpool2(h)
            h = block(f"{prefix}.enc{i}", h)
            pre = self._conv(tape, f"{prefix}.gate{i}", cond_nodes[i], k=1)
            gate = tape.scale(tape.sigmoid(pre), 2.0)
            h = tape.mul(h, gate)
            skips.append(h)
        if net.attention:
            kv = cond_nodes[-1] if net.cross_attention else h
            a = tape.attention(h, kv, *(self._p(tape, f"{prefix}.attn.{k}") for k in ("wq", "wk", "wv", "wo")))
            h = tape.add(h, a)
        for i in range(net.scales - 2, -1, -1):
            h = tape.concat([tape.upsample2(h), skips[i]])
            h = block(f"{prefix}.dec{i}", h)
        return self._conv(tape, f"{prefix}.head", h, k=1)

    def denoise(self, x_t_g, x_t_b, cond, t, tape=None, branches=BRANCHES):
        """Run the requested twin heads; inactive branches return ``None``."""
        if tape is None:
            live = cond.tape is not None and cond.tape.record and not cond.tape.done
            tape = cond.tape if live else Tape(record=False)
        ref = x_t_g if x_t_g is not None else x_t_b
        single = np.ndim(ref) == 2
        as4 = (lambda a: np.asarray(a, dtype=np.float64)[None, None]) if single else \
              (lambda a: np.asarray(a, dtype=np.float64)[None])
        cond_nodes = self._cond_nodes(tape, cond)
        if cond_nodes[0].shape[2:] != np.shape(ref)[-2:]:
            raise ContractError(f"conditioning {cond_nodes[0].shape[2:]} does not match input {np.shape(ref)[-2:]}")
        n = cond_nodes[0].shape[1]
        ts = np.broadcast_to(np.asarray(t), (n,))
        temb = tape.constant(time_embedding(ts, self.net.time_dim, self.net.T))
        out = DenoiserOutput(tape=tape)
        if "gaussian" in branches:
            node = self._branch(tape, "gnem", tape.constant(as4(x_t_g)), cond_nodes, temb)
            out.eps_node = node
            out.eps_hat = node.value[0, 0] if single else node.value[0]
        if "bernoulli" in branches:
            logits = self._branch(tape, "bnem", tape.constant(as4(x_t_b)), cond_nodes, temb)
            node = tape.sigmoid(logits)
            out.prob_node = node
            out.x0_prob_hat = node.value[0, 0] if single else node.value[0]
        return out

    def backward(self, out, d_eps=None, d_prob=None, cond=None, d_scc=None):
        """Accumulate parameter gradients for the given output adjoints.

        Adjoints have the shapes of ``out.eps_hat``, ``out.x0_prob_hat`` and
        ``cond.scc_out``. Returns the (accumulated) flat gradient vector.
        """
        tape = out.tape if out is not None else (cond.tape if cond is not None else None)
        if tape is None or not tape.nodes:
            raise ContractError("backward needs a forward pass recorded on a tape")
        seeds = []

        def shaped(node, g):
            return np.asarray(g, dtype=np.float64).reshape(node.shape)

        if d_eps is not None and out.eps_node is not None:
            seeds.append((out.eps_node, shaped(out.eps_node, d_eps)))
        if d_prob is not None and out.prob_node is not None:
            seeds.append((out.prob_node, shaped(out.prob_node, d_prob)))
        if d_scc is not None and cond is not None:
            seeds.append((cond.scc_node, shaped(cond.scc_node, d_scc)))
        if seeds:
            tape.backward(seeds)
        else:
            tape.done = True
        return self.params.grad


def mfcm_forward(image, params, net, tape=None, fusion=None):
    return ToyDenoiser(params, net).condition(image, tape=tape, fusion=fusion)


def denoise(x_t_g, x_t_b, cond, t, params, net, tape=None, branches=BRANCHES):
    return ToyDenoiser(params, net).denoise(x_t_g, x_t_b, cond, t, tape=tape, branches=branches)


def backward(out, params, net, d_eps=None, d_prob=None, cond=None, d_scc=None):
    return ToyDenoiser(params, net).backward(out, d_eps=d_eps, d_prob=d_prob, cond=cond, d_scc=d_scc)
