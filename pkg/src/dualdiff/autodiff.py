"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Node` objects
in execution order; :meth:`Tape.backward` replays them in reverse,
accumulating adjoints. Image tensors are channel-first, ``(C, N, H, W)``.
Parameter leaves write their adjoints straight into a caller-supplied
gradient buffer (a view into the flat gradient vector).
"""
import numpy as np
from scipy.special import expit

from . import _core
from .errors import ContractError


class Node:
    __slots__ = ("value", "grad", "backward_fn", "sink")

    def __init__(self, value, backward_fn=None, sink=None):
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.sink = sink

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


sigmoid = expit


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_UPSAMPLE_CACHE = {}


def upsample_matrix(n):
    """(2n, n) bilinear x2 interpolation matrix, half-pixel centres, edge clamp."""
    m = _UPSAMPLE_CACHE.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            lo = int(np.floor(src))
            frac = src - lo
            m[i, min(max(lo, 0), n - 1)] += 1.0 - frac
            m[i, min(max(lo + 1, 0), n - 1)] += frac
        m.setflags(write=False)
        _UPSAMPLE_CACHE[n] = m
    return m


class Tape:
    """Operation recorder; ``record=False`` evaluates forward only and keeps nothing."""

    def __init__(self, record=True):
        self.nodes = []
        self.done = False
        self.record = record

    def _record(self, value, backward_fn):
        if not self.record:
            return Node(value)
        node = Node(value, backward_fn)
        self.nodes.append(node)
        return node

    def constant(self, value):
        return Node(np.asarray(value, dtype=np.float64))

    def param(self, value, grad_buffer):
        """Leaf whose adjoint is added into ``grad_buffer`` (same shape)."""
        if not self.record:
            return Node(value)
        node = Node(value, sink=grad_buffer)
        self.nodes.append(node)
        return node

    def backward(self, seeds):
        """Propagate ``seeds`` ({node: adjoint}) back to every parameter leaf."""
        if self.done:
            raise ContractError("tape already consumed by a backward pass")
        if not self.nodes:
            raise ContractError("backward called without a recorded forward pass")
        for node, g in seeds:
            node.accumulate(np.asarray(g, dtype=np.float64))
        for node in reversed(self.nodes):
            g, fn = node.grad, node.backward_fn
            # drop closures as we go so activations are freed without the cycle collector
            node.grad = node.backward_fn = None
            if g is None:
                continue
            if fn is not None:
                fn(g)
            elif node.sink is not None:
                node.sink += g
        self.nodes = []
        self.done = True

    # -- elementwise ------------------------------------------------------

    def add(self, a, b):
        def bwd(g):
            if a.backward_fn or a.sink is not None:
                a.accumulate(_unbroadcast(g, a.shape))
            if b.backward_fn or b.sink is not None:
                b.accumulate(_unbroadcast(g, b.shape))
        return self._record(a.value + b.value, bwd)

    def mul(self, a, b):
        def bwd(g):
            if a.backward_fn or a.sink is not None:
                a.accumulate(_unbroadcast(g * b.value, a.shape))
            if b.backward_fn or b.sink is not None:
                b.accumulate(_unbroadcast(g * a.value, b.shape))
        return self._record(a.value * b.value, bwd)

    def scale(self, a, c):
        return self._record(a.value * c, lambda g: a.accumulate(g * c))

    def silu(self, a):
        s = sigmoid(a.value)
        out = a.value * s
        return self._record(out, lambda g: a.accumulate(g * (s + out * (1.0 - s))))

    def sigmoid(self, a):
        s = sigmoid(a.value)
        return self._record(s, lambda g: a.accumulate(g * s * (1.0 - s)))

    def channel_bias(self, a, v):
        """Add a per-item, per-channel vector ``v`` (N, C) to ``a`` (C, N, H, W)."""
        def bwd(g):
            a.accumulate(g)
            v.accumulate(g.sum(axis=(2, 3)).T)
        return self._record(a.value + v.value.T[:, :, None, None], bwd)

    def concat(self, nodes, axis=0):
        sizes = [n.shape[axis] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]

        def bwd(g):
            for n, part in zip(nodes, np.split(g, cuts, axis=axis)):
                if n.backward_fn or n.sink is not None:
                    n.accumulate(part)
        return self._record(np.concatenate([n.value for n in nodes], axis=axis), bwd)

    # -- linear maps ------------------------------------------------------

    def linear(self, x, w, b):
        """x (N, D) @ w (D, E) + b (E,)."""
        def bwd(g):
            w.accumulate(x.value.T @ g)
            b.accumulate(g.sum(axis=0))
            if x.backward_fn or x.sink is not None:
                x.accumulate(g @ w.value.T)
        return self._record(x.value @ w.value + b.value, bwd)

    def conv3x3(self, x, w, b):
        """Same-padding 3x3 convolution; w is (C_out, C_in, 3, 3)."""
        c, n, h, wd = x.shape
        c_out = w.shape[0]
        cols = _core.im2col3x3(x.value)  # (C*9, N*H*W)
        wmat = w.value.reshape(c_out, c * 9)
        y = wmat @ cols
        y += b.value[:, None]

        def bwd(g):
            gf = g.reshape(c_out, -1)
            w.accumulate((gf @ cols.T).reshape(w.shape))
            b.accumulate(gf.sum(axis=1))
            if x.backward_fn or x.sink is not None:
                x.accumulate(_core.col2im3x3(wmat.T @ gf, c, n, h, wd))
        return self._record(y.reshape(c_out, n, h, wd), bwd)

    def conv1x1(self, x, w, b):
        """Pointwise channel mixing; w is (C_out, C_in)."""
        c, n, h, wd = x.shape
        xf = x.value.reshape(c, -1)
        y = w.value @ xf
        y += b.value[:, None]

        def bwd(g):
            gf = g.reshape(-1, n * h * wd)
            w.accumulate(gf @ xf.T)
            b.accumulate(gf.sum(axis=1))
            if x.backward_fn or x.sink is not None:
                x.accumulate((w.value.T @ gf).reshape(x.shape))
        return self._record(y.reshape(-1, n, h, wd), bwd)

    # -- resampling -------------------------------------------------------

    def avgpool2(self, x):
        n, c, h, w = x.shape
        out = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def bwd(g):
            x.accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)
        return self._record(out, bwd)

    def upsample2(self, x):
        _, _, h, w = x.shape
        uh, uw = upsample_matrix(h), upsample_matrix(w)
        out = uh @ x.value @ uw.T

        def bwd(g):
            x.accumulate(uh.T @ g @ uw)
        return self._record(out, bwd)

    # -- attention --------------------------------------------------------

    def attention(self, xq, xkv, wq, wk, wv, wo):
        """Single-head dot-product attention over spatial positions.

        Queries come from ``xq``, keys and values from ``xkv`` (the same node
        for self-attention). Both are (C, N, H, W) on the same grid.
        """
        c, n, h, w = xq.shape
        xq_t = xq.value.reshape(c, n, h * w).transpose(1, 2, 0)  # (N, L, C)
        xkv_t = xkv.value.reshape(xkv.shape[0], n, -1).transpose(1, 2, 0)
        q = xq_t @ wq.value.T
        k = xkv_t @ wk.value.T
        v = xkv_t @ wv.value.T
        scale = 1.0 / np.sqrt(q.shape[-1])
        s = (q @ k.transpose(0, 2, 1)) * scale
        s -= s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = a @ v
        y = o @ wo.value.T
        out = np.ascontiguousarray(y.transpose(2, 0, 1)).reshape(-1, n, h, w)

        def bwd(g):
            gy = g.reshape(-1, n, h * w).transpose(1, 2, 0)  # (N, L, C_out)
            wo.accumulate(np.einsum("nlo,nlc->oc", gy, o))
            go = gy @ wo.value
            ga = go @ v.transpose(0, 2, 1)
            gv = a.transpose(0, 2, 1) @ go
            gs = a * (ga - np.sum(ga * a, axis=-1, keepdims=True)) * scale
            gq = gs @ k
            gk = gs.transpose(0, 2, 1) @ q
            wq.accumulate(np.einsum("nlo,nlc->oc", gq, xq_t))
            wk.accumulate(np.einsum("nlo,nlc->oc", gk, xkv_t))
            wv.accumulate(np.einsum("nlo,nlc->oc", gv, xkv_t))
            gxq = (gq @ wq.value).transpose(2, 0, 1).reshape(xq.shape)
            gxkv = ((gk @ wk.value) + (gv @ wv.value)).transpose(2, 0, 1).reshape(xkv.shape)
            if xq is xkv:
                xq.accumulate(gxq + gxkv)
            else:
                if xq.backward_fn or xq.sink is not None:
                    xq.accumulate(gxq)
                if xkv.backward_fn or xkv.sink is not None:
                    xkv.accumulate(gxkv)
        return self._record(out, bwd)
