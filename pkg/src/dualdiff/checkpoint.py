"""Binary checkpoint format.

Layout (all integers and floats little-endian; ``str`` is a u32 byte count
followed by UTF-8)::

    magic      8 bytes  b"DDIFFCKP"
    version    u32
    schedule   str      "kind=...;T=...;beta_min=...;beta_max=..."
    config     str      canonical key = value lines
    step       u64      completed training steps
    rng        str      JSON bit-generator state of the training stream
    segments   u32 count, then per segment: str name, u64 offset,
               u64 length, u32 ndim, u32 dims...
    params     u64 count, f64 values
    adam_step  u64
    adam_m     f64 values (same count as params)
    adam_v     f64 values

Saving a loaded checkpoint reproduces the original bytes.
"""
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import dump_config, parse_config
from .errors import CheckpointError, ConfigError
from .network import ModelParams, ToyDenoiser, layout_index
from .pipeline import AdamWState, TrainState, build_model, substream

MAGIC = b"DDIFFCKP"
VERSION = 1


@dataclass
class Checkpoint:
    cfg: object
    params: ModelParams
    opt: AdamWState
    step: int
    rng_state: dict

    def schedule_descriptor(self):
        c = self.cfg
        return f"kind=linear;T={c.T};beta_min={c.beta_min!r};beta_max={c.beta_max!r}"

    def to_train_state(self):
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng_state
        model = ToyDenoiser(self.params, self.cfg.net_config())
        return TrainState(model=model, opt=self.opt, rng=rng, step=self.step)

    @classmethod
    def from_train_state(cls, cfg, state):
        return cls(cfg=cfg, params=state.model.params, opt=state.opt, step=state.step,
                   rng_state=state.rng.bit_generator.state)

    @classmethod
    def fresh(cls, cfg):
        """Untrained checkpoint: initial parameters, or an empty payload for the oracle model."""
        if cfg.model == "oracle":
            params = ModelParams(np.zeros(0), np.zeros(0), {})
        else:
            params = build_model(cfg).params
        return cls(cfg=cfg, params=params, opt=AdamWState.zeros(params.size), step=0,
                   rng_state=substream(cfg.seed, "train").bit_generator.state)


def _w_str(buf, text):
    data = text.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _w_f64(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def to_bytes(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _w_str(buf, ckpt.schedule_descriptor())
    _w_str(buf, dump_config(ckpt.cfg))
    buf.write(struct.pack("<Q", ckpt.step))
    _w_str(buf, json.dumps(ckpt.rng_state, sort_keys=True))
    index = ckpt.params.index
    buf.write(struct.pack("<I", len(index)))
    for name, (offset, shape) in index.items():
        _w_str(buf, name)
        buf.write(struct.pack("<QQI", offset, int(np.prod(shape)), len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<Q", ckpt.params.size))
    _w_f64(buf, ckpt.params.flat)
    buf.write(struct.pack("<Q", ckpt.opt.step))
    _w_f64(buf, ckpt.opt.m)
    _w_f64(buf, ckpt.opt.v)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt string field: {exc}") from None

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def from_bytes(data):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    schedule = r.string()
    try:
        cfg = parse_config(r.string())
    except ConfigError as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None
    (step,) = r.unpack("<Q")
    try:
        rng_state = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt RNG state: {exc}") from None
    (n_seg,) = r.unpack("<I")
    index = {}
    for _ in range(n_seg):
        name = r.string()
        offset, length, ndim = r.unpack("<QQI")
        shape = r.unpack(f"<{ndim}I")
        if int(np.prod(shape)) != length:
            raise CheckpointError(f"segment {name!r}: length {length} does not match shape {shape}")
        index[name] = (offset, tuple(shape))
    (n_params,) = r.unpack("<Q")
    flat = r.f64(n_params)
    (adam_step,) = r.unpack("<Q")
    m = r.f64(n_params)
    v = r.f64(n_params)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    ckpt = Checkpoint(cfg=cfg, params=ModelParams(flat, np.zeros(n_params), index),
                      opt=AdamWState(m, v, adam_step), step=step, rng_state=rng_state)
    if schedule != ckpt.schedule_descriptor():
        raise CheckpointError(f"schedule descriptor {schedule!r} disagrees with the embedded config")
    if cfg.model == "toy":
        if layout_index(cfg.net_config())[0] != index:
            raise CheckpointError("parameter layout does not match the embedded network config")
    return ckpt


def save_checkpoint(path, ckpt):
    data = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(data)
