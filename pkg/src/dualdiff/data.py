"""Synthetic ellipse segmentation data and portable-graymap dataset files."""
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError

FG_RANGE = (0.02, 0.60)


@dataclass
class SampleRecord:
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # float64 in {0, 1}
    meta: dict = field(default_factory=dict)


def render_ellipse(side, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.float64)


def make_record(side, rng, zero_noise=False):
    """One ellipse mask and its noisy ultrasound-like image.

    The cavity is dark on brighter tissue. Noise is multiplicative gamma
    speckle, additive Gaussian noise and a linear brightness ramp.
    """
    while True:
        cy, cx = side / 2 + rng.uniform(-side / 8, side / 8, size=2)
        ay, ax = rng.uniform(side / 6, side / 3, size=2)
        theta = rng.uniform(0.0, np.pi)
        mask = render_ellipse(side, cy, cx, ay, ax, theta)
        if FG_RANGE[0] <= mask.mean() <= FG_RANGE[1]:
            break
    noise_seed = int(rng.integers(0, 2**31 - 1))
    smooth = gaussian_filter(mask, sigma=1.0, mode="nearest")
    if zero_noise:
        image = smooth
    else:
        nrng = np.random.default_rng(noise_seed)
        tissue, cavity = 0.6, 0.2
        image = tissue + (cavity - tissue) * smooth
        image = image * nrng.gamma(6.0, 1.0 / 6.0, size=mask.shape)
        image = image + nrng.normal(0.0, 0.05, size=mask.shape)
        angle = nrng.uniform(0.0, 2 * np.pi)
        yy, xx = (np.mgrid[0:side, 0:side] + 0.5) / side - 0.5
        image = image + 0.15 * (np.cos(angle) * xx + np.sin(angle) * yy)
        image = np.clip(image, 0.0, 1.0)
    meta = {
        "center_y": float(cy), "center_x": float(cx),
        "axis_y": float(ay), "axis_x": float(ax),
        "rotation": float(theta), "noise_seed": noise_seed,
    }
    return SampleRecord(image=image, mask=mask, meta=meta)


def synth_dataset(n, side, seed, zero_noise=False):
    """``n`` records of size ``side``; identical arguments give identical data."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if side < 4 or side % 4:
        raise ContractError(f"side must be a positive multiple of 4, got {side}")
    rng = np.random.default_rng(seed)
    return [make_record(side, rng, zero_noise=zero_noise) for _ in range(n)]


# -- portable graymap I/O ----------------------------------------------------

def write_pgm(path, array8):
    array8 = np.asarray(array8, dtype=np.uint8)
    h, w = array8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(array8.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(tok) for tok in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def image_to_u8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


META_NAME = "meta.txt"


def save_dataset(records, out_dir, params):
    """Write ``image_NNNN.pgm`` / ``mask_NNNN.pgm`` pairs and a metadata sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in params.items()]
    for i, rec in enumerate(records):
        write_pgm(os.path.join(out_dir, f"image_{i:04d}.pgm"), image_to_u8(rec.image))
        write_pgm(os.path.join(out_dir, f"mask_{i:04d}.pgm"), (rec.mask > 0.5).astype(np.uint8) * 255)
        lines += [f"record.{i:04d}.{k} = {v!r}" for k, v in rec.meta.items()]
    with open(os.path.join(out_dir, META_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(data_dir):
    """Read a directory written by :func:`save_dataset` back into records."""
    names = sorted(f for f in os.listdir(data_dir) if f.startswith("image_") and f.endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no image_*.pgm files in {data_dir}")
    records = []
    for name in names:
        idx = name[len("image_"):-len(".pgm")]
        image = read_pgm(os.path.join(data_dir, name)).astype(np.float64) / 255.0
        mask = (read_pgm(os.path.join(data_dir, f"mask_{idx}.pgm")) > 127).astype(np.float64)
        records.append(SampleRecord(image=image, mask=mask, meta={"index": int(idx)}))
    return records
