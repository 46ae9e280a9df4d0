"""Pure-numpy versions of the convolution gather/scatter kernels.

Activations are channel-first, ``(C, N, H, W)``. Columns are K-major,
``(C * 9, N * H * W)``, so a 3x3 same-padded convolution is a single
``w.reshape(C_out, C * 9) @ cols`` product.
"""
import numpy as np


def im2col3x3(x):
    """Gather the 3x3 neighbourhoods of ``x`` into K-major columns."""
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, n, h, w), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy * 3 + dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, n * h * w)


def col2im3x3(cols, c, n, h, w):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to ``(C, N, H, W)``."""
    cols = cols.reshape(c, 9, n, h, w)
    xp = np.zeros((c, n, h + 2, w + 2), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, dy * 3 + dx]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])
