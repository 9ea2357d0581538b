"""NumPy implementations of the convolution kernels (fallback backend)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x: np.ndarray, K: int) -> np.ndarray:
    pad = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return sliding_window_view(xp, K, axis=2)  # (B, Cin, L, K)


def conv1d(x, w, bias):
    cols = _windows(x, w.shape[2])
    out = np.tensordot(cols, w, axes=([1, 3], [1, 2]))  # (B, L, Cout)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    out += bias[None, :, None]
    return out


def conv1d_grad(x, w, g):
    K = w.shape[2]
    cols = _windows(x, K)
    gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # (Cout, Cin, K)
    gb = g.sum(axis=(0, 2))
    # input gradient is a 'same' correlation of g with the flipped, transposed kernel
    gcols = _windows(g, K)[..., ::-1]
    gx = np.tensordot(gcols, w, axes=([1, 3], [0, 2]))  # (B, L, Cin)
    gx = np.ascontiguousarray(gx.transpose(0, 2, 1))
    return gx, gw, gb
