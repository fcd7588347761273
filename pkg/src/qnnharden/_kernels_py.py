"""Pure numpy implementations of the int8 inference kernels.

Integer accumulations go through float64 matmuls. The products of int8
operands are exact, and partial sums stay far below 2**53 because networks
reject layers whose accumulator could leave the int32 range, so the result
is exact regardless of BLAS summation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def round_half_away(y):
    """Round to nearest integer, ties away from zero (float64 in, float64 out)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.trunc(y)
    frac = y - t
    return t + np.sign(y) * (np.abs(frac) >= 0.5)


def requantize(acc, multiplier, modes=None):
    """Scale int accumulators to int8 along the last-but-spatial channel axis.

    ``acc`` is ``[B, C]`` or ``[B, C, H, W]``; ``modes`` is a ``[C]`` array of
    per-channel output modes (see ``network.MODE_*``).
    """
    y = np.asarray(acc, dtype=np.float64) * multiplier
    out = np.clip(round_half_away(y), -128, 127)
    if modes is not None and modes.any():
        shape = (1, -1) + (1,) * (y.ndim - 2)
        m = np.asarray(modes).reshape(shape)
        even = 2.0 * np.clip(round_half_away(y * 0.5), -64, 63)
        half = np.clip(out, -64, 63)
        out = np.where(m == 1, even, np.where(m == 2, half, out))
    return out.astype(np.int8)


def dense_acc(x, weight, bias):
    return x.astype(np.float64) @ weight.T.astype(np.float64) + bias.astype(np.float64)


def dense(x, weight, bias, multiplier, modes):
    """x int8 [B, K], weight int8 [N, K] -> int8 [B, N]."""
    return requantize(dense_acc(x, weight, bias), multiplier, modes)


def conv2d_acc(x, weight, bias, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = weight.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    acc = np.tensordot(win.astype(np.float64), weight.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    return acc.transpose(0, 3, 1, 2) + bias.astype(np.float64)[None, :, None, None]


def conv2d(x, weight, bias, multiplier, modes, stride, padding):
    """x int8 [B, C, H, W], weight int8 [O, C, kh, kw] -> int8 [B, O, H', W']."""
    return requantize(conv2d_acc(x, weight, bias, stride, padding), multiplier, modes)


def maxpool2d(x, window, stride):
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.max(axis=(4, 5)))
