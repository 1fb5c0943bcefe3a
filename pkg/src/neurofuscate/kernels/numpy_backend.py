"""Pure-numpy conv kernel: im2col + float64 matmul, cast back to float32."""

from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of one (C,H,W) sample with (F,C,kh,kw) filters.

    Accumulates in float64 so the result is backend-independent at float32
    resolution.
    """
    f, c, kh, kw = weight.shape
    _, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xp = x
    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride, :, :][:, :oh, :ow]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow).astype(np.float64)
    out = weight.reshape(f, c * kh * kw).astype(np.float64) @ cols
    if bias is not None:
        out += bias.astype(np.float64)[:, None]
    return out.reshape(f, oh, ow).astype(np.float32)
