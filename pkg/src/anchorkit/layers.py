"""From-scratch conv-net primitives: conv2d, relu, and 2x upsample-add fusion.

Tensors are single-image (C, H, W) float arrays; weights are
(out_ch, in_ch, kh, kw). Convolutions always use "same" padding
(k - 1) // 2, so the output is ceil(in / stride) per spatial axis and
lines up with the ceil-division anchor layout.

Forward functions return a cache consumed by the matching backward
function. All ops follow the dtype of their inputs (float32 for
training, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "conv2d",
    "conv2d_backward",
    "relu",
    "relu_backward",
    "upsample2",
    "upsample2_backward",
    "fuse",
    "fuse_backward",
]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    # xp: padded (C, Hp, Wp) -> (C*kh*kw, h_out*w_out)
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, h_out, w_out),
        strides=(sc, sh, sw, sh * stride, sw * stride),
    )
    return view.reshape(c * kh * kw, h_out * w_out)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Same-padded convolution; returns (output, cache).

    x: (C, H, W); w: (O, C, kh, kw) with odd kernels; b: (O,).
    Output: (O, ceil(H/stride), ceil(W/stride)).
    """
    c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernels must be odd, got {kh}x{kw}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (wd + 2 * pw - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    out = (w.reshape(o, -1) @ cols).reshape(o, h_out, w_out)
    out += b[:, None, None]
    cache = (x.shape, w, cols, stride)
    return out, cache


def conv2d_backward(grad_out: np.ndarray, cache):
    """Gradients of conv2d w.r.t. input, weights, and bias."""
    (c, h, wd), w, cols, stride = cache
    o, _, kh, kw = w.shape
    h_out, w_out = grad_out.shape[1], grad_out.shape[2]
    g = grad_out.reshape(o, -1)

    grad_b = g.sum(axis=1)
    grad_w = (g @ cols.T).reshape(w.shape)

    grad_cols = (w.reshape(o, -1).T @ g).reshape(c, kh, kw, h_out, w_out)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    grad_xp = np.zeros((c, h + 2 * ph, wd + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += grad_cols[:, i, j]
    grad_x = grad_xp[:, ph : ph + h, pw : pw + wd]
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, out > 0.0


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


def upsample2(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Nearest-neighbor 2x upsample of (C, H, W), cropped to (h_out, w_out)."""
    up = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    return up[:, :h_out, :w_out]


def upsample2_backward(grad_out: np.ndarray, h_in: int, w_in: int) -> np.ndarray:
    """Adjoint of upsample2: sum each 2x2 window back onto the source cell."""
    c, h_out, w_out = grad_out.shape
    full = np.zeros((c, 2 * h_in, 2 * w_in), dtype=grad_out.dtype)
    full[:, :h_out, :w_out] = grad_out
    return full.reshape(c, h_in, 2, w_in, 2).sum(axis=(2, 4))


def fuse(current: np.ndarray, higher: np.ndarray) -> np.ndarray:
    """Element-wise add of the 2x-upsampled deeper map into the current map.

    ``higher`` must be the ceil-half spatial size of ``current`` with the
    same channel count (project channels first).
    """
    if current.shape[0] != higher.shape[0]:
        raise ValueError(
            f"fuse: channel mismatch {current.shape[0]} vs {higher.shape[0]}; "
            "run the 1x1 projection first"
        )
    _, h, w = current.shape
    if higher.shape[1] != -(-h // 2) or higher.shape[2] != -(-w // 2):
        raise ValueError(
            f"fuse: higher map {higher.shape[1:]} is not ceil-half of current {current.shape[1:]}"
        )
    return current + upsample2(higher, h, w)


def fuse_backward(grad_out: np.ndarray, higher_shape: tuple[int, int, int]):
    """Split the upstream gradient: identity to current, window-sum to higher."""
    _, h_in, w_in = higher_shape
    return grad_out, upsample2_backward(grad_out, h_in, w_in)
