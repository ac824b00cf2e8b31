"""Dense convolution, reductions and rectifier with hand-written adjoints.

Arrays follow the channels-last layout used throughout the package:
images are ``(H, W, C)`` or batched ``(N, H, W, C)``, kernels are
``(h, w, C, K)``.  The convolution is a cross-correlation (no kernel flip).
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Padding(str, Enum):
    VALID = "valid"
    SAME = "same"


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")


def same_pads(h, w):
    """Zero padding ``(top, bottom, left, right)`` that keeps the spatial size.

    Odd remainders go to the bottom/right side.
    """
    top, left = (h - 1) // 2, (w - 1) // 2
    return top, h - 1 - top, left, w - 1 - left


def _prepare(x, kernels, padding):
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    padding = Padding(padding)
    if x.ndim not in (3, 4):
        raise ValueError(f"input must be (H, W, C) or (N, H, W, C), got shape {x.shape}")
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be (h, w, C, K), got shape {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise ValueError(
            f"channel mismatch: input shape {x.shape} vs kernel shape {kernels.shape}"
        )
    h, w = kernels.shape[:2]
    if padding is Padding.VALID and (h > x.shape[-3] or w > x.shape[-2]):
        raise ValueError(
            f"kernel shape {kernels.shape} larger than input shape {x.shape} for valid padding"
        )
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if padding is Padding.SAME:
        t, b, l, r = same_pads(h, w)
        x = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))
    return x, kernels, padding, batched


def _offsets(shape, h, w):
    """Row offsets of every kernel tap in the flattened (N*H*W, C) input.

    Output pixel (n, r, c) is computed at flat row n*H*W + r*W + c; rows
    that fall past the valid region are garbage and get cropped.
    """
    N, H, W, _ = shape
    R = N * H * W - ((h - 1) * W + (w - 1))
    return R, [(i, j, i * W + j) for i in range(h) for j in range(w)]


def _single_channel_cols(xp, h, w):
    """(N, H, W, 1) -> (N*H'*W', h*w) patch matrix."""
    win = sliding_window_view(xp[..., 0], (h, w), axis=(1, 2))
    return win.reshape(-1, h * w)


def conv2d(x, kernels, bias=None, padding=Padding.VALID):
    """Multi-channel 2-D cross-correlation.

    Returns ``(H', W', K)`` (or ``(N, H', W', K)`` for batched input) where
    ``H' = H - h + 1`` for valid padding and ``H' = H`` for same padding.
    """
    _check_finite("input", x)
    xp, kernels, padding, batched = _prepare(x, kernels, padding)
    h, w, C, K = kernels.shape
    N, H, W, _ = xp.shape
    if C == 1:
        cols = _single_channel_cols(xp, h, w)
        out = (cols @ kernels.reshape(h * w, K)).reshape(N, H - h + 1, W - w + 1, K)
    else:
        xf = xp.reshape(-1, C)
        R, taps = _offsets(xp.shape, h, w)
        out = np.zeros((N * H * W, K))
        for i, j, d in taps:
            out[:R] += xf[d:d + R] @ kernels[i, j]
        out = out.reshape(N, H, W, K)[:, :H - h + 1, :W - w + 1]
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (K,):
            raise ValueError(f"bias shape {bias.shape} does not match kernel shape {kernels.shape}")
        out = out + bias
    else:
        out = np.ascontiguousarray(out)
    return out if batched else out[0]


def conv2d_backward(x, kernels, grad_output, padding=Padding.VALID, need_input=True):
    """Gradients of ``sum(grad_output * conv2d(x, kernels, b))``.

    Returns ``(grad_input, grad_kernels, grad_bias)``; ``grad_input`` is None
    when ``need_input`` is false.
    """
    xp, kernels, padding, batched = _prepare(x, kernels, padding)
    h, w, C, K = kernels.shape
    N, H, W, _ = xp.shape
    g = np.asarray(grad_output, dtype=np.float64)
    if not batched:
        g = g[None]
    expected = (N, H - h + 1, W - w + 1, K)
    if g.shape != expected:
        raise ValueError(f"grad_output shape {np.shape(grad_output)} != output shape {expected}")

    grad_b = g.sum(axis=(0, 1, 2))
    if C == 1 and not need_input:
        cols = _single_channel_cols(xp, h, w)
        grad_k = (cols.T @ g.reshape(-1, K)).reshape(h, w, 1, K)
        return None, grad_k, grad_b

    # cotangent embedded in the full grid; garbage rows get zero weight
    gf = np.zeros((N, H, W, K))
    gf[:, :expected[1], :expected[2]] = g
    gf = gf.reshape(-1, K)
    xf = xp.reshape(-1, C)
    R, taps = _offsets(xp.shape, h, w)
    grad_k = np.empty((h, w, C, K))
    for i, j, d in taps:
        grad_k[i, j] = xf[d:d + R].T @ gf[:R]
    if not need_input:
        return None, grad_k, grad_b

    gp = np.zeros((N * H * W, C))
    for i, j, d in taps:
        gp[d:d + R] += gf[:R] @ kernels[i, j].T
    gp = gp.reshape(N, H, W, C)
    if padding is Padding.SAME:
        t, b, l, r = same_pads(h, w)
        gp = gp[:, t:H - b, l:W - r, :]
    if not batched:
        gp = gp[0]
    return gp, grad_k, grad_b


def correlate_valid(image, filt):
    """Single-channel valid cross-correlation of ``image`` (..., H, W) with ``filt`` (m, n).

    Leading axes of ``image`` are treated as a batch.
    """
    image = np.asarray(image, dtype=np.float64)
    m, n = filt.shape
    Ho, Wo = image.shape[-2] - m + 1, image.shape[-1] - n + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"filter shape {filt.shape} larger than image shape {image.shape}")
    out = np.zeros(image.shape[:-2] + (Ho, Wo))
    for a in range(m):
        for b in range(n):
            out += filt[a, b] * image[..., a:a + Ho, b:b + Wo]
    return out


def frob_sq(t):
    """Squared Frobenius norm (sum of squares of every entry)."""
    t = np.asarray(t, dtype=np.float64)
    return float(np.dot(t.ravel(), t.ravel()))


def diamond(a, b):
    """Entrywise product summed over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"diamond needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def relu(t):
    return np.maximum(t, 0.0)


def relu_backward(t, grad):
    """Mask ``grad`` where the pre-activation ``t`` is not strictly positive."""
    return np.where(t > 0, grad, 0.0)


def sigmoid(t):
    # split form avoids overflow in exp for large |t|
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out
