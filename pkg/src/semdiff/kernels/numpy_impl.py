"""Pure-numpy reference implementations of the hot kernels.

Every function here has a jit-compiled twin in ``numba_impl``; this module is
the fallback selected when SEMDIFF_NUMBA=0 or numba is unavailable. The two
backends agree within floating-point tolerance (see tests/test_kernels.py).
"""

from __future__ import annotations

import numpy as np


def group_norm_fwd(x, gamma, beta, groups: int, eps: float):
    """Normalize per (sample, group); returns (y, xhat, rstd)."""
    b, c, h, w = x.shape
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * rstd).reshape(b, c, h, w)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    return y, xhat, rstd.reshape(b, groups)


def group_norm_bwd(dy, xhat, gamma, rstd, groups: int):
    """Gradients of group_norm_fwd w.r.t. input, gamma and beta."""
    b, c, h, w = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = (dy * gamma.reshape(1, c, 1, 1)).reshape(b, groups, -1)
    xhat_g = xhat.reshape(b, groups, -1)
    m1 = dxhat.mean(axis=2, keepdims=True)
    m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True)
    dx = rstd.reshape(b, groups, 1) * (dxhat - m1 - xhat_g * m2)
    return dx.reshape(b, c, h, w), dgamma, dbeta


def adam_step(p, g, m, v, lr: float, beta1: float, beta2: float, eps: float, bc1: float, bc2: float):
    """One Adam update, in place on p, m, v. bc1/bc2 are the bias corrections."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def label_edges(mask: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighborhood contains a different label (uint8 0/1)."""
    edges = np.zeros(mask.shape, dtype=np.uint8)
    edges[:-1, :] |= (mask[:-1, :] != mask[1:, :]).astype(np.uint8)
    edges[1:, :] |= (mask[1:, :] != mask[:-1, :]).astype(np.uint8)
    edges[:, :-1] |= (mask[:, :-1] != mask[:, 1:]).astype(np.uint8)
    edges[:, 1:] |= (mask[:, 1:] != mask[:, :-1]).astype(np.uint8)
    return edges


def binary_dilate(mask: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Dilation by an explicit offset list [K,2]; out-of-bounds treated as 0."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for dy, dx in offsets:
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[dst_y, dst_x] |= mask[src_y, src_x]
    return out


def binary_erode(mask: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Erosion by an explicit offset list; out-of-bounds treated as 0."""
    h, w = mask.shape
    out = np.ones((h, w), dtype=np.uint8)
    for dy, dx in offsets:
        shifted = np.zeros((h, w), dtype=np.uint8)
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        shifted[dst_y, dst_x] = mask[src_y, src_x]
        out &= shifted
    return out


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labels (1..n) of a binary mask; 0 = background."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    stack: list[tuple[int, int]] = []
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and labels[sy, sx] == 0:
                current += 1
                labels[sy, sx] = current
                stack.append((sy, sx))
                while stack:
                    y, x = stack.pop()
                    if y > 0 and mask[y - 1, x] and labels[y - 1, x] == 0:
                        labels[y - 1, x] = current
                        stack.append((y - 1, x))
                    if y + 1 < h and mask[y + 1, x] and labels[y + 1, x] == 0:
                        labels[y + 1, x] = current
                        stack.append((y + 1, x))
                    if x > 0 and mask[y, x - 1] and labels[y, x - 1] == 0:
                        labels[y, x - 1] = current
                        stack.append((y, x - 1))
                    if x + 1 < w and mask[y, x + 1] and labels[y, x + 1] == 0:
                        labels[y, x + 1] = current
                        stack.append((y, x + 1))
    return labels, current


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center mapping: out i samples input at (i + .5) * scale - .5
    scale = n_in / n_out
    return (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5


def bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resample of a 2D array, edge-clamped."""
    h, w = img.shape
    ys = np.clip(_source_coords(oh, h), 0, h - 1)
    xs = np.clip(_source_coords(ow, w), 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def nearest_resize(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Nearest-neighbor resample of a 2D array (labels never blended)."""
    h, w = arr.shape
    ys = np.clip(np.round(_source_coords(oh, h)), 0, h - 1).astype(np.int64)
    xs = np.clip(np.round(_source_coords(ow, w)), 0, w - 1).astype(np.int64)
    return arr[ys][:, xs]


def sepconv_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable 2D correlation with a 1D kernel, valid mode (used by SSIM)."""
    win = k1d.size
    rows = np.lib.stride_tricks.sliding_window_view(img, win, axis=1) @ k1d
    return np.ascontiguousarray(
        (np.lib.stride_tricks.sliding_window_view(rows, win, axis=0) * k1d).sum(axis=-1)
    )
