"""Jit-compiled twins of the numpy_impl kernels.

Kernels are written element-at-a-time so numba can fuse the loops; parallel
ranges only ever write disjoint output elements, which keeps results
deterministic run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _group_norm_fwd(x, gamma, beta, y, xhat, rstd, groups, eps):
    b, c, h, w = x.shape
    cpg = c // groups
    n = cpg * h * w
    for bi in range(b):
        for g in range(groups):
            s = 0.0
            for ci in range(g * cpg, (g + 1) * cpg):
                for ii in range(h):
                    for jj in range(w):
                        s += x[bi, ci, ii, jj]
            mu = s / n
            s2 = 0.0
            for ci in range(g * cpg, (g + 1) * cpg):
                for ii in range(h):
                    for jj in range(w):
                        d = x[bi, ci, ii, jj] - mu
                        s2 += d * d
            r = 1.0 / np.sqrt(s2 / n + eps)
            rstd[bi, g] = r
            for ci in range(g * cpg, (g + 1) * cpg):
                for ii in range(h):
                    for jj in range(w):
                        xh = (x[bi, ci, ii, jj] - mu) * r
                        xhat[bi, ci, ii, jj] = xh
                        y[bi, ci, ii, jj] = xh * gamma[ci] + beta[ci]


def group_norm_fwd(x, gamma, beta, groups: int, eps: float):
    b, c, h, w = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty((b, groups), dtype=x.dtype)
    _group_norm_fwd(
        np.ascontiguousarray(x),
        np.ascontiguousarray(gamma),
        np.ascontiguousarray(beta),
        y,
        xhat,
        rstd,
        groups,
        eps,
    )
    return y, xhat, rstd


@njit(cache=True)
def _group_norm_bwd(dy, xhat, gamma, rstd, dx, dgamma, dbeta, groups):
    b, c, h, w = dy.shape
    cpg = c // groups
    n = cpg * h * w
    for bi in range(b):
        for g in range(groups):
            m1 = 0.0
            m2 = 0.0
            for ci in range(g * cpg, (g + 1) * cpg):
                for ii in range(h):
                    for jj in range(w):
                        dxh = dy[bi, ci, ii, jj] * gamma[ci]
                        m1 += dxh
                        m2 += dxh * xhat[bi, ci, ii, jj]
            m1 /= n
            m2 /= n
            r = rstd[bi, g]
            for ci in range(g * cpg, (g + 1) * cpg):
                for ii in range(h):
                    for jj in range(w):
                        dxh = dy[bi, ci, ii, jj] * gamma[ci]
                        dx[bi, ci, ii, jj] = r * (dxh - m1 - xhat[bi, ci, ii, jj] * m2)
    for ci in range(c):
        sg = 0.0
        sb = 0.0
        for bi in range(b):
            for ii in range(h):
                for jj in range(w):
                    sg += dy[bi, ci, ii, jj] * xhat[bi, ci, ii, jj]
                    sb += dy[bi, ci, ii, jj]
        dgamma[ci] = sg
        dbeta[ci] = sb


def group_norm_bwd(dy, xhat, gamma, rstd, groups: int):
    b, c, h, w = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.empty(c, dtype=dy.dtype)
    dbeta = np.empty(c, dtype=dy.dtype)
    _group_norm_bwd(
        np.ascontiguousarray(dy),
        np.ascontiguousarray(xhat),
        np.ascontiguousarray(gamma),
        np.ascontiguousarray(rstd),
        dx,
        dgamma,
        dbeta,
        groups,
    )
    return dx, dgamma, dbeta


@njit(cache=True)
def _adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    _adam_step(
        p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
        lr, beta1, beta2, eps, bc1, bc2,
    )


@njit(cache=True)
def _label_edges(mask, out):
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            v = mask[i, j]
            e = 0
            if i > 0 and mask[i - 1, j] != v:
                e = 1
            elif i + 1 < h and mask[i + 1, j] != v:
                e = 1
            elif j > 0 and mask[i, j - 1] != v:
                e = 1
            elif j + 1 < w and mask[i, j + 1] != v:
                e = 1
            out[i, j] = e


def label_edges(mask: np.ndarray) -> np.ndarray:
    out = np.empty(mask.shape, dtype=np.uint8)
    _label_edges(np.ascontiguousarray(mask), out)
    return out


@njit(cache=True)
def _morph(mask, offsets, out, dilate):
    h, w = mask.shape
    k = offsets.shape[0]
    for i in range(h):
        for j in range(w):
            if dilate:
                v = np.uint8(0)
                for o in range(k):
                    y = i - offsets[o, 0]
                    x = j - offsets[o, 1]
                    if 0 <= y < h and 0 <= x < w and mask[y, x]:
                        v = np.uint8(1)
                        break
            else:
                v = np.uint8(1)
                for o in range(k):
                    y = i - offsets[o, 0]
                    x = j - offsets[o, 1]
                    if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                        v = np.uint8(0)
                        break
            out[i, j] = v


def binary_dilate(mask: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.empty(mask.shape, dtype=np.uint8)
    _morph(np.ascontiguousarray(mask), np.ascontiguousarray(offsets), out, True)
    return out


def binary_erode(mask: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.empty(mask.shape, dtype=np.uint8)
    _morph(np.ascontiguousarray(mask), np.ascontiguousarray(offsets), out, False)
    return out


@njit(cache=True)
def _connected_components(mask, labels, stack):
    h, w = mask.shape
    current = 0
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] and labels[sy, sx] == 0:
                current += 1
                labels[sy, sx] = current
                top = 0
                stack[top] = sy * w + sx
                top += 1
                while top > 0:
                    top -= 1
                    pos = stack[top]
                    y = pos // w
                    x = pos % w
                    if y > 0 and mask[y - 1, x] and labels[y - 1, x] == 0:
                        labels[y - 1, x] = current
                        stack[top] = (y - 1) * w + x
                        top += 1
                    if y + 1 < h and mask[y + 1, x] and labels[y + 1, x] == 0:
                        labels[y + 1, x] = current
                        stack[top] = (y + 1) * w + x
                        top += 1
                    if x > 0 and mask[y, x - 1] and labels[y, x - 1] == 0:
                        labels[y, x - 1] = current
                        stack[top] = y * w + x - 1
                        top += 1
                    if x + 1 < w and mask[y, x + 1] and labels[y, x + 1] == 0:
                        labels[y, x + 1] = current
                        stack[top] = y * w + x + 1
                        top += 1
    return current


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels = np.zeros(mask.shape, dtype=np.int32)
    stack = np.empty(mask.size, dtype=np.int64)
    count = _connected_components(np.ascontiguousarray(mask.astype(np.uint8)), labels, stack)
    return labels, int(count)


@njit(cache=True)
def _bilinear_resize(img, out):
    h, w = img.shape
    oh, ow = out.shape
    sy = h / oh
    sx = w / ow
    for i in range(oh):
        y = (i + 0.5) * sy - 0.5
        if y < 0.0:
            y = 0.0
        if y > h - 1:
            y = h - 1.0
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(ow):
            x = (j + 0.5) * sx - 0.5
            if x < 0.0:
                x = 0.0
            if x > w - 1:
                x = w - 1.0
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy


def bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    out = np.empty((oh, ow), dtype=np.float64)
    _bilinear_resize(np.ascontiguousarray(img.astype(np.float64)), out)
    return out.astype(img.dtype)


@njit(cache=True)
def _nearest_resize(arr, out):
    h, w = arr.shape
    oh, ow = out.shape
    sy = h / oh
    sx = w / ow
    for i in range(oh):
        y = int(np.round((i + 0.5) * sy - 0.5))
        if y < 0:
            y = 0
        if y > h - 1:
            y = h - 1
        for j in range(ow):
            x = int(np.round((j + 0.5) * sx - 0.5))
            if x < 0:
                x = 0
            if x > w - 1:
                x = w - 1
            out[i, j] = arr[y, x]


def nearest_resize(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    out = np.empty((oh, ow), dtype=arr.dtype)
    _nearest_resize(np.ascontiguousarray(arr), out)
    return out


@njit(cache=True)
def _sepconv_valid(img, k1d, out):
    h, w = img.shape
    win = k1d.size
    ow = w - win + 1
    oh = h - win + 1
    rows = np.empty((h, ow), dtype=img.dtype)
    for i in range(h):
        for j in range(ow):
            acc = 0.0
            for k in range(win):
                acc += img[i, j + k] * k1d[k]
            rows[i, j] = acc
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for k in range(win):
                acc += rows[i + k, j] * k1d[k]
            out[i, j] = acc


def sepconv_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    win = k1d.size
    oh = img.shape[0] - win + 1
    ow = img.shape[1] - win + 1
    out = np.empty((oh, ow), dtype=img.dtype)
    _sepconv_valid(np.ascontiguousarray(img), np.ascontiguousarray(k1d.astype(img.dtype)), out)
    return out
