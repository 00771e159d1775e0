"""Backend parity: the jit kernels and their numpy fallbacks must agree."""

import subprocess
import sys

import numpy as np
import pytest

from semdiff.kernels import numba_impl as nb
from semdiff.kernels import numpy_impl as npk

RNG = np.random.default_rng(11)


@pytest.mark.parametrize("groups", [1, 2, 8])
def test_group_norm_parity(groups):
    x = RNG.normal(size=(3, 8, 5, 5)).astype(np.float32)
    gamma = (RNG.normal(size=8) * 0.3 + 1).astype(np.float32)
    beta = (RNG.normal(size=8) * 0.2).astype(np.float32)
    dy = RNG.normal(size=x.shape).astype(np.float32)
    y1, xh1, r1 = npk.group_norm_fwd(x, gamma, beta, groups, 1e-5)
    y2, xh2, r2 = nb.group_norm_fwd(x, gamma, beta, groups, 1e-5)
    assert np.abs(y1 - y2).max() < 1e-5
    assert np.abs(r1 - r2).max() < 1e-5
    dx1, dg1, db1 = npk.group_norm_bwd(dy, xh1, gamma, r1, groups)
    dx2, dg2, db2 = nb.group_norm_bwd(dy, xh2, gamma, r2, groups)
    assert np.abs(dx1 - dx2).max() < 1e-5
    assert np.abs(dg1 - dg2).max() < 1e-4
    assert np.abs(db1 - db2).max() < 1e-4


def test_adam_parity():
    n = 257
    p1 = RNG.normal(size=n).astype(np.float32)
    p2 = p1.copy()
    g = RNG.normal(size=n).astype(np.float32)
    m1, v1 = np.zeros(n, np.float32), np.zeros(n, np.float32)
    m2, v2 = np.zeros(n, np.float32), np.zeros(n, np.float32)
    for step in range(1, 4):
        bc1 = 1 - 0.9 ** step
        bc2 = 1 - 0.999 ** step
        npk.adam_step(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
        nb.adam_step(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, bc1, bc2)
    assert np.abs(p1 - p2).max() < 1e-6
    assert np.abs(m1 - m2).max() < 1e-6


def test_label_edges_parity():
    mask = RNG.integers(0, 4, (17, 23)).astype(np.uint8)
    assert np.array_equal(npk.label_edges(mask), nb.label_edges(mask))


def test_morphology_parity():
    mask = (RNG.random((25, 25)) > 0.6).astype(np.uint8)
    offs = np.array([(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)
                     if dy * dy + dx * dx <= 4], dtype=np.int64)
    assert np.array_equal(npk.binary_dilate(mask, offs), nb.binary_dilate(mask, offs))
    assert np.array_equal(npk.binary_erode(mask, offs), nb.binary_erode(mask, offs))


def test_connected_components_parity():
    mask = (RNG.random((30, 30)) > 0.55).astype(np.uint8)
    l1, n1 = npk.connected_components(mask)
    l2, n2 = nb.connected_components(mask)
    assert n1 == n2
    # labels may be assigned in different orders only if scan order differed;
    # both implementations scan row-major, so labels must match exactly
    assert np.array_equal(l1, l2)


def test_resize_parity():
    img = RNG.random((19, 27))
    assert np.abs(npk.bilinear_resize(img, 8, 10) - nb.bilinear_resize(img, 8, 10)).max() < 1e-12
    mask = RNG.integers(0, 5, (19, 27)).astype(np.uint8)
    assert np.array_equal(npk.nearest_resize(mask, 8, 10), nb.nearest_resize(mask, 8, 10))


def test_sepconv_parity():
    img = RNG.random((20, 22))
    k = np.exp(-np.linspace(-2, 2, 7) ** 2)
    k /= k.sum()
    a = npk.sepconv_valid(img, k)
    b = nb.sepconv_valid(img, k)
    assert a.shape == (14, 16)
    assert np.abs(a - b).max() < 1e-12


def test_env_flag_selects_numpy_backend():
    import os

    code = ("import semdiff.kernels as k; "
            "assert k.backend_name() == 'numpy', k.backend_name(); "
            "import numpy as np; "
            "m = np.array([[0,1],[1,1]], dtype=np.uint8); "
            "print(k.connected_components(m)[1])")
    env = dict(os.environ, SEMDIFF_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "1"


def test_default_backend_is_numba_here():
    import semdiff.kernels as k

    assert k.backend_name() == "numba"
