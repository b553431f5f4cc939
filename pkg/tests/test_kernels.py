"""Dual-route kernel checks: the compiled core must reproduce the numpy
reference bit-for-bit, and both must match independent brute-force oracles.
"""

import numpy as np
import pytest

from bodyforge.kernels import reference

try:
    from bodyforge.kernels import _native as native
except ImportError:
    native = None

needs_native = pytest.mark.skipif(native is None, reason="compiled kernels unavailable")


def _random_prims(rng, n=5):
    seg_a = rng.normal(size=(n, 3)) * 0.4
    seg_b = seg_a + rng.normal(size=(n, 3)) * 0.3
    seg_b[n // 2] = seg_a[n // 2]                # one sphere
    ra = rng.uniform(0.05, 0.25, n)
    rb = ra.copy()
    rb[0] = ra[0] * 0.5                          # one rounded cone
    return seg_a, seg_b, ra, rb


@needs_native
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_body_sdf_routes_bitexact(seed):
    rng = np.random.default_rng(seed)
    prims = _random_prims(rng)
    pts = rng.uniform(-1.5, 1.5, size=(3000, 3))
    d_ref = reference.body_sdf(pts, *prims, 0.02)
    d_nat = native.body_sdf(pts, *prims, 0.02)
    assert np.array_equal(d_ref, d_nat)
    # hard-min route too
    assert np.array_equal(reference.body_sdf(pts, *prims, 0.0),
                          native.body_sdf(pts, *prims, 0.0))


@needs_native
def test_nearest_primitive_routes_agree(rng):
    prims = _random_prims(rng)
    pts = rng.uniform(-1.5, 1.5, size=(2000, 3))
    assert np.array_equal(reference.body_nearest_primitive(pts, *prims),
                          native.body_nearest_primitive(pts, *prims))


@needs_native
def test_raymarch_routes_bitexact(rng):
    prims = _random_prims(rng)
    n = 400
    origins = np.stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), np.full(n, 1.7)], axis=1)
    t_r, h_r = reference.raymarch_body(origins, (0.0, 0.0, -1.0), *prims, 0.02)
    t_n, h_n = native.raymarch_body(origins, (0.0, 0.0, -1.0), *prims, 0.02)
    assert np.array_equal(t_r, t_n)
    assert np.array_equal(h_r, h_n)
    assert h_r.sum() > 0


@needs_native
def test_nn_routes_bitexact(rng):
    q = rng.normal(size=(257, 3))
    t = rng.normal(size=(1100, 3))
    d_r, i_r = reference.nn_sqdist(q, t)
    d_n, i_n = native.nn_sqdist(q, t)
    assert np.array_equal(d_r, d_n)
    assert np.array_equal(i_r, i_n)


@needs_native
def test_rasterize_routes_bitexact(rng):
    xy = rng.uniform(-5, 70, size=(60, 2))
    z = rng.uniform(-1, 1, 60)
    faces = rng.integers(0, 60, size=(80, 3))
    colors = rng.uniform(0, 1, (60, 3))
    img_r, z_r = reference.rasterize_mesh(xy, z, faces, colors, 64, 64)
    img_n, z_n = native.rasterize_mesh(xy, z, faces, colors, 64, 64)
    assert np.array_equal(img_r, img_n)
    assert np.array_equal(z_r, z_n)


def test_nn_against_bruteforce_with_ties():
    # three targets, two exactly equidistant from the query: lowest index wins
    q = np.array([[0.0, 0.0, 0.0]])
    t = np.array([[1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    d, i = reference.nn_sqdist(q, t)
    assert d[0] == 1.0 and i[0] == 0
    if native is not None:
        d2, i2 = native.nn_sqdist(q, t)
        assert d2[0] == 1.0 and i2[0] == 0


def test_nn_bruteforce_oracle(rng):
    q = rng.normal(size=(40, 3))
    t = rng.normal(size=(600, 3))
    d, i = reference.nn_sqdist(q, t)
    for k in range(len(q)):
        dists = [float((q[k, 0] - t[j, 0]) ** 2 + (q[k, 1] - t[j, 1]) ** 2
                       + (q[k, 2] - t[j, 2]) ** 2) for j in range(len(t))]
        best = min(range(len(t)), key=lambda j: dists[j])
        assert i[k] == best
        assert d[k] == dists[best]


def test_rasterize_against_pixelwise_oracle(rng):
    """Brute-force per-pixel point-in-triangle with painter-ordered z-buffer."""
    size = 24
    xy = rng.uniform(0, size, size=(12, 2))
    z = rng.uniform(-1, 1, 12)
    faces = rng.integers(0, 12, size=(10, 3))
    colors = rng.uniform(0, 1, (12, 3))
    img, zbuf = reference.rasterize_mesh(xy, z, faces, colors, size, size)

    exp = np.ones((size, size, 3))
    expz = np.full((size, size), -np.inf)
    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        (x0, y0), (x1, y1), (x2, y2) = xy[i0], xy[i1], xy[i2]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if denom == 0.0:
            continue
        for py in range(size):
            for px in range(size):
                l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / denom
                l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / denom
                l2 = 1.0 - l0 - l1
                if l0 >= 0 and l1 >= 0 and l2 >= 0:
                    depth = l0 * z[i0] + l1 * z[i1] + l2 * z[i2]
                    if depth > expz[py, px]:
                        expz[py, px] = depth
                        exp[py, px] = (l0 * colors[i0] + l1 * colors[i1] + l2 * colors[i2])
    assert np.allclose(img, exp, atol=1e-12)
    fg = np.isfinite(expz)
    assert np.array_equal(zbuf[fg], expz[fg])


def test_raymarch_sphere_analytic():
    """Single sphere: hit depth must match the closed-form intersection."""
    seg_a = np.array([[0.0, 0.0, 0.0]])
    seg_b = seg_a.copy()
    ra = rb = np.array([0.5])
    origins = np.array([[0.0, 0.0, 1.7], [0.3, 0.0, 1.7], [0.9, 0.0, 1.7]])
    t, hit = reference.raymarch_body(origins, (0, 0, -1.0), seg_a, seg_b, ra, rb, 0.0)
    assert list(hit) == [True, True, False]
    exp0 = 1.7 - np.sqrt(0.25)          # z where the ray meets the sphere
    exp1 = 1.7 - np.sqrt(0.25 - 0.09)
    assert abs(t[0] - exp0) < 5e-4
    assert abs(t[1] - exp1) < 5e-4


def test_forced_reference_backend(tmp_path):
    import subprocess
    import sys

    code = "import bodyforge.kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code],
                         env={"PATH": "/usr/bin:/bin", "BODYFORGE_KERNELS": "reference"},
                         capture_output=True, text=True, cwd=str(tmp_path))
    assert out.stdout.strip() == "reference"
