# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels. Semantics (including float op order) mirror
kernels/reference.py exactly; build flags disable FP contraction so both
routes produce identical bytes."""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, sqrt

cnp.import_array()

BACKEND = "native"

cdef inline double _sign(double x) nogil:
    return (x > 0.0) - (x < 0.0)

cdef inline double _clamp01(double x) nogil:
    if x < 0.0:
        return 0.0
    if x > 1.0:
        return 1.0
    return x


cdef double _prim_dist_one(double px, double py, double pz,
                           double ax, double ay, double az,
                           double bx, double by, double bz,
                           double ra, double rb, int kind) nogil:
    cdef double pax = px - ax
    cdef double pay = py - ay
    cdef double paz = pz - az
    cdef double bax, bay, baz, l2, y, h, dx, dy, dz
    cdef double rr, a2, il2, z, vx, vy, vz, x2, y2, z2, k
    if kind == 0:  # sphere
        return sqrt(pax * pax + pay * pay + paz * paz) - ra
    bax = bx - ax
    bay = by - ay
    baz = bz - az
    l2 = bax * bax + bay * bay + baz * baz
    y = pax * bax + pay * bay + paz * baz
    if kind == 1:  # capsule
        h = _clamp01(y / l2)
        dx = pax - bax * h
        dy = pay - bay * h
        dz = paz - baz * h
        return sqrt(dx * dx + dy * dy + dz * dz) - ra
    # rounded cone
    rr = ra - rb
    a2 = l2 - rr * rr
    il2 = 1.0 / l2
    z = y - l2
    vx = pax * l2 - bax * y
    vy = pay * l2 - bay * y
    vz = paz * l2 - baz * y
    x2 = vx * vx + vy * vy + vz * vz
    y2 = y * y * l2
    z2 = z * z * l2
    k = _sign(rr) * rr * rr * x2
    if _sign(z) * a2 * z2 > k:
        return sqrt(x2 + z2) * il2 - rb
    if _sign(y) * a2 * y2 < k:
        return sqrt(x2 + y2) * il2 - ra
    return (sqrt(x2 * a2 * il2) + y * rr) * il2 - ra


cdef double _body_sdf_one(double px, double py, double pz,
                          double[:, ::1] seg_a, double[:, ::1] seg_b,
                          double[::1] rad_a, double[::1] rad_b,
                          int[::1] kinds, double blend) nogil:
    cdef int i
    cdef double d, di, h
    d = _prim_dist_one(px, py, pz, seg_a[0, 0], seg_a[0, 1], seg_a[0, 2],
                       seg_b[0, 0], seg_b[0, 1], seg_b[0, 2],
                       rad_a[0], rad_b[0], kinds[0])
    for i in range(1, seg_a.shape[0]):
        di = _prim_dist_one(px, py, pz, seg_a[i, 0], seg_a[i, 1], seg_a[i, 2],
                            seg_b[i, 0], seg_b[i, 1], seg_b[i, 2],
                            rad_a[i], rad_b[i], kinds[i])
        if blend > 0.0:
            h = _clamp01(0.5 + 0.5 * (di - d) / blend)
            d = di + (d - di) * h - blend * h * (1.0 - h)
        else:
            if di < d:
                d = di
    return d


def _prims(seg_a, seg_b, rad_a, rad_b):
    from .reference import primitive_kinds
    a = np.ascontiguousarray(seg_a, dtype=np.float64)
    b = np.ascontiguousarray(seg_b, dtype=np.float64)
    ra = np.ascontiguousarray(rad_a, dtype=np.float64)
    rb = np.ascontiguousarray(rad_b, dtype=np.float64)
    kinds = primitive_kinds(a, b, ra, rb)
    return a, b, ra, rb, np.ascontiguousarray(kinds)


def body_sdf(points, seg_a, seg_b, rad_a, rad_b, double blend):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pts = np.ascontiguousarray(
        np.asarray(points, dtype=np.float64).reshape(-1, 3))
    a, b, ra, rb, kinds = _prims(seg_a, seg_b, rad_a, rad_b)
    cdef double[:, ::1] av = a
    cdef double[:, ::1] bv = b
    cdef double[::1] rav = ra
    cdef double[::1] rbv = rb
    cdef int[::1] kv = kinds
    cdef Py_ssize_t n = pts.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] pv = pts
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _body_sdf_one(pv[i, 0], pv[i, 1], pv[i, 2], av, bv, rav, rbv, kv, blend)
    return out


def body_nearest_primitive(points, seg_a, seg_b, rad_a, rad_b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pts = np.ascontiguousarray(
        np.asarray(points, dtype=np.float64).reshape(-1, 3))
    a, b, ra, rb, kinds = _prims(seg_a, seg_b, rad_a, rad_b)
    cdef double[:, ::1] av = a
    cdef double[:, ::1] bv = b
    cdef double[::1] rav = ra
    cdef double[::1] rbv = rb
    cdef int[::1] kv = kinds
    cdef Py_ssize_t n = pts.shape[0], i
    cdef int p, nprim = av.shape[0]
    cdef double best, di
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] pv = pts
    cdef cnp.int64_t[::1] iv = idx
    with nogil:
        for i in range(n):
            best = _prim_dist_one(pv[i, 0], pv[i, 1], pv[i, 2],
                                  av[0, 0], av[0, 1], av[0, 2],
                                  bv[0, 0], bv[0, 1], bv[0, 2],
                                  rav[0], rbv[0], kv[0])
            for p in range(1, nprim):
                di = _prim_dist_one(pv[i, 0], pv[i, 1], pv[i, 2],
                                    av[p, 0], av[p, 1], av[p, 2],
                                    bv[p, 0], bv[p, 1], bv[p, 2],
                                    rav[p], rbv[p], kv[p])
                if di < best:
                    best = di
                    iv[i] = p
    return idx


def raymarch_body(origins, direction, seg_a, seg_b, rad_a, rad_b, double blend,
                  double eps=1e-4, double min_step=1e-4, int max_steps=256,
                  double t_max=4.0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] orig = np.ascontiguousarray(
        np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dirv = np.ascontiguousarray(
        np.asarray(direction, dtype=np.float64).reshape(3))
    a, b, ra, rb, kinds = _prims(seg_a, seg_b, rad_a, rad_b)
    cdef double[:, ::1] av = a
    cdef double[:, ::1] bv = b
    cdef double[::1] rav = ra
    cdef double[::1] rbv = rb
    cdef int[::1] kv = kinds
    cdef Py_ssize_t n = orig.shape[0], i
    cdef int s
    cdef double t, d, px, py, pz
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t_out = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] hit = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] ov = orig
    cdef double[::1] dv = dirv
    cdef double[::1] tv = t_out
    cdef cnp.uint8_t[::1] hv = hit
    with nogil:
        for i in range(n):
            t = 0.0
            for s in range(max_steps):
                px = ov[i, 0] + t * dv[0]
                py = ov[i, 1] + t * dv[1]
                pz = ov[i, 2] + t * dv[2]
                d = _body_sdf_one(px, py, pz, av, bv, rav, rbv, kv, blend)
                if d < eps:
                    hv[i] = 1
                    break
                t = t + (d if d > min_step else min_step)
                if t > t_max:
                    break
            tv[i] = t
    return t_out, hit.astype(bool)


def nn_sqdist(query, targets, chunk=512):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = np.ascontiguousarray(
        np.asarray(query, dtype=np.float64).reshape(-1, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tg = np.ascontiguousarray(
        np.asarray(targets, dtype=np.float64).reshape(-1, 3))
    cdef Py_ssize_t n = q.shape[0], m = tg.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best = np.full(n, np.inf, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] bidx = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] qv = q
    cdef double[:, ::1] tv = tg
    cdef double[::1] bv = best
    cdef cnp.int64_t[::1] iv = bidx
    cdef double dx, dy, dz, d2
    with nogil:
        for i in range(n):
            for j in range(m):
                dx = qv[i, 0] - tv[j, 0]
                dy = qv[i, 1] - tv[j, 1]
                dz = qv[i, 2] - tv[j, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 < bv[i]:
                    bv[i] = d2
                    iv[i] = j
    return best, bidx


def rasterize_mesh(xy, z, faces, colors, int height, int width, double background=1.0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xyv_ = np.ascontiguousarray(np.asarray(xy, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] zv_ = np.ascontiguousarray(np.asarray(z, dtype=np.float64))
    cdef cnp.ndarray[cnp.int64_t, ndim=2] fv_ = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cv_ = np.ascontiguousarray(np.asarray(colors, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] img = np.full((height, width, 3), background, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zbuf = np.full((height, width), -np.inf, dtype=np.float64)
    cdef double[:, ::1] xyv = xyv_
    cdef double[::1] zv = zv_
    cdef cnp.int64_t[:, ::1] fv = fv_
    cdef double[:, ::1] cv = cv_
    cdef double[:, :, ::1] iv = img
    cdef double[:, ::1] zb = zbuf
    cdef Py_ssize_t f, nf = fv.shape[0]
    cdef cnp.int64_t i0, i1, i2
    cdef double x0, y0, x1, y1, x2, y2, denom, l0, l1, l2, depth, mn, mx
    cdef int xmin, xmax, ymin, ymax, px, py
    with nogil:
        for f in range(nf):
            i0 = fv[f, 0]
            i1 = fv[f, 1]
            i2 = fv[f, 2]
            x0 = xyv[i0, 0]
            y0 = xyv[i0, 1]
            x1 = xyv[i1, 0]
            y1 = xyv[i1, 1]
            x2 = xyv[i2, 0]
            y2 = xyv[i2, 1]
            denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
            if denom == 0.0:
                continue
            mn = x0
            if x1 < mn: mn = x1
            if x2 < mn: mn = x2
            mx = x0
            if x1 > mx: mx = x1
            if x2 > mx: mx = x2
            xmin = <int>ceil(mn)
            xmax = <int>floor(mx)
            if xmin < 0: xmin = 0
            if xmax > width - 1: xmax = width - 1
            mn = y0
            if y1 < mn: mn = y1
            if y2 < mn: mn = y2
            mx = y0
            if y1 > mx: mx = y1
            if y2 > mx: mx = y2
            ymin = <int>ceil(mn)
            ymax = <int>floor(mx)
            if ymin < 0: ymin = 0
            if ymax > height - 1: ymax = height - 1
            if xmin > xmax or ymin > ymax:
                continue
            for py in range(ymin, ymax + 1):
                for px in range(xmin, xmax + 1):
                    l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / denom
                    l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / denom
                    l2 = 1.0 - l0 - l1
                    if l0 >= 0.0 and l1 >= 0.0 and l2 >= 0.0:
                        depth = l0 * zv[i0] + l1 * zv[i1] + l2 * zv[i2]
                        if depth > zb[py, px]:
                            iv[py, px, 0] = l0 * cv[i0, 0] + l1 * cv[i1, 0] + l2 * cv[i2, 0]
                            iv[py, px, 1] = l0 * cv[i0, 1] + l1 * cv[i1, 1] + l2 * cv[i2, 1]
                            iv[py, px, 2] = l0 * cv[i0, 2] + l1 * cv[i1, 2] + l2 * cv[i2, 2]
                            zb[py, px] = depth
    return img, zbuf
