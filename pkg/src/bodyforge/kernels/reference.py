"""Pure-numpy kernels: the fallback route when the compiled extension is
unavailable, and the semantic reference it must reproduce bit-for-bit.

All kernels run in float64 with pinned operation order so the compiled
route (built with plain -O3, no fast-math) produces identical bytes.
"""

from __future__ import annotations

import numpy as np

BACKEND = "reference"

# primitive kinds derived from (segment, radii)
_K_SPHERE = 0
_K_CAPSULE = 1
_K_CONE = 2


def primitive_kinds(seg_a: np.ndarray, seg_b: np.ndarray, rad_a: np.ndarray, rad_b: np.ndarray) -> np.ndarray:
    ba = seg_b - seg_a
    l2 = (ba * ba).sum(axis=1)
    kinds = np.where(l2 < 1e-24, _K_SPHERE, np.where(rad_a == rad_b, _K_CAPSULE, _K_CONE))
    return kinds.astype(np.int32)


def _prim_dist(p: np.ndarray, a, b, ra, rb, kind: int) -> np.ndarray:
    """Distance from points p (N,3) to one primitive. Fixed op order."""
    pax = p[:, 0] - a[0]
    pay = p[:, 1] - a[1]
    paz = p[:, 2] - a[2]
    if kind == _K_SPHERE:
        return np.sqrt(pax * pax + pay * pay + paz * paz) - ra
    bax = b[0] - a[0]
    bay = b[1] - a[1]
    baz = b[2] - a[2]
    l2 = bax * bax + bay * bay + baz * baz
    y = pax * bax + pay * bay + paz * baz
    if kind == _K_CAPSULE:
        h = np.clip(y / l2, 0.0, 1.0)
        dx = pax - bax * h
        dy = pay - bay * h
        dz = paz - baz * h
        return np.sqrt(dx * dx + dy * dy + dz * dz) - ra
    # rounded cone (differing end radii)
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
    k = np.sign(rr) * rr * rr * x2
    d_low = np.sqrt(x2 + z2) * il2 - rb
    d_high = np.sqrt(x2 + y2) * il2 - ra
    d_mid = (np.sqrt(x2 * a2 * il2) + y * rr) * il2 - ra
    out = np.where(np.sign(z) * a2 * z2 > k, d_low,
                   np.where(np.sign(y) * a2 * y2 < k, d_high, d_mid))
    return out


def body_sdf(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray,
             rad_a: np.ndarray, rad_b: np.ndarray, blend: float) -> np.ndarray:
    """Smooth-min union over primitives, folded in array order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kinds = primitive_kinds(seg_a, seg_b, rad_a, rad_b)
    d = _prim_dist(points, seg_a[0], seg_b[0], rad_a[0], rad_b[0], int(kinds[0]))
    for i in range(1, len(seg_a)):
        di = _prim_dist(points, seg_a[i], seg_b[i], rad_a[i], rad_b[i], int(kinds[i]))
        if blend > 0.0:
            h = np.clip(0.5 + 0.5 * (di - d) / blend, 0.0, 1.0)
            d = di + (d - di) * h - blend * h * (1.0 - h)
        else:
            d = np.minimum(di, d)
    return d


def body_nearest_primitive(points: np.ndarray, seg_a, seg_b, rad_a, rad_b) -> np.ndarray:
    """Index of the closest primitive (hard min, first index wins ties)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    kinds = primitive_kinds(seg_a, seg_b, rad_a, rad_b)
    best = _prim_dist(points, seg_a[0], seg_b[0], rad_a[0], rad_b[0], int(kinds[0]))
    idx = np.zeros(len(points), dtype=np.int64)
    for i in range(1, len(seg_a)):
        di = _prim_dist(points, seg_a[i], seg_b[i], rad_a[i], rad_b[i], int(kinds[i]))
        better = di < best
        best = np.where(better, di, best)
        idx = np.where(better, i, idx)
    return idx


def raymarch_body(origins: np.ndarray, direction: np.ndarray, seg_a, seg_b, rad_a, rad_b,
                  blend: float, eps: float = 1e-4, min_step: float = 1e-4,
                  max_steps: int = 256, t_max: float = 4.0):
    """Sphere-trace rays origin + t*direction against the body SDF.

    Returns (t, hit). A ray that fails to converge within max_steps is
    reported as a miss. Per-ray step sequences are independent, so the
    vectorized route matches a scalar loop exactly.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    n = len(origins)
    t = np.zeros(n, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * direction[None, :]
        d = body_sdf(p, seg_a, seg_b, rad_a, rad_b, blend)
        converged = d < eps
        hit[idx[converged]] = True
        active[idx[converged]] = False
        rest = idx[~converged]
        step = d[~converged]
        step = np.where(step > min_step, step, min_step)
        t[rest] = t[rest] + step
        escaped = t[rest] > t_max
        active[rest[escaped]] = False
    return t, hit


def nn_sqdist(query: np.ndarray, targets: np.ndarray, chunk: int = 512):
    """For each query point: min squared euclidean distance into targets and
    the index of the first minimizer."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    n = len(query)
    best = np.full(n, np.inf, dtype=np.float64)
    best_idx = np.zeros(n, dtype=np.int64)
    for start in range(0, len(targets), chunk):
        block = targets[start:start + chunk]
        dx = query[:, 0:1] - block[None, :, 0]
        dy = query[:, 1:2] - block[None, :, 1]
        dz = query[:, 2:3] - block[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        cmin = d2.min(axis=1)
        cidx = d2.argmin(axis=1)
        better = cmin < best
        best = np.where(better, cmin, best)
        best_idx = np.where(better, start + cidx, best_idx)
    return best, best_idx


def rasterize_mesh(xy: np.ndarray, z: np.ndarray, faces: np.ndarray, colors: np.ndarray,
                   height: int, width: int, background: float = 1.0):
    """Orthographic z-buffer rasterizer with per-vertex color interpolation.

    xy: (V,2) continuous pixel coords (integer pixel centers); z: (V,) camera
    depth, larger = closer. Faces drawn in order; strictly-closer fragments
    win, so ties keep the earlier face.
    """
    xy = np.asarray(xy, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    img = np.full((height, width, 3), background, dtype=np.float64)
    zbuf = np.full((height, width), -np.inf, dtype=np.float64)
    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        x0, y0 = xy[i0]
        x1, y1 = xy[i1]
        x2, y2 = xy[i2]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if denom == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        px = np.arange(xmin, xmax + 1, dtype=np.float64)[None, :]
        py = np.arange(ymin, ymax + 1, dtype=np.float64)[:, None]
        l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / denom
        l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / denom
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        depth = l0 * z[i0] + l1 * z[i1] + l2 * z[i2]
        sub = zbuf[ymin:ymax + 1, xmin:xmax + 1]
        closer = inside & (depth > sub)
        if not closer.any():
            continue
        for c in range(3):
            col = l0 * colors[i0, c] + l1 * colors[i1, c] + l2 * colors[i2, c]
            ch = img[ymin:ymax + 1, xmin:xmax + 1, c]
            ch[closer] = col[closer]
        sub[closer] = depth[closer]
    return img, zbuf
