"""Benchmark the compiled kernel core against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5]

Sizes mirror real pipeline workloads (corpus rendering, chamfer metrics,
vertex painting, FID3D rasterization). Both routes compute identical bytes;
the timing difference is the whole point of shipping the extension.
"""

import argparse
import time

import numpy as np

from bodyforge.corpus import BLEND_RADIUS, CapsuleBody, sample_body_params
from bodyforge.fields import extract_mesh, project, frontal_camera
from bodyforge.kernels import reference

try:
    from bodyforge.kernels import _native as native
except ImportError:
    native = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if native is None:
        print("compiled kernels not built (pip install -e . builds them); "
              "nothing to compare")
        return

    body = CapsuleBody(sample_body_params(0))
    prims = (body.seg_a, body.seg_b, body.rad_a, body.rad_b)
    rng = np.random.default_rng(0)

    cases = []

    pts = rng.uniform(-1, 1, size=(262_144, 3))  # one 64^3 grid pass
    cases.append(("body_sdf 64^3 grid",
                  lambda m: m.body_sdf(pts, *prims, BLEND_RADIUS)))

    res = 128
    ii = np.arange(res, dtype=np.float64)
    px, py = np.meshgrid(ii, ii, indexing="xy")
    origins = np.stack([2 * px.ravel() / res - 1, 1 - 2 * py.ravel() / res,
                        np.full(res * res, 1.7)], axis=1)
    cases.append((f"raymarch {res}x{res} render",
                  lambda m: m.raymarch_body(origins, (0.0, 0.0, -1.0), *prims,
                                            BLEND_RADIUS)))

    a = rng.normal(size=(2048, 3))
    b = rng.normal(size=(2048, 3))
    cases.append(("nn_sqdist 2048x2048 (chamfer one way)",
                  lambda m: m.nn_sqdist(a, b)))

    mesh = extract_mesh(body.sdf, 64)
    cloud = rng.uniform(-1, 1, size=(20_000, 3))
    verts = mesh.vertices
    cases.append((f"nn_sqdist paint {len(verts)} verts x 20k cloud",
                  lambda m: m.nn_sqdist(verts, cloud)))

    cam = frontal_camera(128)
    xy, z = project(mesh.vertices, cam)
    colors = rng.uniform(0, 1, (len(verts), 3))
    faces = mesh.faces
    cases.append((f"rasterize {len(faces)} faces at 128^2",
                  lambda m: m.rasterize_mesh(xy, z, faces, colors, 128, 128)))

    print(f"{'kernel':45s} {'native':>10s} {'reference':>10s} {'speedup':>8s}")
    for name, fn in cases:
        t_nat, out_nat = timeit(lambda: fn(native), args.repeat)
        t_ref, out_ref = timeit(lambda: fn(reference), args.repeat)
        first_nat = out_nat[0] if isinstance(out_nat, tuple) else out_nat
        first_ref = out_ref[0] if isinstance(out_ref, tuple) else out_ref
        match = "" if np.array_equal(np.asarray(first_nat), np.asarray(first_ref)) \
            else "  [MISMATCH]"
        print(f"{name:45s} {t_nat * 1e3:8.1f}ms {t_ref * 1e3:8.1f}ms "
              f"{t_ref / t_nat:7.1f}x{match}")


if __name__ == "__main__":
    main()
