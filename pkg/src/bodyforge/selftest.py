"""Quick self-contained oracle and invariant checks, runnable without a
trained pipeline (CLI `selftest`). Each check raises AssertionError on
failure; the runner prints one pass/fail line per property.
"""

from __future__ import annotations

import numpy as np
import torch


def check_loss_oracles():
    from .shape_branch import ShapeLossWeights, loss_latent_prior, loss_sdf, shape_total_loss
    from .texture_branch import loss_rgb

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=64), rng.normal(size=64)
    assert abs(float(loss_sdf(a, b)) - np.mean(np.abs(a - b))) < 1e-6
    fa, fb = rng.normal(size=(4, 8, 8)).astype(np.float32), rng.normal(size=(4, 8, 8)).astype(np.float32)
    assert abs(float(loss_latent_prior(fa, fb)) - np.mean(np.abs(fa - fb))) < 1e-6
    ca, cb = rng.uniform(size=(32, 3)), rng.uniform(size=(32, 3))
    assert abs(float(loss_rgb(ca, cb)) - np.mean(np.abs(ca - cb))) < 1e-6
    parts = {k: torch.tensor(1.0) for k in ("sdf", "sv", "normal", "depth", "adv")}
    assert abs(float(shape_total_loss(parts, ShapeLossWeights())) - 101.0) < 1e-9


def check_frechet_analytic():
    from .evaluation import GaussianStats, frechet

    d0 = GaussianStats(np.zeros(2), np.eye(2))
    d1 = GaussianStats(np.array([3.0, 4.0]), np.eye(2))
    assert abs(frechet(d0, d0)) < 1e-6
    assert abs(frechet(d0, d1) - 25.0) < 1e-6
    d2 = GaussianStats(np.zeros(2), 4.0 * np.eye(2))
    assert abs(frechet(d2, d0) - 2.0) < 1e-6
    assert abs(frechet(d0, d2) - frechet(d2, d0)) < 1e-8


def check_chamfer_bruteforce():
    from .evaluation import chamfer

    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
    d_ab = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    expected = d_ab.min(1).mean() + d_ab.min(0).mean()
    assert chamfer(a, b) == expected
    assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0


def check_projection_roundtrip():
    from .fields import azimuth_camera, backproject, project

    cam = azimuth_camera(128, 0.7)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(64, 3))
    xy, d = project(pts, cam)
    back = backproject(xy, d, cam)
    assert np.abs(back - pts).max() < 1e-6


def check_sphere_extraction():
    from .fields import extract_mesh, mesh_volume

    mesh = extract_mesh(lambda p: np.linalg.norm(p, axis=1) - 0.5, 64)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(radii - 0.5).max() <= 2 * (2 / 64) * np.sqrt(3)
    assert abs(mesh_volume(mesh) - (4 / 3) * np.pi * 0.125) < 0.05 * (4 / 3) * np.pi * 0.125


def check_kernel_routes_agree():
    from .kernels import BACKEND, reference
    if BACKEND != "native":
        return  # single active route; nothing to cross-check
    from .kernels import _native as native

    rng = np.random.default_rng(3)
    seg_a = rng.normal(size=(4, 3)) * 0.3
    seg_b = seg_a + rng.normal(size=(4, 3)) * 0.2
    ra = rng.uniform(0.05, 0.2, 4)
    rb = ra.copy()
    rb[0] *= 0.5
    pts = rng.uniform(-1.2, 1.2, size=(500, 3))
    assert np.array_equal(native.body_sdf(pts, seg_a, seg_b, ra, rb, 0.02),
                          reference.body_sdf(pts, seg_a, seg_b, ra, rb, 0.02))
    q, t = rng.normal(size=(50, 3)), rng.normal(size=(80, 3))
    dn, jn = native.nn_sqdist(q, t)
    dr, jr = reference.nn_sqdist(q, t)
    assert np.array_equal(dn, dr) and np.array_equal(jn, jr)


def check_bilinear_centers():
    from .fields import sample_bilinear

    rng = np.random.default_rng(4)
    data = rng.normal(size=(3, 8, 8)).astype(np.float32)
    v = sample_bilinear(data, np.array([5.0, 2.0]))
    assert np.array_equal(v.astype(np.float32), data[:, 2, 5])
    mid = sample_bilinear(data, np.array([5.5, 2.0]))
    assert np.abs(mid - (data[:, 2, 5].astype(float) + data[:, 2, 6]) / 2).max() < 1e-6


def check_ply_roundtrip(tmp_dir=None):
    import tempfile
    from pathlib import Path

    from .fields import TexturedMesh, load_ply, save_ply

    mesh = TexturedMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                        np.array([[0, 1, 2]]),
                        np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]))
    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        path = Path(d) / "m.ply"
        save_ply(path, mesh)
        back = load_ply(path)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-5
    assert np.array_equal(back.faces, mesh.faces)
    assert np.abs(back.vertex_colors - mesh.vertex_colors).max() < 1 / 254


CHECKS = [
    ("loss-oracles", check_loss_oracles),
    ("frechet-analytic", check_frechet_analytic),
    ("chamfer-bruteforce", check_chamfer_bruteforce),
    ("projection-roundtrip", check_projection_roundtrip),
    ("sphere-extraction", check_sphere_extraction),
    ("kernel-routes-agree", check_kernel_routes_agree),
    ("bilinear-pixel-centers", check_bilinear_centers),
    ("ply-roundtrip", check_ply_roundtrip),
]


def run_selftest(print_fn=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            print_fn(f"PASS {name}")
        except Exception as e:  # noqa: BLE001 - report any failure and continue
            ok = False
            print_fn(f"FAIL {name}: {e}")
    return ok
