import numpy as np
import pytest

from bodyforge import kernels
from bodyforge.corpus import (CapsuleBody, CorpusSet, eval_body_sdf, generate_corpus,
                              render_orthographic, sample_body_params, split_counts)
from bodyforge.errors import ContractViolation
from bodyforge.fields import azimuth_camera, backproject, extract_mesh, frontal_camera
from bodyforge.fileio import file_checksum


def test_params_deterministic():
    a = sample_body_params(7)
    b = sample_body_params(7)
    assert a.to_dict() == b.to_dict()


def test_params_distinct_across_seeds():
    colors = {tuple(np.asarray(sample_body_params(s).region_colors).ravel()) for s in range(1000)}
    assert len(colors) >= 990


@pytest.mark.parametrize("seed", range(12))
def test_body_bbox_inside_canonical_margin(seed):
    body = CapsuleBody(sample_body_params(seed))
    lo, hi = body.bounding_box()
    assert (lo > -0.95).all() and (hi < 0.95).all()


def test_sdf_far_point_bounded():
    params = sample_body_params(0)
    p = np.array([10.0, 0.0, 0.0])
    v = eval_body_sdf(p, params)
    assert 8.0 <= v <= 10.0


def test_sdf_torso_center_negative():
    params = sample_body_params(1)
    body = CapsuleBody(params)
    center = (body.seg_a[0] + body.seg_b[0]) / 2.0
    assert body.sdf(center[None])[0] < 0


def test_sdf_matches_dense_mesh_distance():
    """Brute-force oracle: |sdf(p)| vs distance to a dense marching-cubes
    extraction (256^3), within 2 voxel diagonals.

    Exact two-sided agreement holds outside the body; inside, a primitive
    union is inherently conservative at overlaps (joint regions), so |sdf|
    may undershoot interior depth but must never exceed it."""
    params = sample_body_params(5)
    body = CapsuleBody(params)
    res = 256
    mesh = extract_mesh(body.sdf, res)
    assert not mesh.is_empty
    # densify: surface samples bound point-to-surface distance within ~1 voxel
    from bodyforge.fields import sample_mesh_surface
    surf = sample_mesh_surface(mesh, 200_000, np.random.default_rng(0)).points
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(2000, 3))
    d2, _ = kernels.nn_sqdist(pts, surf)
    mesh_dist = np.sqrt(d2)
    sd = body.sdf(pts)
    tol = 2.0 * (2.0 / res) * np.sqrt(3)
    outside = sd >= 0
    assert np.abs(sd[outside] - mesh_dist[outside]).max() < tol
    assert (np.abs(sd[~outside]) - mesh_dist[~outside]).max() < tol


def test_color_membership_on_surface_points():
    params = sample_body_params(3)
    body = CapsuleBody(params)
    mesh = extract_mesh(body.sdf, 96)
    from bodyforge.fields import sample_mesh_surface
    pts = sample_mesh_surface(mesh, 10_000, np.random.default_rng(0)).points
    cols = body.color(pts)
    palette = np.asarray(params.region_colors)
    match = (np.abs(cols[:, None, :] - palette[None, :, :]).max(axis=2) < 1e-12).any(axis=1)
    assert match.all()


def test_color_torso_shirt_and_head_regions():
    params = sample_body_params(2)
    assert params.garment_offsets[0] > 0
    body = CapsuleBody(params)
    torso_mid = (body.seg_a[0] + body.seg_b[0]) / 2.0
    # push to the torso surface along +z
    p = torso_mid + np.array([0.0, 0.0, 1.0]) * body.rad_a[0]
    col = body.color(p[None])[0]
    assert np.allclose(col, params.region_colors[2])  # shirt
    head_top = body.seg_b[1] + np.array([0.0, body.rad_b[1], 0.0])
    col_head = body.color(head_top[None])[0]
    ok_skin = np.allclose(col_head, params.region_colors[0])
    ok_hair = np.allclose(col_head, params.region_colors[1])
    assert ok_skin or ok_hair


def test_render_all_background_when_body_out_of_frame():
    params = sample_body_params(0)
    body = CapsuleBody(params)
    body.seg_a = body.seg_a + np.array([50.0, 0.0, 0.0])  # move out of every ray's reach
    body.seg_b = body.seg_b + np.array([50.0, 0.0, 0.0])
    sample = render_orthographic(params, frontal_camera(64), 64, body=body)
    assert not sample.mask.any()
    assert np.all(sample.depth == 1.0)
    assert np.allclose(sample.rgb, 1.0)
    assert np.allclose(sample.normal, [0.0, 0.0, 1.0])


def test_render_corner_pixels_background():
    sample = render_orthographic(sample_body_params(0), azimuth_camera(64, 0.0), 64)
    for y, x in ((0, 0), (0, 63), (63, 0), (63, 63)):
        assert not sample.mask[y, x]
        assert sample.depth[y, x] == 1.0
        assert np.allclose(sample.rgb[y, x], 1.0)
        assert np.allclose(sample.normal[y, x], [0, 0, 1])


def test_render_mask_fraction_and_invariants():
    for seed in range(4):
        params = sample_body_params(seed)
        s = render_orthographic(params, frontal_camera(64), 64)
        frac = s.mask.mean()
        assert 0.05 < frac < 0.6
        assert np.array_equal(s.mask, s.depth < 1.0)
        norms = np.linalg.norm(s.normal[s.mask], axis=1)
        assert norms.min() > 1 - 1e-4 and norms.max() < 1 + 1e-4


def test_render_depth_backprojects_to_surface():
    params = sample_body_params(9)
    res = 128
    s = render_orthographic(params, frontal_camera(res), res)
    ys, xs = np.nonzero(s.mask)
    pts = backproject(np.stack([xs, ys], 1).astype(float), s.depth[ys, xs], s.view)
    assert np.abs(eval_body_sdf(pts, params)).max() < 2.0 / res


def test_render_normals_match_fd_gradient():
    params = sample_body_params(4)
    res = 64
    s = render_orthographic(params, frontal_camera(res), res)
    body = CapsuleBody(params)
    ys, xs = np.nonzero(s.mask)
    pts = backproject(np.stack([xs, ys], 1).astype(float), s.depth[ys, xs], s.view)
    grad = np.zeros_like(pts)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = 1e-3
        grad[:, ax] = body.sdf(pts + e) - body.sdf(pts - e)
    grad /= np.linalg.norm(grad, axis=1, keepdims=True)
    cosang = np.clip((grad * s.normal[ys, xs]).sum(1), -1, 1)
    angles = np.degrees(np.arccos(cosang))
    assert (angles < 5.0).mean() >= 0.99


def test_render_rejects_bad_resolution():
    with pytest.raises(ContractViolation):
        render_orthographic(sample_body_params(0), frontal_camera(32), 32)


def test_split_counts_rules():
    assert split_counts(2000) == (1900, 100)
    assert split_counts(1) == (1, 0)
    assert split_counts(10) == (9, 1)


def test_generate_corpus_deterministic(tmp_path):
    m1 = generate_corpus(6, 3, tmp_path / "a", 64)
    m2 = generate_corpus(6, 3, tmp_path / "b", 64)
    assert m1["samples"] == m2["samples"]
    for entry in m1["samples"]:
        for fname in ("rgb.f32", "depth.f32", "normal.f32", "mask.u8", "manifest.json"):
            assert file_checksum(tmp_path / "a" / entry["name"] / fname) == \
                file_checksum(tmp_path / "b" / entry["name"] / fname)
    assert file_checksum(tmp_path / "a" / "manifest.json") == \
        file_checksum(tmp_path / "b" / "manifest.json")


def test_generate_corpus_split_and_seeds(tmp_path):
    m = generate_corpus(21, 0, tmp_path / "c", 64)
    assert m["n_train"] == 19 and m["n_eval"] == 2
    seeds = [e["seed"] for e in m["samples"]]
    assert len(set(seeds)) == len(seeds)
    train_seeds = {e["seed"] for e in m["samples"] if e["split"] == "train"}
    eval_seeds = {e["seed"] for e in m["samples"] if e["split"] == "eval"}
    assert not train_seeds & eval_seeds


def test_generate_corpus_degenerate_single(tmp_path):
    m = generate_corpus(1, 0, tmp_path / "d", 64)
    assert m["n_train"] == 1 and m["n_eval"] == 0


def test_generate_corpus_unwritable():
    with pytest.raises(RuntimeError, match="/proc"):
        generate_corpus(1, 0, "/proc/bodyforge_nope", 64)


def test_corpus_roundtrip(tmp_path):
    generate_corpus(3, 1, tmp_path / "e", 64)
    cs = CorpusSet(tmp_path / "e")
    assert len(cs) == 3
    s = cs.load(0)
    assert s.rgb.shape == (64, 64, 3)
    assert s.depth.shape == (64, 64)
    assert s.mask.dtype == bool
    params = cs.params(0)
    fresh = render_orthographic(params, s.view, 64)
    assert np.array_equal(fresh.rgb, s.rgb)
    assert np.array_equal(fresh.depth, s.depth)
