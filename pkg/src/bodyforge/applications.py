"""Downstream capabilities on a trained pipeline: textured-mesh generation,
re-texturing under a fixed shape code, latent interpolation, and inversion
of a reference image by matching teacher-extracted field features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .decoders import FieldDecoder, query_color, query_sdf
from .errors import ContractViolation
from .fields import TexturedMesh, extract_mesh, frontal_camera, paint_mesh
from .fileio import sample_seed
from .prior import Reconstructor, reconstruct
from .refinement import RefinerNet, refine_textured_mesh
from .shape_branch import ShapeGenerator, generate_shape
from .texture_branch import TextureGenerator, generate_texture


@dataclass
class GeneratorState:
    """Frozen nets + config needed for inference."""

    cfg: RunConfig
    shape_gen: ShapeGenerator
    tex_gen: TextureGenerator
    f_s: FieldDecoder
    f_t: FieldDecoder
    refiner: RefinerNet | None = None
    recon: Reconstructor | None = None

    def fields(self, z_s: np.ndarray, z_t: np.ndarray):
        """(F_s, F_sv, F_t, F_tv) feature maps for one latent pair."""
        f_s_map, f_sv = generate_shape(self.shape_gen, z_s)
        f_t_map, f_tv = generate_texture(self.tex_gen, z_t, f_s_map)
        return f_s_map, f_sv, f_t_map, f_tv

    def alignment(self):
        return frontal_camera(self.cfg.feature_size)


def generate(state: GeneratorState, z_s: np.ndarray, z_t: np.ndarray,
             mesh_resolution: int | None = None, refine: bool = False) -> TexturedMesh:
    """Full forward: shape fields -> marching cubes -> per-vertex color,
    optionally repainted through the refinement module. An empty field
    yields an empty mesh, not an error."""
    if refine and state.refiner is None:
        raise ContractViolation("refine=True requires a trained refiner")
    res = mesh_resolution or state.cfg.mesh_grid
    _, f_sv, _, f_tv = state.fields(z_s, z_t)
    cam = state.alignment()
    mesh = extract_mesh(lambda p: query_sdf(f_sv, state.f_s, cam, p), res)
    if mesh.is_empty:
        return mesh
    if refine:
        return refine_textured_mesh(mesh, f_sv, f_tv, state.f_s, state.f_t,
                                    state.refiner, state.cfg.refine_views,
                                    state.cfg.image_size, state.cfg.render_grid)
    return paint_mesh(mesh, lambda p: query_color(f_tv, f_sv, state.f_t, cam, p))


def retexture(state: GeneratorState, z_s: np.ndarray, z_t_list,
              mesh_resolution: int | None = None) -> list[TexturedMesh]:
    """One mesh per texture code; geometry extracted once, so vertices and
    faces are bit-identical across the list."""
    res = mesh_resolution or state.cfg.mesh_grid
    f_s_map, f_sv = generate_shape(state.shape_gen, z_s)
    cam = state.alignment()
    base = extract_mesh(lambda p: query_sdf(f_sv, state.f_s, cam, p), res)
    out = []
    for z_t in z_t_list:
        if base.is_empty:
            out.append(TexturedMesh(base.vertices.copy(), base.faces.copy()))
            continue
        _, f_tv = generate_texture(state.tex_gen, z_t, f_s_map)
        out.append(paint_mesh(base, lambda p: query_color(f_tv, f_sv, state.f_t, cam, p)))
    return out


def interpolate(state: GeneratorState, z_a: np.ndarray, z_b: np.ndarray,
                steps: int, mesh_resolution: int | None = None) -> list[TexturedMesh]:
    """Linear latent interpolation applied to both branches; the endpoints
    reproduce direct generation exactly."""
    if steps < 2:
        raise ContractViolation("interpolation needs steps >= 2")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    meshes = []
    for k in range(steps):
        t = k / (steps - 1)
        z = (1.0 - t) * z_a + t * z_b
        meshes.append(generate(state, z, z, mesh_resolution))
    return meshes


@dataclass
class InversionResult:
    z_s: np.ndarray
    z_t: np.ndarray
    mesh: TexturedMesh
    final_loss: float
    initial_loss: float
    restart_losses: list = field(default_factory=list)
    chosen_restart: int = 0

    def to_dict(self) -> dict:
        return {"final_loss": self.final_loss, "initial_loss": self.initial_loss,
                "restart_losses": self.restart_losses, "chosen_restart": self.chosen_restart,
                "z_s": self.z_s.tolist(), "z_t": self.z_t.tolist()}


def _inversion_objective(state: GeneratorState, z_s: torch.Tensor, z_t: torch.Tensor,
                         fsv_target: torch.Tensor, ftv_target: torch.Tensor) -> torch.Tensor:
    f_s_img, f_sv = state.shape_gen(z_s)
    _, f_tv = state.tex_gen(z_t, f_s_img)
    return (f_sv - fsv_target).abs().mean() + (f_tv - ftv_target).abs().mean()


def invert(state: GeneratorState, prior: Reconstructor, reference_image: np.ndarray,
           seed: int = 0, steps: int | None = None, restarts: int | None = None,
           lr: float | None = None, mesh_resolution: int | None = None) -> InversionResult:
    """Search latent codes whose generated feature volumes match the
    teacher's extraction from the reference image (field-space objective,
    not image space). Multiple restarts; the best final loss wins."""
    cfg = state.cfg
    steps = steps or cfg.inv_steps
    restarts = restarts or cfg.inv_restarts
    lr = lr or cfg.inv_lr
    _, _, f_sv_gt, f_tv_gt = reconstruct(prior, reference_image)
    fsv_target = torch.from_numpy(f_sv_gt.data).unsqueeze(0)
    ftv_target = torch.from_numpy(f_tv_gt.data).unsqueeze(0)

    best = None
    restart_log = []
    for r in range(restarts):
        rng = np.random.default_rng(sample_seed(seed, r, "invert"))
        z_s = torch.from_numpy(rng.standard_normal((1, cfg.latent_dim))).float().requires_grad_(True)
        z_t = torch.from_numpy(rng.standard_normal((1, cfg.latent_dim))).float().requires_grad_(True)
        opt = torch.optim.Adam([z_s, z_t], lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
        with torch.no_grad():
            init_loss = float(_inversion_objective(state, z_s, z_t, fsv_target, ftv_target))
        failed = False
        for _ in range(steps):
            loss = _inversion_objective(state, z_s, z_t, fsv_target, ftv_target)
            if not torch.isfinite(loss):
                failed = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        if failed:
            restart_log.append({"restart": r, "status": "failed"})
            continue
        with torch.no_grad():
            final = float(_inversion_objective(state, z_s, z_t, fsv_target, ftv_target))
        restart_log.append({"restart": r, "status": "ok", "initial": init_loss, "final": final})
        if best is None or final < best[0]:
            best = (final, init_loss, z_s.detach().numpy()[0].copy(),
                    z_t.detach().numpy()[0].copy(), r)
    if best is None:
        raise RuntimeError(f"inversion failed in all {restarts} restarts: {restart_log}")
    final, init_loss, z_s_np, z_t_np, chosen = best
    mesh = generate(state, z_s_np, z_t_np, mesh_resolution)
    return InversionResult(z_s=z_s_np, z_t=z_t_np, mesh=mesh, final_loss=final,
                           initial_loss=init_loss, restart_losses=restart_log,
                           chosen_restart=chosen)
