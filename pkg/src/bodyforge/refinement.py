"""Appearance refinement: render the implicit fields to images, sharpen them
with a UNet, back-project refined multi-view images into a colored point
cloud, and repaint mesh vertices from their nearest cloud neighbors.
Geometry is never touched here.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import kernels
from .config import RunConfig
from .corpus import CorpusSet, render_orthographic
from .decoders import FieldDecoder, query_color, query_sdf
from .errors import ContractViolation, TrainingDiverged
from .fields import (BACKGROUND_DEPTH, Camera, FeatureMap, PointCloud, TexturedMesh,
                     azimuth_camera, backproject, evaluate_sdf_grid, frontal_camera)
from .fileio import append_csv_row, sample_seed, save_checkpoint
from .nets import UNet
from .prior import PseudoGTSet, Reconstructor, _to_torch_image

RefinerNet = UNet

_OUTSIDE_SDF = 1.0  # grid samples outside the canonical box read as empty space


def _trilinear_grid(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample an R^3 canonical-box grid at world points; outside -> +1."""
    r = vol.shape[0]
    coords = (pts + 1.0) / 2.0 * (r - 1)
    out = np.full(len(pts), _OUTSIDE_SDF, dtype=np.float64)
    inside = np.all((pts >= -1.0) & (pts <= 1.0), axis=1)
    if not inside.any():
        return out
    c = coords[inside]
    c0 = np.floor(c).astype(np.int64)
    c0 = np.clip(c0, 0, r - 2)
    w = c - c0
    acc = np.zeros(len(c))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wt = ((w[:, 0] if dx else 1 - w[:, 0])
                      * (w[:, 1] if dy else 1 - w[:, 1])
                      * (w[:, 2] if dz else 1 - w[:, 2]))
                acc += wt * vol[c0[:, 0] + dx, c0[:, 1] + dy, c0[:, 2] + dz]
    out[inside] = acc
    return out


def render_field_image(f_sv: FeatureMap, f_tv: FeatureMap, f_s: FieldDecoder,
                       f_t: FieldDecoder, camera: Camera, resolution: int,
                       grid_res: int = 64, alignment: Camera | None = None,
                       sdf_grid: np.ndarray | None = None):
    """Grid-accelerated ray march of the shape field along -z of ``camera``;
    colors queried at the zero crossings, white background.

    ``alignment`` is the camera the feature maps are pixel-aligned to
    (frontal by default); ``camera`` only shapes the rays. Returns
    (image HxWx3, depth HxW with background +1).
    """
    alignment = alignment or frontal_camera(f_sv.resolution)
    if sdf_grid is None:
        sdf_grid = evaluate_sdf_grid(lambda p: query_sdf(f_sv, f_s, alignment, p), grid_res)
    grid_res = sdf_grid.shape[0]

    rot = camera.view_rotation
    ii = np.arange(resolution, dtype=np.float64)
    px, py = np.meshgrid(ii, ii, indexing="xy")
    x_ndc = 2.0 * px.ravel() / resolution - 1.0
    y_ndc = 1.0 - 2.0 * py.ravel() / resolution
    start_z = 1.7320508075688772  # box corner radius: safe for any rotation
    origins = np.stack([x_ndc, y_ndc, np.full(x_ndc.shape, start_z)], axis=1) @ rot
    direction = rot.T @ np.array([0.0, 0.0, -1.0])

    n = len(origins)
    step = 2.0 / grid_res
    n_steps = int(np.ceil(2.0 * start_z / step))
    t = np.zeros(n)
    prev = np.full(n, _OUTSIDE_SDF)
    hit_t = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)
    for k in range(1, n_steps + 1):
        tk = k * step
        ai = np.nonzero(active)[0]
        pts = origins[ai] + tk * direction[None, :]
        cur = _trilinear_grid(sdf_grid, pts)
        crossed = (prev[ai] > 0.0) & (cur <= 0.0)
        ci = ai[crossed]
        if len(ci):
            p0 = prev[ci]
            p1 = cur[crossed]
            hit_t[ci] = t[ci] + (p0 / (p0 - p1)) * step
            active[ci] = False
        rest = ai[~crossed]
        prev[rest] = cur[~crossed]
        t[rest] = tk
        if not active.any():
            break

    hit = ~np.isnan(hit_t)
    image = np.ones((n, 3), dtype=np.float64)
    depth = np.full(n, BACKGROUND_DEPTH, dtype=np.float64)
    if hit.any():
        hp = origins[hit] + hit_t[hit, None] * direction[None, :]
        depth[hit] = np.minimum(start_z - hit_t[hit], BACKGROUND_DEPTH - 1e-6)
        image[hit] = query_color(f_tv, f_sv, f_t, alignment, hp)
    shape = (resolution, resolution)
    return image.reshape(*shape, 3).astype(np.float32), depth.reshape(shape).astype(np.float32)


class PerceptualExtractor:
    """Frozen multi-level feature taps from the prior reconstructor's
    encoder; the fixed extractor behind the perceptual term."""

    def __init__(self, recon: Reconstructor):
        self.recon = recon

    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.recon.taps(images)


def refine_image(g_r: RefinerNet, i_c: np.ndarray) -> np.ndarray:
    """One deterministic refiner pass; output clamped to [0,1]."""
    with torch.no_grad():
        out = g_r(_to_torch_image(np.asarray(i_c, dtype=np.float32)).unsqueeze(0))
    return np.clip(out[0].numpy().transpose(1, 2, 0), 0.0, 1.0)


def refine_loss(i_r: torch.Tensor, i_gt: torch.Tensor, phi: PerceptualExtractor,
                w_l1: float = 1.0, w_perc: float = 1.0) -> torch.Tensor:
    """w_l1 * mean-L1 + w_perc * sum over taps of mean squared feature error."""
    if i_r.shape != i_gt.shape:
        raise ContractViolation(f"refine_loss shapes differ: {tuple(i_r.shape)} vs {tuple(i_gt.shape)}")
    total = w_l1 * (i_r - i_gt).abs().mean()
    if w_perc > 0:
        taps_r = phi(i_r)
        with torch.no_grad():
            taps_gt = phi(i_gt)
        for tr, tg in zip(taps_r, taps_gt):
            total = total + w_perc * (tr - tg).pow(2).mean()
    return total


def backproject_cloud(depth: np.ndarray, image: np.ndarray, mask: np.ndarray,
                      camera: Camera) -> PointCloud:
    """One colored point per foreground pixel, in canonical space."""
    depth = np.asarray(depth)
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if depth.shape != mask.shape or image.shape[:2] != depth.shape:
        raise ContractViolation("depth/image/mask resolutions differ")
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    pts = backproject(np.stack([xs, ys], axis=1).astype(np.float64), depth[ys, xs], camera)
    return PointCloud(pts, image[ys, xs])


def paint_vertices(mesh: TexturedMesh, cloud: PointCloud) -> TexturedMesh:
    """Nearest-neighbor vertex coloring (ties -> lowest point index)."""
    if len(cloud) == 0:
        raise ContractViolation("paint_vertices needs a non-empty cloud")
    if cloud.colors is None:
        raise ContractViolation("paint_vertices needs a colored cloud")
    if mesh.is_empty:
        return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy())
    _, idx = kernels.nn_sqdist(mesh.vertices, cloud.points)
    return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy(), cloud.colors[idx])


def refine_textured_mesh(mesh: TexturedMesh, f_sv: FeatureMap, f_tv: FeatureMap,
                         f_s: FieldDecoder, f_t: FieldDecoder, g_r: RefinerNet | None,
                         n_views: int, resolution: int, grid_res: int = 64) -> TexturedMesh:
    """Render n azimuth views, refine each, merge the back-projected clouds,
    repaint vertices. Vertices/faces are returned untouched."""
    if mesh.is_empty:
        return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy())
    alignment = frontal_camera(f_sv.resolution)
    sdf_grid = evaluate_sdf_grid(lambda p: query_sdf(f_sv, f_s, alignment, p), grid_res)
    points, colors = [], []
    for v in range(n_views):
        cam = azimuth_camera(resolution, 2.0 * np.pi * v / n_views)
        img, depth = render_field_image(f_sv, f_tv, f_s, f_t, cam, resolution,
                                        grid_res, alignment, sdf_grid=sdf_grid)
        if g_r is not None:
            img = refine_image(g_r, img)
        cloud = backproject_cloud(depth, img, depth < BACKGROUND_DEPTH, cam)
        if len(cloud):
            points.append(cloud.points)
            colors.append(cloud.colors)
    if not points:
        return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy())
    merged = PointCloud(np.concatenate(points), np.concatenate(colors))
    return paint_vertices(mesh, merged)


def build_refine_pairs(recon: Reconstructor, pgt: PseudoGTSet, corpus: CorpusSet,
                       student_fields, cfg: RunConfig):
    """Stage-3 training pairs.

    Corpus-source records: teacher fields rendered from ``refine_views``
    azimuths, paired with analytic corpus renders at the same views.
    Synthesized records: student fields rendered frontally, paired with the
    record's own image. Returns (inputs, targets) float32 arrays (N,H,W,3).
    """
    res = cfg.image_size
    inputs, targets = [], []
    corpus_recs = pgt.indices("train", source="corpus")[:cfg.refine_records]
    for ri in corpus_recs:
        rec = pgt.load(ri)
        meta = pgt.meta(ri)
        params = corpus.params(meta["corpus_index"])
        for v in range(cfg.refine_views):
            cam = azimuth_camera(res, 2.0 * np.pi * v / cfg.refine_views)
            img, _ = render_field_image(rec.f_sv, rec.f_tv, recon.f_s, recon.f_t,
                                        cam, res, cfg.render_grid)
            gt = render_orthographic(params, cam, res).rgb
            inputs.append(img)
            targets.append(gt)
    if student_fields is not None:
        synth_recs = pgt.indices("train", source="synthesized")[:cfg.refine_records]
        cam = frontal_camera(res)
        for ri in synth_recs:
            rec = pgt.load(ri)
            f_sv, f_tv = student_fields(rec.latent)
            img, _ = render_field_image(f_sv, f_tv, recon.f_s, recon.f_t,
                                        cam, res, cfg.render_grid)
            inputs.append(img)
            targets.append(rec.image)
    inputs = np.stack(inputs).astype(np.float32)
    targets = np.stack(targets).astype(np.float32)
    # deterministic shuffle so the held-out slice mixes corpus-view and
    # student pairs
    order = np.random.default_rng(sample_seed(cfg.seed, 0, "refine_pairs")).permutation(len(inputs))
    return inputs[order], targets[order]


def train_refine_stage(recon: Reconstructor, pgt: PseudoGTSet, corpus: CorpusSet,
                       student_fields, cfg: RunConfig, out_dir=None):
    """Stage 3: only the refiner trains; pairs are precomputed once because
    everything upstream is frozen. Returns (refiner, log rows)."""
    inputs, targets = build_refine_pairs(recon, pgt, corpus, student_fields, cfg)
    n = len(inputs)
    if n < 4:
        raise ContractViolation(f"refinement needs >= 4 training pairs, got {n}")
    n_val = max(1, n // 10)
    val_in = torch.from_numpy(inputs[:n_val].transpose(0, 3, 1, 2))
    val_gt = torch.from_numpy(targets[:n_val].transpose(0, 3, 1, 2))
    train_in = torch.from_numpy(inputs[n_val:].transpose(0, 3, 1, 2))
    train_gt = torch.from_numpy(targets[n_val:].transpose(0, 3, 1, 2))

    torch.manual_seed(sample_seed(cfg.seed, 0, "refine_init"))
    g_r = RefinerNet(cfg.unet_base)
    phi = PerceptualExtractor(recon)
    opt = torch.optim.Adam(g_r.parameters(), lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    log: list[dict] = []
    curve_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        curve_path = Path(out_dir) / "refine_curve.csv"

    def val_loss() -> float:
        with torch.no_grad():
            return float(refine_loss(g_r(val_in), val_gt, phi,
                                     cfg.w_refine_l1, cfg.w_refine_perc))

    log.append({"step": -1, "val": val_loss()})
    if curve_path is not None:
        append_csv_row(curve_path, [-1, "val", log[0]["val"]],
                       header=["step", "term", "value"])
    for step in range(cfg.refine_steps):
        rng = np.random.default_rng(sample_seed(cfg.seed, step, "refine_batch"))
        idx = rng.integers(0, len(train_in), size=min(cfg.batch_size, len(train_in)))
        batch_in = train_in[idx]
        batch_gt = train_gt[idx]
        loss = refine_loss(g_r(batch_in), batch_gt, phi, cfg.w_refine_l1, cfg.w_refine_perc)
        if not torch.isfinite(loss):
            ckpt = None
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(out_dir) / "refiner_diverged.w", g_r,
                                {"step": step, "status": "diverged"})
                ckpt = str(Path(out_dir) / "refiner_diverged.w")
            raise TrainingDiverged(f"refiner diverged at step {step}", ckpt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.val_every == 0 or step == cfg.refine_steps - 1:
            row = {"step": step, "train": float(loss.detach()), "val": val_loss()}
            log.append(row)
            if curve_path is not None:
                for term in ("train", "val"):
                    append_csv_row(curve_path, [step, term, row[term]],
                                   header=["step", "term", "value"])
    g_r.eval()
    for p in g_r.parameters():
        p.requires_grad_(False)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "refiner.w", g_r,
                        {"step": cfg.refine_steps, "config_hash": cfg.config_hash, "seed": cfg.seed})
    return g_r, log
