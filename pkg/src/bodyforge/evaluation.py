"""Generation metrics: Chamfer-based coverage and minimum matching distance
over point-cloud sets, and Fréchet distances over point-cloud descriptors
(FPD), pooled image features (FID), and rendered textured meshes (FID3D).

Chamfer uses the squared-distance convention:
    d_CD(A,B) = mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import ContractViolation
from .fields import PointCloud

DESCRIPTOR_DIM = 33
_HIST_BINS = 16
_HIST_RANGE = (0.0, 1.8)


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


def chamfer(a, b) -> float:
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ContractViolation("chamfer distance needs non-empty clouds")
    d_ab, _ = kernels.nn_sqdist(pa, pb)
    d_ba, _ = kernels.nn_sqdist(pb, pa)
    return float(d_ab.mean() + d_ba.mean())


def _pairwise_chamfer(gen_clouds, ref_clouds) -> np.ndarray:
    g = [_points(c) for c in gen_clouds]
    r = [_points(c) for c in ref_clouds]
    if not g or not r:
        raise ContractViolation("cloud sets must be non-empty")
    out = np.empty((len(g), len(r)))
    for i, gc in enumerate(g):
        for j, rc in enumerate(r):
            out[i, j] = chamfer(gc, rc)
    return out


def coverage(gen_clouds, ref_clouds) -> float:
    """Fraction of references that are the Chamfer-nearest reference of at
    least one generated cloud."""
    d = _pairwise_chamfer(gen_clouds, ref_clouds)
    matched = np.unique(d.argmin(axis=1))
    return float(len(matched) / d.shape[1])


def mmd(gen_clouds, ref_clouds) -> float:
    """Mean over references of the distance to the closest generation."""
    d = _pairwise_chamfer(gen_clouds, ref_clouds)
    return float(d.min(axis=0).mean())


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = len(self.mean)
        if self.cov.shape != (d, d):
            raise ContractViolation("covariance shape must match mean dimension")
        if np.abs(self.cov - self.cov.T).max() > 1e-8:
            raise ContractViolation("covariance must be symmetric within 1e-8")

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ContractViolation("need a (n >= 2, d) sample matrix")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        cov = (cov + cov.T) / 2.0
        return cls(mean=x.mean(axis=0), cov=cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise ContractViolation(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), computed through
    the symmetric product sqrt(S_a) S_b sqrt(S_a)."""
    if len(a.mean) != len(b.mean):
        raise ContractViolation("Gaussian stats dimensions differ")
    diff = a.mean - b.mean
    sqrt_a = _psd_sqrt(a.cov)
    inner = _psd_sqrt(sqrt_a @ b.cov @ sqrt_a)
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(inner))
    return max(val, 0.0)


def cloud_descriptor(cloud) -> np.ndarray:
    """Deterministic 33-dim handcrafted cloud descriptor: centroid (3),
    per-axis std (3), 16-bin radial histogram, 10 higher central moments,
    and a covariance-based surface-spread proxy."""
    pts = _points(cloud)
    if len(pts) == 0:
        raise ContractViolation("cannot describe an empty cloud")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    stds = centered.std(axis=0)
    radii = np.linalg.norm(centered, axis=1)
    hist, _ = np.histogram(radii, bins=_HIST_BINS, range=_HIST_RANGE)
    hist = hist / len(pts)
    x, y, z = centered[:, 0], centered[:, 1], centered[:, 2]
    moments = np.array([
        (x * x).mean(), (y * y).mean(), (z * z).mean(),
        (x * y).mean(), (x * z).mean(), (y * z).mean(),
        (x ** 3).mean(), (y ** 3).mean(), (z ** 3).mean(),
        (radii ** 4).mean(),
    ])
    cov = np.cov(centered, rowvar=False) if len(pts) > 1 else np.zeros((3, 3))
    eig = np.sort(np.clip(np.linalg.eigvalsh(cov), 0.0, None))
    spread = float(np.sqrt(eig[-1] * eig[-2])) if len(pts) > 1 else 0.0
    desc = np.concatenate([centroid, stds, hist, moments, [spread]])
    assert desc.shape == (DESCRIPTOR_DIM,)
    return desc


def fpd(gen_clouds, ref_clouds) -> float:
    """Fréchet distance between Gaussian fits of cloud descriptors."""
    if len(gen_clouds) < DESCRIPTOR_DIM + 1 or len(ref_clouds) < DESCRIPTOR_DIM + 1:
        raise ContractViolation(
            f"fpd needs more than {DESCRIPTOR_DIM} clouds per set "
            f"(got {len(gen_clouds)}, {len(ref_clouds)})")
    g = np.stack([cloud_descriptor(c) for c in gen_clouds])
    r = np.stack([cloud_descriptor(c) for c in ref_clouds])
    return frechet(GaussianStats.from_samples(g), GaussianStats.from_samples(r))


def pooled_features(extractor, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """images (N,H,W,3) -> (N,d) via the frozen pooled image descriptor."""
    feats = []
    for s in range(0, len(images), batch):
        chunk = np.asarray(images[s:s + batch], dtype=np.float32).transpose(0, 3, 1, 2)
        with torch.no_grad():
            feats.append(extractor(torch.from_numpy(np.ascontiguousarray(chunk))).numpy())
    return np.concatenate(feats, axis=0).astype(np.float64)


def fid(gen_images, ref_images, extractor) -> float:
    """Fréchet distance over pooled image features."""
    g = pooled_features(extractor, gen_images)
    r = pooled_features(extractor, ref_images)
    d = g.shape[1]
    if len(g) < d + 1 or len(r) < d + 1:
        raise ContractViolation(
            f"fid needs more than {d} images per set (got {len(g)}, {len(r)})")
    return frechet(GaussianStats.from_samples(g), GaussianStats.from_samples(r))


def rasterize_views(mesh, views: list[float], resolution: int) -> list[np.ndarray]:
    """Rasterize a textured mesh from azimuth angles; white background."""
    from .fields import azimuth_camera, project

    images = []
    for angle in views:
        cam = azimuth_camera(resolution, angle)
        if mesh.is_empty:
            images.append(np.ones((resolution, resolution, 3), dtype=np.float32))
            continue
        xy, z = project(mesh.vertices, cam)
        colors = mesh.vertex_colors if mesh.vertex_colors is not None \
            else np.zeros((len(mesh.vertices), 3))
        img, _ = kernels.rasterize_mesh(xy, z, mesh.faces, colors, resolution, resolution)
        images.append(img.astype(np.float32))
    return images


def fid3d(mesh_provider, n_samples: int, ref_images, views: list[float],
          resolution: int, extractor) -> float:
    """FID over rasterized renders of textured meshes vs reference renders.

    ``mesh_provider(i)`` must return the i-th generated TexturedMesh."""
    renders = []
    for i in range(n_samples):
        mesh = mesh_provider(i)
        renders.extend(rasterize_views(mesh, views, resolution))
    return fid(np.stack(renders), np.asarray(ref_images), extractor)


@dataclass
class MetricReport:
    cov: float
    mmd: float
    fpd: float
    fid: float
    fid3d: float
    config_hash: str
    set_sizes: dict

    def __post_init__(self):
        if not 0.0 <= self.cov <= 1.0:
            raise ContractViolation("coverage must lie in [0,1]")

    def to_dict(self) -> dict:
        return {"cov": self.cov, "mmd": self.mmd, "fpd": self.fpd, "fid": self.fid,
                "fid3d": self.fid3d, "config_hash": self.config_hash,
                "set_sizes": self.set_sizes}

    def table_row(self) -> str:
        return (f"COV {100 * self.cov:.2f}%  MMD {self.mmd:.4f}  FPD {self.fpd:.4f}  "
                f"FID {self.fid:.2f}  FID3D {self.fid3d:.2f}")

    def csv_row(self) -> str:
        return (f"{self.cov},{self.mmd},{self.fpd},{self.fid},{self.fid3d},"
                f"{self.config_hash}")


def _origin_cloud() -> PointCloud:
    # stand-in for an empty extraction so set metrics stay defined
    return PointCloud(np.zeros((1, 3)))


def reference_clouds_from_pgt(pgt, recon, indices, n_points: int, grid: int, seed: int):
    """Decode eval pseudo-GT shape volumes to meshes and sample clouds."""
    from .decoders import sdf_grid_query
    from .fields import extract_mesh, frontal_camera, sample_mesh_surface
    from .fileio import sample_seed

    cam = frontal_camera(pgt.feature_size)
    clouds = []
    for k, i in enumerate(indices):
        rec = pgt.load(i)
        mesh = extract_mesh(sdf_grid_query(rec.f_sv, recon.f_s, cam), grid)
        rng = np.random.default_rng(sample_seed(seed, k, "refcloud"))
        clouds.append(sample_mesh_surface(mesh, n_points, rng) if not mesh.is_empty
                      else _origin_cloud())
    return clouds


def generated_clouds(state, cfg, seed: int):
    """Sample latents -> extract meshes -> surface clouds. Empty extractions
    become single-point stand-ins so set metrics stay defined."""
    from .decoders import sdf_grid_query
    from .fields import extract_mesh, frontal_camera, sample_mesh_surface
    from .fileio import sample_seed

    cam = frontal_camera(cfg.feature_size)
    clouds = []
    n_empty = 0
    for k in range(cfg.eval_clouds):
        rng = np.random.default_rng(sample_seed(seed, k, "eval_gen"))
        z = rng.standard_normal(cfg.latent_dim)
        _, f_sv, _, _ = state.fields(z, z)
        mesh = extract_mesh(sdf_grid_query(f_sv, state.f_s, cam), cfg.mesh_grid)
        if mesh.is_empty:
            n_empty += 1
            clouds.append(_origin_cloud())
        else:
            clouds.append(sample_mesh_surface(mesh, cfg.cloud_points, rng))
    return clouds, n_empty


def generated_images(state, cfg, seed: int) -> np.ndarray:
    """Frontal field renders for FID."""
    from .fields import frontal_camera
    from .fileio import sample_seed
    from .refinement import render_field_image

    images = []
    for k in range(cfg.fid_images):
        rng = np.random.default_rng(sample_seed(seed, k, "eval_img"))
        z = rng.standard_normal(cfg.latent_dim)
        _, f_sv, _, f_tv = state.fields(z, z)
        img, _ = render_field_image(f_sv, f_tv, state.f_s, state.f_t,
                                    frontal_camera(cfg.image_size), cfg.image_size,
                                    cfg.render_grid)
        images.append(img)
    return np.stack(images)


def evaluate_model(state, recon, pgt, corpus, cfg, seed: int | None = None) -> MetricReport:
    """All five metrics with fixed seeds and configured set sizes.

    Generated clouds/images come from the trained state; references come
    from eval-split pseudo-GT records (clouds, images) and eval-split corpus
    renders (FID3D)."""
    from .applications import generate
    from .corpus import render_orthographic
    from .fields import frontal_camera
    from .fileio import sample_seed

    seed = cfg.seed if seed is None else seed
    eval_idx = pgt.indices("eval")
    if not eval_idx:
        raise ContractViolation("pseudo-GT dataset has no eval split")

    # -- shape metrics ----------------------------------------------------
    n_set = cfg.eval_clouds
    ref_sel = [eval_idx[i % len(eval_idx)] for i in range(n_set)]
    ref_clouds = reference_clouds_from_pgt(pgt, recon, ref_sel, cfg.cloud_points,
                                           cfg.mesh_grid, sample_seed(seed, 1, "eval_ref"))
    gen_clouds, n_empty = generated_clouds(state, cfg, seed)
    cov_val = coverage(gen_clouds, ref_clouds)
    mmd_val = mmd(gen_clouds, ref_clouds)
    fpd_val = fpd(gen_clouds, ref_clouds)

    # -- image metrics ----------------------------------------------------
    ref_images = np.stack([pgt.load(eval_idx[i % len(eval_idx)]).image
                           for i in range(cfg.fid_images)])
    fid_val = fid(generated_images(state, cfg, seed), ref_images, recon.pooled)

    # -- rendered-mesh metric ----------------------------------------------
    from .fields import azimuth_camera

    views = [2.0 * np.pi * v / max(cfg.fid3d_views, 1) for v in range(cfg.fid3d_views)]
    corpus_eval = corpus.indices("eval")
    ref_renders = []
    need = cfg.fid3d_samples * len(views)
    k = 0
    while len(ref_renders) < max(need, 2):
        ci = corpus_eval[k % len(corpus_eval)]
        params = corpus.params(ci)
        for angle in views:
            ref_renders.append(render_orthographic(
                params, azimuth_camera(cfg.image_size, angle), cfg.image_size).rgb)
        k += 1

    def mesh_provider(i: int):
        rng = np.random.default_rng(sample_seed(seed, i, "eval_mesh"))
        z = rng.standard_normal(cfg.latent_dim)
        return generate(state, z, z, cfg.mesh_grid, refine=state.refiner is not None)

    fid3d_val = fid3d(mesh_provider, cfg.fid3d_samples, np.stack(ref_renders[:max(need, 2)]),
                      views, cfg.image_size, recon.pooled)

    return MetricReport(cov=cov_val, mmd=mmd_val, fpd=fpd_val, fid=fid_val,
                        fid3d=fid3d_val, config_hash=cfg.config_hash,
                        set_sizes={"clouds": n_set, "cloud_points": cfg.cloud_points,
                                   "fid_images": cfg.fid_images,
                                   "fid3d_samples": cfg.fid3d_samples,
                                   "fid3d_views": cfg.fid3d_views,
                                   "empty_generated_meshes": n_empty})
