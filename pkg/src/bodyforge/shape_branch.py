"""Student shape branch: latent -> shape feature image F_s -> shape feature
volume F_sv -> SDF via the frozen shape decoder. Trained against pseudo-GT
bundles with five weighted terms: point-sampled SDF L1, feature-volume L1,
normal/depth channel supervision on F_s, and a feature-volume adversary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .decoders import FieldDecoder, decode_sdf_torch
from .errors import ContractViolation, TrainingDiverged
from .fields import FeatureMap, frontal_camera, sample_training_points
from .fileio import append_csv_row, sample_seed, save_checkpoint
from .gan import discriminator_step, g_nonsat_loss
from .nets import ConvDiscriminator, HourglassEncoder, StyleGenerator
from .prior import PseudoGTSet


@dataclass
class ShapeLossWeights:
    sdf: float = 20.0
    sv: float = 40.0
    normal: float = 20.0
    depth: float = 20.0
    adv: float = 1.0
    r1: float = 10.0

    def __post_init__(self):
        for name in ("sdf", "sv", "normal", "depth", "adv", "r1"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"shape loss weight {name} must be >= 0")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ShapeLossWeights":
        return cls(sdf=cfg.w_sdf, sv=cfg.w_sv, normal=cfg.w_normal,
                   depth=cfg.w_depth, adv=cfg.w_adv_sv, r1=cfg.r1_weight)


class ShapeGenerator(nn.Module):
    """g_s (mapping + synthesis) followed by the hourglass encoder g_sv.

    The first four channels of F_s are reserved: 1-3 predict the normal map,
    4 the depth map; all channels are fed on to g_sv."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        if cfg.c_s < 5:
            raise ContractViolation("shape feature image needs >= 5 channels")
        self.latent_dim = cfg.latent_dim
        self.g_s = StyleGenerator(cfg.latent_dim, cfg.style_dim, cfg.c_s,
                                  cfg.feature_size, cfg.gen_base)
        self.g_sv = HourglassEncoder(cfg.c_s, cfg.c_sv, base=cfg.enc_base,
                                     bias_size=cfg.feature_size)

    def forward(self, z: torch.Tensor):
        f_s = self.g_s(z)
        f_sv = self.g_sv(f_s)
        return f_s, f_sv


def shape_discriminator(cfg: RunConfig) -> ConvDiscriminator:
    return ConvDiscriminator(cfg.c_sv, cfg.feature_size, cfg.disc_base)


def generate_shape(gen: ShapeGenerator, z_s: np.ndarray):
    """Deterministic forward pass -> (F_s, F_sv) feature maps."""
    z = np.asarray(z_s, dtype=np.float32).reshape(-1)
    if z.shape[0] != gen.latent_dim:
        raise ContractViolation(f"latent length {z.shape[0]} != {gen.latent_dim}")
    with torch.no_grad():
        f_s, f_sv = gen(torch.from_numpy(z).unsqueeze(0))
    return FeatureMap(f_s[0].numpy(), "F_s"), FeatureMap(f_sv[0].numpy(), "F_sv")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))  # keeps float64 oracles exact


def loss_sdf(pred, gt) -> torch.Tensor:
    """Mean absolute SDF error over sampled points."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.numel() == 0:
        raise ContractViolation("loss_sdf needs at least one point")
    if pred.shape != gt.shape:
        raise ContractViolation(f"loss_sdf shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def loss_latent_prior(f_sv, f_sv_gt) -> torch.Tensor:
    """Mean absolute elementwise difference between feature volumes."""
    f_sv, f_sv_gt = _as_tensor(f_sv), _as_tensor(f_sv_gt)
    if f_sv.shape != f_sv_gt.shape:
        raise ContractViolation(
            f"feature volume shapes differ: {tuple(f_sv.shape)} vs {tuple(f_sv_gt.shape)}")
    return (f_sv - f_sv_gt).abs().mean()


def loss_normal_depth(f_s, normal_gt, depth_gt, w_normal: float, w_depth: float) -> torch.Tensor:
    """Channel supervision: channels 1-3 of F_s against the normal map,
    channel 4 against the depth map, each a mean L1, weighted."""
    f_s = _as_tensor(f_s)
    normal_gt = _as_tensor(normal_gt)
    depth_gt = _as_tensor(depth_gt)
    if f_s.ndim == 3:
        f_s = f_s.unsqueeze(0)
        normal_gt = normal_gt.unsqueeze(0)
        depth_gt = depth_gt.unsqueeze(0)
    if f_s.shape[1] < 4:
        raise ContractViolation("F_s must have >= 4 channels for normal/depth supervision")
    if depth_gt.ndim == 3:
        depth_gt = depth_gt.unsqueeze(1)
    l_n = (f_s[:, 0:3] - normal_gt).abs().mean()
    l_d = (f_s[:, 3:4] - depth_gt).abs().mean()
    return w_normal * l_n + w_depth * l_d


def shape_total_loss(parts: dict[str, torch.Tensor], weights: ShapeLossWeights) -> torch.Tensor:
    """Weighted sum of the five shape terms; names a non-finite part."""
    table = {"sdf": weights.sdf, "sv": weights.sv, "normal": weights.normal,
             "depth": weights.depth, "adv": weights.adv}
    total = None
    for name, weight in table.items():
        part = _as_tensor(parts[name])
        if not torch.isfinite(part).all():
            raise ContractViolation(f"shape loss term {name!r} is non-finite")
        term = weight * part
        total = term if total is None else total + term
    return total


class _PgtCache:
    """Pseudo-GT tensors preloaded for one training stage."""

    def __init__(self, pgt: PseudoGTSet, cfg: RunConfig, split: str = "train"):
        self.cfg = cfg
        self.camera = frontal_camera(pgt.image_size)
        self.all_idx = pgt.indices(split)
        self.synth_idx = pgt.indices(split, source="synthesized")
        records = [pgt.load(i) for i in self.all_idx]
        self.fsv = torch.stack([torch.from_numpy(r.f_sv.data) for r in records])
        self.ftv = torch.stack([torch.from_numpy(r.f_tv.data) for r in records])
        pos = {g: k for k, g in enumerate(self.all_idx)}
        self.synth_pos = [pos[i] for i in self.synth_idx]
        self.latents = torch.stack([torch.from_numpy(records[k].latent) for k in self.synth_pos]) \
            if self.synth_pos else torch.zeros(0, cfg.latent_dim)
        stride = pgt.image_size // pgt.feature_size
        normals = torch.stack([torch.from_numpy(
            np.ascontiguousarray(records[k].normal.transpose(2, 0, 1))) for k in range(len(records))])
        depths = torch.stack([torch.from_numpy(r.depth).unsqueeze(0) for r in records])
        self.normal_f = F.avg_pool2d(normals, stride) if stride > 1 else normals
        self.depth_f = F.avg_pool2d(depths, stride) if stride > 1 else depths
        self.depth_img = [r.depth for r in records]
        self.mask_img = [r.depth < cfg.fg_depth_threshold for r in records]

    def sample_points(self, pos: int, rng) -> np.ndarray:
        pts, _, _ = sample_training_points(self.depth_img[pos], self.mask_img[pos],
                                           self.camera, self.cfg.points_per_sample,
                                           self.cfg.near_sigma, rng)
        return pts


def train_shape_stage(pgt: PseudoGTSet, f_s: FieldDecoder, cfg: RunConfig, out_dir=None):
    """Stage 1: alternating discriminator/generator updates; f_s stays
    frozen. Returns (generator, discriminator, log rows)."""
    cache = _PgtCache(pgt, cfg, "train")
    if not cache.synth_pos:
        raise ContractViolation("shape stage needs synthesized records with latents")
    for p in f_s.parameters():
        p.requires_grad_(False)

    torch.manual_seed(sample_seed(cfg.seed, 0, "shape_init"))
    gen = ShapeGenerator(cfg)
    disc = shape_discriminator(cfg)
    weights = ShapeLossWeights.from_config(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.adam_beta1, cfg.adam_beta2))

    val = _PgtCache(pgt, cfg, "eval")
    val_pos = val.synth_pos[:8] if val.synth_pos else []
    log: list[dict] = []
    curve_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        curve_path = Path(out_dir) / "shape_curve.csv"

    def validation_lsv() -> float:
        if not val_pos:
            return float("nan")
        with torch.no_grad():
            z = val.latents[:len(val_pos)]
            _, f_sv = gen(z)
            return float((f_sv - val.fsv[val_pos]).abs().mean())

    for step in range(cfg.shape_steps):
        rng = np.random.default_rng(sample_seed(cfg.seed, step, "shape_batch"))
        bsel = rng.integers(0, len(cache.synth_pos), size=cfg.batch_size)
        pos = [cache.synth_pos[int(k)] for k in bsel]
        z = cache.latents[bsel]
        fsv_gt = cache.fsv[pos]

        # discriminator: fake student volumes vs the full real pseudo-GT pool
        with torch.no_grad():
            _, fake = gen(z)
        real_sel = rng.integers(0, len(cache.all_idx), size=cfg.batch_size)
        d_loss, d_stats = discriminator_step(disc, cache.fsv[real_sel], fake, weights.r1)
        if not torch.isfinite(d_loss):
            ckpt = _save_stage(out_dir, gen, disc, cfg, step, diverged=True)
            raise TrainingDiverged(f"shape discriminator diverged at step {step}", ckpt)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        f_s_img, f_sv = gen(z)
        pts = torch.from_numpy(np.stack([cache.sample_points(p, rng) for p in pos])).float()
        with torch.no_grad():
            sdf_target = decode_sdf_torch(fsv_gt, f_s, pts)
        parts = {
            "sdf": loss_sdf(decode_sdf_torch(f_sv, f_s, pts), sdf_target),
            "sv": loss_latent_prior(f_sv, fsv_gt),
            "normal": (f_s_img[:, 0:3] - cache.normal_f[pos]).abs().mean(),
            "depth": (f_s_img[:, 3:4] - cache.depth_f[pos]).abs().mean(),
            "adv": g_nonsat_loss(disc(f_sv)),
        }
        try:
            g_loss = shape_total_loss(parts, weights)
        except ContractViolation:
            ckpt = _save_stage(out_dir, gen, disc, cfg, step, diverged=True)
            raise TrainingDiverged(f"shape generator diverged at step {step}", ckpt)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if step % cfg.val_every == 0 or step == cfg.shape_steps - 1:
            row = {"step": step, "g_total": float(g_loss.detach()), "d_total": float(d_loss.detach()),
                   "val_lsv": validation_lsv(),
                   **{k: float(_as_tensor(v).detach()) for k, v in parts.items()}, **d_stats}
            log.append(row)
            if curve_path is not None:
                for term in ("g_total", "d_total", "val_lsv", "sdf", "sv", "normal", "depth", "adv"):
                    append_csv_row(curve_path, [step, term, row[term]],
                                   header=["step", "term", "value"])
    gen.eval()
    disc.eval()
    if out_dir is not None:
        _save_stage(out_dir, gen, disc, cfg, cfg.shape_steps)
    return gen, disc, log


def _save_stage(out_dir, gen, disc, cfg, step, diverged=False) -> str | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "_diverged" if diverged else ""
    meta = {"step": step, "config_hash": cfg.config_hash, "seed": cfg.seed}
    save_checkpoint(out / f"shape_generator{suffix}.w", gen, meta)
    save_checkpoint(out / f"shape_discriminator{suffix}.w", disc, meta)
    return str(out / f"shape_generator{suffix}.w")
