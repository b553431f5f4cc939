"""Student texture branch: latent + frozen shape features -> texture feature
image F_t -> texture feature volume F_tv -> RGB via the frozen texture
decoder. Reconstruction losses apply to paired batches (z_t = z_s = stored
teacher latent); the feature-volume adversary also sees unpaired batches,
which is what makes re-texturing work.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .decoders import FieldDecoder, decode_color_torch
from .errors import ContractViolation, TrainingDiverged
from .fields import FeatureMap
from .fileio import append_csv_row, sample_seed, save_checkpoint
from .gan import discriminator_step, g_nonsat_loss
from .nets import ConvDiscriminator, HourglassEncoder, StyleGenerator
from .prior import PseudoGTSet
from .shape_branch import ShapeGenerator, _PgtCache, _as_tensor


@dataclass
class TextureLossWeights:
    rgb: float = 20.0
    tv: float = 40.0
    adv: float = 1.0
    r1: float = 10.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "TextureLossWeights":
        return cls(rgb=cfg.w_rgb, tv=cfg.w_tv, adv=cfg.w_adv_tv, r1=cfg.r1_weight)


class TextureGenerator(nn.Module):
    """g_t (mapping + synthesis) and g_tv over concat(F_t, F_s)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.g_t = StyleGenerator(cfg.latent_dim, cfg.style_dim, cfg.c_t,
                                  cfg.feature_size, cfg.gen_base)
        self.g_tv = HourglassEncoder(cfg.c_t + cfg.c_s, cfg.c_tv, base=cfg.enc_base,
                                     bias_size=cfg.feature_size)

    def forward(self, z_t: torch.Tensor, f_s: torch.Tensor):
        f_t = self.g_t(z_t)
        if f_t.shape[1] + f_s.shape[1] != self.g_tv.stem.in_channels:
            raise ContractViolation(
                f"g_tv expects {self.g_tv.stem.in_channels} channels, got "
                f"{f_t.shape[1]}+{f_s.shape[1]}")
        f_tv = self.g_tv(torch.cat([f_t, f_s], dim=1))
        return f_t, f_tv


def texture_discriminator(cfg: RunConfig) -> ConvDiscriminator:
    return ConvDiscriminator(cfg.c_tv + cfg.c_sv, cfg.feature_size, cfg.disc_base)


def generate_texture(gen: TextureGenerator, z_t: np.ndarray, f_s: FeatureMap):
    """Deterministic forward -> (F_t, F_tv) feature maps."""
    if f_s.role != "F_s":
        raise ContractViolation(f"generate_texture expects an F_s map, got {f_s.role}")
    z = np.asarray(z_t, dtype=np.float32).reshape(-1)
    if z.shape[0] != gen.latent_dim:
        raise ContractViolation(f"latent length {z.shape[0]} != {gen.latent_dim}")
    with torch.no_grad():
        f_t, f_tv = gen(torch.from_numpy(z).unsqueeze(0),
                        torch.from_numpy(f_s.data).unsqueeze(0))
    return FeatureMap(f_t[0].numpy(), "F_t"), FeatureMap(f_tv[0].numpy(), "F_tv")


def loss_rgb(pred, gt) -> torch.Tensor:
    """Mean absolute color error over sampled points (all components)."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.numel() == 0:
        raise ContractViolation("loss_rgb needs at least one point")
    if pred.shape != gt.shape:
        raise ContractViolation(f"loss_rgb shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def loss_texture_prior(f_tv, f_tv_gt) -> torch.Tensor:
    """Mean absolute elementwise difference between texture feature volumes."""
    f_tv, f_tv_gt = _as_tensor(f_tv), _as_tensor(f_tv_gt)
    if f_tv.shape != f_tv_gt.shape:
        raise ContractViolation(
            f"feature volume shapes differ: {tuple(f_tv.shape)} vs {tuple(f_tv_gt.shape)}")
    return (f_tv - f_tv_gt).abs().mean()


def texture_total_loss(parts: dict[str, torch.Tensor], weights: TextureLossWeights) -> torch.Tensor:
    table = {"rgb": weights.rgb, "tv": weights.tv, "adv": weights.adv}
    total = None
    for name, weight in table.items():
        part = _as_tensor(parts[name])
        if not torch.isfinite(part).all():
            raise ContractViolation(f"texture loss term {name!r} is non-finite")
        term = weight * part
        total = term if total is None else total + term
    return total


def train_texture_stage(pgt: PseudoGTSet, shape_gen: ShapeGenerator, f_s: FieldDecoder,
                        f_t: FieldDecoder, cfg: RunConfig, out_dir=None):
    """Stage 2: the shape branch and both decoders stay frozen.

    Paired batches (z_t = stored latent) carry RGB + feature-volume
    reconstruction losses; with probability ``unpaired_fraction`` a batch
    instead draws fresh z_t ~ N(0, I) and contributes adversarially only."""
    cache = _PgtCache(pgt, cfg, "train")
    if not cache.synth_pos:
        raise ContractViolation("texture stage needs synthesized records with latents")
    for module in (shape_gen, f_s, f_t):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    torch.manual_seed(sample_seed(cfg.seed, 0, "texture_init"))
    gen = TextureGenerator(cfg)
    disc = texture_discriminator(cfg)
    weights = TextureLossWeights.from_config(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.adam_beta1, cfg.adam_beta2))

    val = _PgtCache(pgt, cfg, "eval")
    val_pos = val.synth_pos[:8] if val.synth_pos else []
    log: list[dict] = []
    curve_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        curve_path = Path(out_dir) / "texture_curve.csv"

    def validation_ltv() -> float:
        if not val_pos:
            return float("nan")
        with torch.no_grad():
            z = val.latents[:len(val_pos)]
            f_s_img, _ = shape_gen(z)
            _, f_tv = gen(z, f_s_img)
            return float((f_tv - val.ftv[val_pos]).abs().mean())

    m_half = cfg.points_per_sample // 2
    for step in range(cfg.texture_steps):
        rng = np.random.default_rng(sample_seed(cfg.seed, step, "texture_batch"))
        bsel = rng.integers(0, len(cache.synth_pos), size=cfg.batch_size)
        pos = [cache.synth_pos[int(k)] for k in bsel]
        z_s = cache.latents[bsel]
        paired = bool(rng.random() >= cfg.unpaired_fraction)
        if paired:
            z_t = z_s
        else:
            z_t = torch.from_numpy(rng.standard_normal(z_s.shape)).float()

        with torch.no_grad():
            f_s_img, f_sv = shape_gen(z_s)

        with torch.no_grad():
            _, fake_ftv = gen(z_t, f_s_img)
            fake = torch.cat([fake_ftv, f_sv], dim=1)
        real_sel = rng.integers(0, len(cache.all_idx), size=cfg.batch_size)
        real = torch.cat([cache.ftv[real_sel], cache.fsv[real_sel]], dim=1)
        d_loss, d_stats = discriminator_step(disc, real, fake, weights.r1)
        if not torch.isfinite(d_loss):
            ckpt = _save_stage(out_dir, gen, disc, cfg, step, diverged=True)
            raise TrainingDiverged(f"texture discriminator diverged at step {step}", ckpt)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        _, f_tv = gen(z_t, f_s_img)
        adv = g_nonsat_loss(disc(torch.cat([f_tv, f_sv], dim=1)))
        if paired:
            ftv_gt = cache.ftv[pos]
            if cfg.rgb_near_only:
                pts = torch.from_numpy(np.stack(
                    [cache.sample_points(p, rng)[:m_half] for p in pos])).float()
            else:
                pts = torch.from_numpy(np.stack(
                    [cache.sample_points(p, rng) for p in pos])).float()
            with torch.no_grad():
                col_target = decode_color_torch(ftv_gt, cache.fsv[pos], f_t, pts)
            parts = {
                "rgb": loss_rgb(decode_color_torch(f_tv, f_sv, f_t, pts), col_target),
                "tv": loss_texture_prior(f_tv, ftv_gt),
                "adv": adv,
            }
            try:
                g_loss = texture_total_loss(parts, weights)
            except ContractViolation:
                ckpt = _save_stage(out_dir, gen, disc, cfg, step, diverged=True)
                raise TrainingDiverged(f"texture generator diverged at step {step}", ckpt)
        else:
            parts = {"rgb": torch.zeros(()), "tv": torch.zeros(()), "adv": adv}
            g_loss = weights.adv * adv
            if not torch.isfinite(g_loss):
                ckpt = _save_stage(out_dir, gen, disc, cfg, step, diverged=True)
                raise TrainingDiverged(f"texture generator diverged at step {step}", ckpt)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if step % cfg.val_every == 0 or step == cfg.texture_steps - 1:
            row = {"step": step, "g_total": float(g_loss.detach()), "d_total": float(d_loss.detach()),
                   "paired": int(paired), "val_ltv": validation_ltv(),
                   **{k: float(_as_tensor(v).detach()) for k, v in parts.items()}, **d_stats}
            log.append(row)
            if curve_path is not None:
                for term in ("g_total", "d_total", "val_ltv", "rgb", "tv", "adv"):
                    append_csv_row(curve_path, [step, term, row[term]],
                                   header=["step", "term", "value"])
    gen.eval()
    disc.eval()
    if out_dir is not None:
        _save_stage(out_dir, gen, disc, cfg, cfg.texture_steps)
    return gen, disc, log


def _save_stage(out_dir, gen, disc, cfg, step, diverged=False) -> str | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "_diverged" if diverged else ""
    meta = {"step": step, "config_hash": cfg.config_hash, "seed": cfg.seed}
    save_checkpoint(out / f"texture_generator{suffix}.w", gen, meta)
    save_checkpoint(out / f"texture_discriminator{suffix}.w", disc, meta)
    return str(out / f"texture_generator{suffix}.w")
