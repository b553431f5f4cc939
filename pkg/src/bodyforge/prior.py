"""The frozen teacher: a pixel-aligned single-view reconstructor and a small
2D image GAN, trained once on the synthetic corpus. Their outputs (normal,
depth, shape/texture feature volumes, optionally the generating latent) form
the supervision bundles the student branches are trained against.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .corpus import CapsuleBody, CorpusSet
from .decoders import (decode_color_torch, decode_sdf_torch, shape_decoder,
                        texture_decoder)
from .errors import ContractViolation, TrainingDiverged
from .fields import FeatureMap, frontal_camera, sample_training_points
from .fileio import (read_manifest, read_raw, sample_seed, write_manifest, write_raw)
from .gan import discriminator_step, g_nonsat_loss
from .nets import ConvDiscriminator, HourglassEncoder, StyleGenerator, leaky

FG_RGB_THRESHOLD = 0.85  # a pixel is foreground if any channel is below this


class Reconstructor(nn.Module):
    """Hourglass trunk with four heads: normal + depth at image resolution,
    shape/texture feature volumes at feature resolution. Owns the frozen
    field decoders f_s / f_t trained jointly with it.

    Also exposes multi-level taps (perceptual extractor) and a fixed random
    projection of the bottleneck (pooled image descriptor for FID)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.feature_size = cfg.feature_size
        stem_stride = cfg.image_size // cfg.feature_size
        base = cfg.enc_base
        self.trunk = HourglassEncoder(3, base, base=base, stem_stride=stem_stride)
        self.fsv_head = nn.Conv2d(base, cfg.c_sv, 3, padding=1)
        self.ftv_head = nn.Conv2d(base, cfg.c_tv, 3, padding=1)
        self.nd_skip = nn.Conv2d(3, base, 3, padding=1)
        self.nd_conv = nn.Conv2d(base, base, 3, padding=1)
        self.normal_head = nn.Conv2d(base, 3, 3, padding=1)
        self.depth_head = nn.Conv2d(base, 1, 3, padding=1)
        self.f_s = shape_decoder(cfg)
        self.f_t = texture_decoder(cfg)
        # fixed random projection: pooled descriptor stays meaningful once
        # the trunk is trained, without needing its own objective
        proj = torch.randn(cfg.pool_dim, base * 4) / float(np.sqrt(base * 4))
        self.register_buffer("pool_proj", proj)
        self._stem_stride = stem_stride

    def forward(self, img: torch.Tensor) -> dict[str, torch.Tensor]:
        u2, _ = self.trunk.trunk(img)
        nd = u2
        if self._stem_stride > 1:
            nd = F.interpolate(nd, scale_factor=self._stem_stride, mode="nearest")
        # image-res skip: silhouette detail the downsampled trunk cannot carry
        nd = leaky(self.nd_conv(nd + leaky(self.nd_skip(img))))
        return {
            "normal": self.normal_head(nd),
            "depth": self.depth_head(nd),
            "fsv": self.fsv_head(u2),
            "ftv": self.ftv_head(u2),
        }

    def taps(self, img: torch.Tensor) -> list[torch.Tensor]:
        _, (s0, s1, s2) = self.trunk.trunk(img)
        return [s0, s1, s2]

    def pooled(self, img: torch.Tensor) -> torch.Tensor:
        _, (_, _, s2) = self.trunk.trunk(img)
        return s2.mean(dim=(2, 3)) @ self.pool_proj.T


def _to_torch_image(rgb: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1))).float()


class CorpusCache:
    """Train-split tensors kept in memory for batch assembly."""

    def __init__(self, corpus: CorpusSet, split: str = "train"):
        self.corpus = corpus
        self.indices = corpus.indices(split)
        self.camera = frontal_camera(corpus.resolution)
        self._samples = [corpus.load(i) for i in self.indices]
        self.images = torch.stack([_to_torch_image(s.rgb) for s in self._samples])
        self.normals = torch.stack([_to_torch_image(s.normal) for s in self._samples])
        self.depths = torch.stack([torch.from_numpy(s.depth).float().unsqueeze(0)
                                   for s in self._samples])
        self.bodies = [CapsuleBody(s.params) for s in self._samples]

    def __len__(self) -> int:
        return len(self.indices)

    def sample(self, i: int):
        return self._samples[i]


def _abort_checkpoint(module: nn.Module, out_dir, name: str, step: int) -> str | None:
    if out_dir is None:
        return None
    from .fileio import save_checkpoint

    path = Path(out_dir) / f"{name}_diverged_step{step}"
    save_checkpoint(path, module, {"step": step, "status": "diverged"})
    return str(path)


def train_reconstructor(corpus: CorpusSet, cfg: RunConfig, out_dir=None):
    """Joint training of the trunk, heads and field decoders against the
    analytic corpus fields. Returns (frozen Reconstructor, log rows)."""
    cache = CorpusCache(corpus)
    if len(cache) < 500:
        raise ContractViolation(f"reconstructor training needs >= 500 samples, got {len(cache)}")
    torch.manual_seed(sample_seed(cfg.seed, 0, "recon_init"))
    recon = Reconstructor(cfg)
    opt = torch.optim.Adam(recon.parameters(), lr=cfg.lr_recon,
                           betas=(0.9, 0.99))
    camera = cache.camera
    m = cfg.points_per_sample
    log: list[dict] = []

    val_idx = list(range(min(8, len(cache))))
    val_images = cache.images[val_idx]
    val_depths = cache.depths[val_idx]

    for step in range(cfg.recon_steps):
        rng = np.random.default_rng(sample_seed(cfg.seed, step, "recon_batch"))
        idx = rng.integers(0, len(cache), size=cfg.batch_size)
        imgs = cache.images[idx]
        out = recon(imgs)
        loss_normal = (out["normal"] - cache.normals[idx]).abs().mean()
        loss_depth = (out["depth"] - cache.depths[idx]).abs().mean()

        pts_np, sdf_t, col_t = [], [], []
        for ci in idx:
            s = cache.sample(int(ci))
            pts, _, _ = sample_training_points(s.depth, s.mask, camera, m,
                                               cfg.near_sigma, rng)
            body = cache.bodies[int(ci)]
            sdf_t.append(np.clip(body.sdf(pts), -1.0, 1.0))
            col_t.append(body.color(pts[:m // 2]))  # first half = near-surface
            pts_np.append(pts)
        pts = torch.from_numpy(np.stack(pts_np)).float()
        sdf_gt = torch.from_numpy(np.stack(sdf_t)).float()
        pred_sdf = decode_sdf_torch(out["fsv"], recon.f_s, pts)
        loss_sdf = (pred_sdf - sdf_gt).abs().mean()

        near_pts = pts[:, :m // 2]
        col_gt = torch.from_numpy(np.stack(col_t)).float()
        pred_col = decode_color_torch(out["ftv"], out["fsv"], recon.f_t, near_pts)
        loss_col = (pred_col - col_gt).abs().mean()

        total = 2.0 * loss_normal + loss_depth + loss_sdf + loss_col
        if not torch.isfinite(total):
            ckpt = _abort_checkpoint(recon, out_dir, "reconstructor", step)
            raise TrainingDiverged(f"reconstructor loss non-finite at step {step}", ckpt)
        opt.zero_grad()
        total.backward()
        opt.step()

        if step % cfg.val_every == 0 or step == cfg.recon_steps - 1:
            with torch.no_grad():
                val_out = recon(val_images)
                val_depth_l1 = float((val_out["depth"] - val_depths).abs().mean())
            log.append({"step": step, "total": float(total.detach()),
                        "normal": float(loss_normal.detach()),
                        "depth": float(loss_depth.detach()),
                        "sdf": float(loss_sdf.detach()),
                        "color": float(loss_col.detach()),
                        "val_depth_l1": val_depth_l1})
    recon.eval()
    for p in recon.parameters():
        p.requires_grad_(False)
    return recon, log


def reconstruct(recon: Reconstructor, image: np.ndarray):
    """One forward pass: image -> (normal, depth, F_sv^gt, F_tv^gt)."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (recon.image_size, recon.image_size, 3):
        raise ContractViolation(
            f"image shape {image.shape} != ({recon.image_size}, {recon.image_size}, 3)")
    with torch.no_grad():
        out = recon(_to_torch_image(image).unsqueeze(0))
    normal = out["normal"][0].numpy().transpose(1, 2, 0)
    depth = out["depth"][0, 0].numpy()
    f_sv = FeatureMap(out["fsv"][0].numpy(), "F_sv")
    f_tv = FeatureMap(out["ftv"][0].numpy(), "F_tv")
    return normal, depth, f_sv, f_tv


def train_2d_generator(corpus: CorpusSet, cfg: RunConfig, out_dir=None):
    """Adversarial training (non-saturating + R1) of the toy image GAN on
    frontal corpus renders. Returns (frozen generator, log rows)."""
    cache = CorpusCache(corpus)
    if len(cache) < 500:
        raise ContractViolation(f"2D generator training needs >= 500 images, got {len(cache)}")
    torch.manual_seed(sample_seed(cfg.seed, 0, "gan2d_init"))
    gen = StyleGenerator(cfg.latent_dim, cfg.style_dim, 3, cfg.image_size,
                         cfg.gen_base, sigmoid_out=True)
    disc = ConvDiscriminator(3, cfg.image_size, cfg.disc_base)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.adam_beta1, cfg.adam_beta2))
    log: list[dict] = []

    for step in range(cfg.gan2d_steps):
        rng = np.random.default_rng(sample_seed(cfg.seed, step, "gan2d_batch"))
        idx = rng.integers(0, len(cache), size=cfg.batch_size)
        real = cache.images[idx]
        z = torch.from_numpy(rng.standard_normal((cfg.batch_size, cfg.latent_dim))).float()
        with torch.no_grad():
            fake = gen(z)
        d_loss, d_stats = discriminator_step(disc, real, fake, cfg.r1_weight)
        if not torch.isfinite(d_loss):
            ckpt = _abort_checkpoint(gen, out_dir, "generator2d", step)
            raise TrainingDiverged(f"2D GAN discriminator diverged at step {step}", ckpt)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        z = torch.from_numpy(rng.standard_normal((cfg.batch_size, cfg.latent_dim))).float()
        g_loss = g_nonsat_loss(disc(gen(z)))
        if not torch.isfinite(g_loss):
            ckpt = _abort_checkpoint(gen, out_dir, "generator2d", step)
            raise TrainingDiverged(f"2D GAN generator diverged at step {step}", ckpt)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if step % cfg.val_every == 0 or step == cfg.gan2d_steps - 1:
            log.append({"step": step, "g": float(g_loss.detach()), **d_stats})
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen, log


def synth_image(gen: StyleGenerator, z: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        img = gen(torch.from_numpy(np.asarray(z, dtype=np.float32)).reshape(1, -1))
    return img[0].numpy().transpose(1, 2, 0)


def foreground_fraction(image: np.ndarray) -> float:
    return float((np.asarray(image).min(axis=-1) < FG_RGB_THRESHOLD).mean())


@dataclass
class PseudoGT:
    image: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    f_sv: FeatureMap
    f_tv: FeatureMap
    latent: np.ndarray | None
    source: str  # "corpus" | "synthesized"

    def __post_init__(self):
        has_latent = self.latent is not None
        if (self.source == "synthesized") != has_latent:
            raise ContractViolation("latent must be present iff source == synthesized")


def extract_pseudo_gt(recon: Reconstructor, g2d: StyleGenerator, corpus: CorpusSet,
                      n_corpus: int, n_synth: int, seed: int, out_dir) -> dict:
    """Write supervision records: n_corpus reconstructor passes over corpus
    renders plus n_synth over generated images (filtered to a plausible
    foreground fraction), the latter with their latent codes stored."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".write_probe").write_text("")
        (out / ".write_probe").unlink()
    except OSError as e:
        raise RuntimeError(f"pseudo-GT output directory not writable: {out} ({e})") from e

    rng = np.random.default_rng(sample_seed(seed, 0, "pgt"))
    train_idx = corpus.indices("train")
    if n_corpus > len(train_idx):
        raise ContractViolation(f"requested {n_corpus} corpus records, corpus train split has {len(train_idx)}")
    chosen = rng.choice(len(train_idx), size=n_corpus, replace=False)

    records = []
    for i in range(n_corpus):
        ci = train_idx[int(chosen[i])]
        sample = corpus.load(ci)
        records.append(("corpus", sample.rgb, None, {"corpus_index": ci}))

    attempts = 0
    max_attempts = max(20 * n_synth, 100)
    accepted = 0
    while accepted < n_synth:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"2D generator produced only {accepted}/{n_synth} usable images "
                f"in {attempts} attempts (foreground filter 0.05..0.6)")
        z = rng.standard_normal(g2d.latent_dim)
        img = synth_image(g2d, z)
        attempts += 1
        if not 0.05 < foreground_fraction(img) < 0.6:
            continue
        records.append(("synthesized", img.astype(np.float32), z.astype(np.float32), {}))
        accepted += 1

    from .corpus import split_counts

    n_corpus_train, _ = split_counts(n_corpus) if n_corpus else (0, 0)
    n_synth_train, _ = split_counts(n_synth) if n_synth else (0, 0)

    entries = []
    for i, (source, img, latent, extra) in enumerate(records):
        normal, depth, f_sv, f_tv = reconstruct(recon, img)
        name = f"record_{i:06d}"
        rdir = out / name
        rdir.mkdir(exist_ok=True)
        write_raw(rdir / "image.f32", img)
        write_raw(rdir / "normal.f32", normal)
        write_raw(rdir / "depth.f32", depth)
        write_raw(rdir / "f_sv.f32", f_sv.data)
        write_raw(rdir / "f_tv.f32", f_tv.data)
        within = i if source == "corpus" else i - n_corpus
        split = "train" if within < (n_corpus_train if source == "corpus" else n_synth_train) else "eval"
        meta = {
            "index": i, "source": source, "split": split,
            "shapes": {"image": list(img.shape), "normal": list(normal.shape),
                       "depth": list(depth.shape), "f_sv": list(f_sv.data.shape),
                       "f_tv": list(f_tv.data.shape)},
            "dtypes": {k: "<f4" for k in ("image", "normal", "depth", "f_sv", "f_tv")},
            **extra,
        }
        if latent is not None:
            meta["latent"] = [float(v) for v in latent]
        write_manifest(rdir / "manifest.json", meta)
        entries.append({"name": name, "source": source, "split": split, "index": i})

    manifest = {
        "n_corpus": n_corpus, "n_synth": n_synth, "seed": seed,
        "image_size": recon.image_size, "feature_size": recon.feature_size,
        "split_rule": "per-source, last ceil(5%) eval (min 1 train)",
        "records": entries,
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest


class PseudoGTSet:
    """Reader over an extracted pseudo-GT dataset."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root / "manifest.json")
        self.entries = self.manifest["records"]
        self.image_size = self.manifest["image_size"]
        self.feature_size = self.manifest["feature_size"]

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self, split: str | None = None, source: str | None = None) -> list[int]:
        return [i for i, e in enumerate(self.entries)
                if (split is None or e["split"] == split)
                and (source is None or e["source"] == source)]

    def load(self, i: int) -> PseudoGT:
        entry = self.entries[i]
        rdir = self.root / entry["name"]
        meta = read_manifest(rdir / "manifest.json")
        res = self.image_size
        fres = self.feature_size
        image = read_raw(rdir / "image.f32", (res, res, 3))
        normal = read_raw(rdir / "normal.f32", (res, res, 3))
        depth = read_raw(rdir / "depth.f32", (res, res))
        f_sv = FeatureMap(read_raw(rdir / "f_sv.f32", tuple(meta["shapes"]["f_sv"])), "F_sv")
        f_tv = FeatureMap(read_raw(rdir / "f_tv.f32", tuple(meta["shapes"]["f_tv"])), "F_tv")
        latent = np.array(meta["latent"], dtype=np.float32) if "latent" in meta else None
        return PseudoGT(image=image, normal=normal, depth=depth, f_sv=f_sv, f_tv=f_tv,
                        latent=latent, source=meta["source"])

    def meta(self, i: int) -> dict:
        return read_manifest(self.root / self.entries[i]["name"] / "manifest.json")
