"""Run configuration: one flat dataclass, JSON round-trip, strict validation.

Every output artifact records ``config_hash`` so that runs are traceable.
Loss weights default to the published values; everything else is a
desk-scale choice and can be overridden from the config file or CLI flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # resolutions
    image_size: int = 128          # corpus render / teacher input resolution
    feature_size: int = 64         # H_f = W_f of all pixel-aligned feature maps
    mesh_grid: int = 64            # marching-cubes grid for mesh extraction
    render_grid: int = 64          # SDF grid resolution for field-image rendering

    # channel counts
    c_s: int = 16                  # shape feature image channels (>= 5; first 4 supervised)
    c_t: int = 16                  # texture feature image channels
    c_sv: int = 32                 # shape feature volume channels
    c_tv: int = 32                 # texture feature volume channels
    latent_dim: int = 64

    # network sizes
    style_dim: int = 64            # mapping-network output width
    gen_base: int = 32             # synthesis-net base channels
    enc_base: int = 32             # hourglass base channels
    disc_base: int = 32            # discriminator base channels
    unet_base: int = 24            # refiner base channels
    pool_dim: int = 32             # pooled image-descriptor width (FID extractor)
    decoder_hidden: int = 128      # field-decoder MLP width
    decoder_layers: int = 4

    # loss weights (shape stage)
    w_sdf: float = 20.0
    w_sv: float = 40.0
    w_normal: float = 20.0
    w_depth: float = 20.0
    w_adv_sv: float = 1.0
    # loss weights (texture stage)
    w_rgb: float = 20.0
    w_tv: float = 40.0
    w_adv_tv: float = 1.0
    # loss weights (refinement stage)
    w_refine_l1: float = 1.0
    w_refine_perc: float = 1.0
    # R1 gradient penalty weight (applied to real inputs only)
    r1_weight: float = 10.0

    # point sampling
    points_per_sample: int = 512   # M, split 50/50 near-surface / uniform
    near_sigma: float = 0.03       # camera-z perturbation std for near-surface points
    fg_depth_threshold: float = 0.9  # depth < threshold counts as foreground
    rgb_near_only: bool = True     # RGB loss sampled near surface only

    # optimizer
    lr_g: float = 2e-4
    lr_recon: float = 1e-3
    lr_d: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    batch_size: int = 8

    # stage schedules
    recon_steps: int = 4000
    gan2d_steps: int = 8000
    shape_steps: int = 20000
    texture_steps: int = 20000
    refine_steps: int = 20000
    unpaired_fraction: float = 0.5
    val_every: int = 50            # validation-loss cadence (steps)

    # corpus
    corpus_n: int = 2000
    corpus_resolution: int = 128

    # pseudo-GT extraction
    pgt_corpus: int = 500
    pgt_synth: int = 1500

    # refinement data
    refine_views: int = 8          # azimuth views for repainting / stage-3 pairs
    refine_records: int = 64       # corpus-source records used to build stage-3 pairs

    # inversion
    inv_steps: int = 500
    inv_lr: float = 0.05
    inv_restarts: int = 4

    # evaluation
    eval_clouds: int = 36          # generated / reference set sizes for COV, MMD, FPD
    cloud_points: int = 2048       # points sampled per mesh surface
    fid_images: int = 72           # per-set image count for FID
    fid3d_samples: int = 24
    fid3d_views: int = 2

    # reproducibility
    seed: int = 0
    torch_threads: int = 1

    def __post_init__(self):
        if self.c_s < 5:
            raise ConfigError(f"c_s must be >= 5 (4 supervised channels + features), got {self.c_s}")
        if self.corpus_resolution not in (64, 128, 256):
            raise ConfigError(f"corpus_resolution must be one of 64/128/256, got {self.corpus_resolution}")
        if self.points_per_sample % 2 != 0:
            raise ConfigError("points_per_sample must be even (50/50 near/uniform split)")
        if not 0.0 <= self.unpaired_fraction <= 1.0:
            raise ConfigError("unpaired_fraction must lie in [0, 1]")
        for name in ("w_sdf", "w_sv", "w_normal", "w_depth", "w_adv_sv",
                     "w_rgb", "w_tv", "w_adv_tv", "r1_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.image_size % self.feature_size != 0:
            raise ConfigError("image_size must be an integer multiple of feature_size")
        if self.corpus_resolution != self.image_size:
            raise ConfigError(
                "corpus_resolution must equal image_size (the teacher consumes "
                "corpus renders directly)")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(canon.encode(), digest_size=8).hexdigest()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def micro_config(**overrides) -> RunConfig:
    """A configuration small enough for CPU smoke runs and the test suite."""
    base = dict(
        image_size=64, feature_size=32, mesh_grid=48, render_grid=48,
        c_s=8, c_t=8, c_sv=8, c_tv=8, latent_dim=16,
        style_dim=32, gen_base=24, enc_base=24, disc_base=16, unet_base=12, pool_dim=12,
        decoder_hidden=64, decoder_layers=4,
        points_per_sample=256, batch_size=8,
        recon_steps=2000, gan2d_steps=1500, shape_steps=1500, texture_steps=1200,
        refine_steps=240, val_every=50,
        corpus_n=530, corpus_resolution=64,
        pgt_corpus=72, pgt_synth=256,
        refine_views=4, refine_records=12,
        inv_steps=200, inv_restarts=2,
        eval_clouds=36, cloud_points=512, fid_images=56,
        fid3d_samples=7, fid3d_views=2,
    )
    base.update(overrides)
    return RunConfig(**base)
