"""Field decoders: MLPs mapping (sampled pixel-aligned feature, camera depth)
to an implicit value — signed distance (1 channel, no activation) or RGB
(3 channels, sigmoid). Includes the numpy-facing query operations and the
torch-side batch decoding used inside training loops.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ContractViolation
from .fields import Camera, FeatureMap, sample_bilinear
from .nets import bilinear_sample_torch, feature_xy, leaky


class FieldDecoder(nn.Module):
    """Pixel-aligned MLP decoder. input = feature channels + 1 (camera depth)."""

    def __init__(self, feature_channels: int, out_dim: int, hidden: int = 128,
                 layers: int = 4, out_activation: str = "none"):
        super().__init__()
        if out_activation not in ("none", "sigmoid"):
            raise ContractViolation(f"unknown activation {out_activation!r}")
        self.feature_channels = feature_channels
        self.input_dim = feature_channels + 1
        self.out_dim = out_dim
        self.out_activation = out_activation
        dims = [self.input_dim] + [hidden] * layers + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = leaky(layer(x))
        x = self.layers[-1](x)
        if self.out_activation == "sigmoid":
            x = torch.sigmoid(x).clamp(0.0, 1.0)
        return x


def shape_decoder(cfg) -> FieldDecoder:
    return FieldDecoder(cfg.c_sv, 1, cfg.decoder_hidden, cfg.decoder_layers, "none")


def texture_decoder(cfg) -> FieldDecoder:
    return FieldDecoder(cfg.c_tv + cfg.c_sv, 3, cfg.decoder_hidden, cfg.decoder_layers, "sigmoid")


def _project_to_features(p: np.ndarray, camera: Camera, resolution: int):
    """World -> (feature pixel coords, camera depth) for a map of given size."""
    pts = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    cam = pts @ camera.view_rotation.T
    xy = np.empty((len(pts), 2))
    xy[:, 0] = (cam[:, 0] + 1.0) / 2.0 * resolution
    xy[:, 1] = (1.0 - cam[:, 1]) / 2.0 * resolution
    return xy, cam[:, 2]


def query_sdf(f_sv: FeatureMap, f_s: FieldDecoder, camera: Camera, p: np.ndarray):
    """Signed distance at world point(s) p from a shape feature volume."""
    if f_sv.role != "F_sv":
        raise ContractViolation(f"query_sdf expects an F_sv map, got {f_sv.role}")
    if f_s.out_dim != 1:
        raise ContractViolation("shape decoder must have out_dim 1")
    if f_s.feature_channels != f_sv.channels:
        raise ContractViolation(
            f"decoder expects {f_s.feature_channels} channels, map has {f_sv.channels}")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    xy, d = _project_to_features(p, camera, f_sv.resolution)
    feats = sample_bilinear(f_sv.data, xy)
    with torch.no_grad():
        inp = torch.from_numpy(
            np.concatenate([feats, d[:, None]], axis=1).astype(np.float32))
        out = f_s(inp).numpy().reshape(-1)
    return float(out[0]) if single else out.astype(np.float64)


def query_color(f_tv: FeatureMap, f_sv: FeatureMap, f_t: FieldDecoder,
                camera: Camera, p: np.ndarray):
    """RGB at world point(s) p from texture + shape feature volumes."""
    if f_tv.role != "F_tv" or f_sv.role != "F_sv":
        raise ContractViolation("query_color expects (F_tv, F_sv) maps")
    if f_t.out_dim != 3:
        raise ContractViolation("texture decoder must have out_dim 3")
    if f_t.feature_channels != f_tv.channels + f_sv.channels:
        raise ContractViolation(
            f"decoder expects {f_t.feature_channels} channels, maps have "
            f"{f_tv.channels}+{f_sv.channels}")
    if f_tv.resolution != f_sv.resolution:
        raise ContractViolation("texture/shape maps must share resolution")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    xy, d = _project_to_features(p, camera, f_tv.resolution)
    feats_tv = sample_bilinear(f_tv.data, xy)
    feats_sv = sample_bilinear(f_sv.data, xy)
    with torch.no_grad():
        inp = torch.from_numpy(
            np.concatenate([feats_tv, feats_sv, d[:, None]], axis=1).astype(np.float32))
        out = f_t(inp).numpy()
    return out[0].astype(np.float64) if single else out.astype(np.float64)


def decode_sdf_torch(fsv: torch.Tensor, f_s: FieldDecoder, points: torch.Tensor) -> torch.Tensor:
    """Batched differentiable SDF decode under the frontal alignment.

    fsv: (B, C, R, R); points: (B, N, 3) -> (B, N).
    """
    xy = feature_xy(points, fsv.shape[-1])
    feats = bilinear_sample_torch(fsv, xy)
    inp = torch.cat([feats, points[..., 2:3]], dim=-1)
    return f_s(inp).squeeze(-1)


def decode_color_torch(ftv: torch.Tensor, fsv: torch.Tensor, f_t: FieldDecoder,
                       points: torch.Tensor) -> torch.Tensor:
    """Batched differentiable RGB decode: (B,N,3) in [0,1]."""
    xy = feature_xy(points, ftv.shape[-1])
    feats = torch.cat([bilinear_sample_torch(ftv, xy), bilinear_sample_torch(fsv, xy)], dim=-1)
    inp = torch.cat([feats, points[..., 2:3]], dim=-1)
    return f_t(inp)


def sdf_grid_query(f_sv: FeatureMap, f_s: FieldDecoder, camera: Camera):
    """Batched callable p -> sdf for extract_mesh / rendering."""
    def query(points):
        return query_sdf(f_sv, f_s, camera, points)
    return query


def color_grid_query(f_tv: FeatureMap, f_sv: FeatureMap, f_t: FieldDecoder, camera: Camera):
    def query(points):
        return query_color(f_tv, f_sv, f_t, camera, points)
    return query
