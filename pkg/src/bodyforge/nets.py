"""Torch building blocks: style-based generator (mapping + synthesis),
hourglass encoder, conv discriminator, UNet refiner, and the differentiable
pixel-aligned sampling used during training.

The numpy sampling in fields.py is the inference-side twin of
``bilinear_sample_torch``; both use integer-pixel-center alignment.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def leaky(x):
    return F.leaky_relu(x, 0.2)


class MappingNet(nn.Module):
    """Latent z -> style w (z is second-moment normalized first)."""

    def __init__(self, latent_dim: int, style_dim: int, layers: int = 4):
        super().__init__()
        dims = [latent_dim] + [style_dim] * layers
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(layers))

    def forward(self, z):
        x = z / torch.sqrt((z * z).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = leaky(layer(x))
        return x


class StyleBlock(nn.Module):
    """conv3x3 + per-channel style modulation + lrelu."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.affine = nn.Linear(style_dim, out_ch * 2)

    def forward(self, x, w):
        x = self.conv(x)
        st = self.affine(w)
        scale, shift = st.chunk(2, dim=1)
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return leaky(x)


class SynthesisNet(nn.Module):
    """Learned 4x4 constant upsampled to the target resolution."""

    def __init__(self, style_dim: int, out_channels: int, resolution: int,
                 base: int = 32, sigmoid_out: bool = False):
        super().__init__()
        assert resolution >= 8 and resolution & (resolution - 1) == 0, "resolution must be a power of two"
        self.n_up = int(np.log2(resolution // 4))
        ch0 = base * 4
        self.const = nn.Parameter(torch.randn(1, ch0, 4, 4))
        chans = [ch0]
        for _ in range(self.n_up):
            chans.append(max(base, chans[-1] // 2))
        self.blocks = nn.ModuleList(StyleBlock(chans[i], chans[i + 1], style_dim)
                                    for i in range(self.n_up))
        self.out = nn.Conv2d(chans[-1], out_channels, 1)
        self.sigmoid_out = sigmoid_out

    def forward(self, w):
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for block in self.blocks:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, w)
        x = self.out(x)
        return torch.sigmoid(x) if self.sigmoid_out else x


class StyleGenerator(nn.Module):
    """mapping + synthesis: z -> pixel-aligned feature image."""

    def __init__(self, latent_dim: int, style_dim: int, out_channels: int,
                 resolution: int, base: int = 32, sigmoid_out: bool = False):
        super().__init__()
        self.latent_dim = latent_dim
        self.mapping = MappingNet(latent_dim, style_dim)
        self.synthesis = SynthesisNet(style_dim, out_channels, resolution, base, sigmoid_out)

    def forward(self, z):
        return self.synthesis(self.mapping(z))


class HourglassEncoder(nn.Module):
    """Fully convolutional down/up encoder with additive skips.

    stem_stride > 1 reduces the input resolution (image -> feature grid);
    the output resolution equals input // stem_stride. bias_size adds a
    learned per-pixel output bias map: a plain conv stack is translation
    equivariant and cannot express the constant spatial offset that
    pixel-aligned regression targets carry.
    """

    def __init__(self, in_channels: int, out_channels: int, base: int = 32,
                 stem_stride: int = 1, bias_size: int | None = None):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, base, 3, stride=stem_stride, padding=1)
        self.down1 = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(base * 4, base * 4, 3, padding=1)
        self.up1 = nn.Conv2d(base * 4, base * 2, 3, padding=1)
        self.up2 = nn.Conv2d(base * 2, base, 3, padding=1)
        self.head = nn.Conv2d(base, out_channels, 3, padding=1)
        self.out_bias = None
        if bias_size is not None:
            self.out_bias = nn.Parameter(torch.zeros(1, out_channels, bias_size, bias_size))

    def trunk(self, x):
        s0 = leaky(self.stem(x))
        s1 = leaky(self.down1(s0))
        s2 = leaky(self.mid(leaky(self.down2(s1))))
        u1 = leaky(self.up1(F.interpolate(s2, scale_factor=2, mode="nearest")) + s1)
        u2 = leaky(self.up2(F.interpolate(u1, scale_factor=2, mode="nearest")) + s0)
        return u2, (s0, s1, s2)

    def forward(self, x):
        u2, _ = self.trunk(x)
        out = self.head(u2)
        if self.out_bias is not None:
            out = out + self.out_bias
        return out


class ConvDiscriminator(nn.Module):
    """Stride-2 conv stack over a feature map -> real logit."""

    def __init__(self, in_channels: int, resolution: int, base: int = 32):
        super().__init__()
        layers = []
        ch = in_channels
        res = resolution
        nxt = base
        while res > 4:
            layers.append(nn.Conv2d(ch, nxt, 3, stride=2, padding=1))
            ch = nxt
            nxt = min(nxt * 2, base * 8)
            res //= 2
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(ch * res * res, 1)

    def forward(self, x):
        for conv in self.convs:
            x = leaky(conv(x))
        return self.fc(x.flatten(1))


class UNet(nn.Module):
    """Image-to-image refiner with skip connections.

    Output is a bounded residual on the input, so an untrained refiner is
    the identity mapping and training can only sharpen from there."""

    def __init__(self, base: int = 24):
        super().__init__()
        self.enc0 = nn.Conv2d(3, base, 3, padding=1)
        self.enc1 = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(base * 2, base * 4, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(base * 4, base * 4, 3, padding=1)
        self.dec1 = nn.Conv2d(base * 4 + base * 2, base * 2, 3, padding=1)
        self.dec0 = nn.Conv2d(base * 2 + base, base, 3, padding=1)
        self.out = nn.Conv2d(base, 3, 1)

    def forward(self, x):
        e0 = leaky(self.enc0(x))
        e1 = leaky(self.enc1(e0))
        e2 = leaky(self.enc2(e1))
        m = leaky(self.mid(e2))
        d1 = leaky(self.dec1(torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), e1], dim=1)))
        d0 = leaky(self.dec0(torch.cat([F.interpolate(d1, scale_factor=2, mode="nearest"), e0], dim=1)))
        return (x + 0.5 * torch.tanh(self.out(d0))).clamp(0.0, 1.0)


def bilinear_sample_torch(fmap: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of fields.sample_bilinear.

    fmap: (B, C, H, W); xy: (B, N, 2) continuous pixel coords with integer
    pixel centers; zero padding outside. Returns (B, N, C).
    """
    b, c, h, w = fmap.shape
    x = xy[..., 0]
    y = xy[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = (x - x0).unsqueeze(-1)
    wy = (y - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    out = fmap.new_zeros(b, xy.shape[1], c)
    bidx = torch.arange(b, device=fmap.device).unsqueeze(1).expand(-1, xy.shape[1])
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).unsqueeze(-1)
        vals = fmap[bidx, :, yi.clamp(0, h - 1), xi.clamp(0, w - 1)]
        out = out + torch.where(valid, vals * weight, torch.zeros_like(vals))
    return out


def feature_xy(points: torch.Tensor, resolution: int) -> torch.Tensor:
    """World points (frontal alignment) -> feature-map pixel coords (B,N,2)."""
    x = (points[..., 0] + 1.0) / 2.0 * resolution
    y = (1.0 - points[..., 1]) / 2.0 * resolution
    return torch.stack([x, y], dim=-1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def seeded_init(seed: int):
    """Context that makes module construction deterministic."""
    torch.manual_seed(seed)
