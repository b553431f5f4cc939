import numpy as np
import pytest
import torch

from bodyforge.decoders import (FieldDecoder, decode_color_torch, decode_sdf_torch,
                                query_color, query_sdf, shape_decoder, texture_decoder)
from bodyforge.errors import ContractViolation
from bodyforge.fields import FeatureMap, frontal_camera, sample_bilinear
from bodyforge.nets import bilinear_sample_torch


class LastInputDecoder(FieldDecoder):
    """Stub: returns the final input component (the camera depth)."""

    def forward(self, x):
        return x[..., -1:]


class ConstDecoder(FieldDecoder):
    def __init__(self, feature_channels, out_dim, value):
        super().__init__(feature_channels, out_dim)
        self.value = value

    def forward(self, x):
        return torch.full((*x.shape[:-1], self.out_dim), self.value, dtype=x.dtype)


def test_query_sdf_stub_returns_depth(rng):
    fmap = FeatureMap(rng.normal(size=(4, 16, 16)).astype(np.float32), "F_sv")
    dec = LastInputDecoder(4, 1)
    cam = frontal_camera(16)
    assert abs(query_sdf(fmap, dec, cam, np.array([0.0, 0.0, 0.5])) - 0.5) < 1e-7
    assert abs(query_sdf(fmap, dec, cam, np.array([0.3, -0.2, -0.8])) - (-0.8)) < 1e-7


def test_query_sdf_constant_zero(rng):
    fmap = FeatureMap(rng.normal(size=(4, 8, 8)).astype(np.float32), "F_sv")
    dec = ConstDecoder(4, 1, 0.0)
    cam = frontal_camera(8)
    pts = rng.uniform(-1, 1, size=(50, 3))
    assert np.all(query_sdf(fmap, dec, cam, pts) == 0.0)


def test_query_sdf_contracts(rng):
    cam = frontal_camera(8)
    f_sv = FeatureMap(rng.normal(size=(4, 8, 8)).astype(np.float32), "F_sv")
    f_s_img = FeatureMap(rng.normal(size=(4, 8, 8)).astype(np.float32), "F_s")
    with pytest.raises(ContractViolation):
        query_sdf(f_s_img, ConstDecoder(4, 1, 0.0), cam, np.zeros(3))
    with pytest.raises(ContractViolation):
        query_sdf(f_sv, ConstDecoder(6, 1, 0.0), cam, np.zeros(3))
    with pytest.raises(ContractViolation):
        query_sdf(f_sv, ConstDecoder(4, 3, 0.0), cam, np.zeros(3))


def test_query_color_constant_and_range(rng):
    f_tv = FeatureMap(rng.normal(size=(3, 8, 8)).astype(np.float32), "F_tv")
    f_sv = FeatureMap(rng.normal(size=(5, 8, 8)).astype(np.float32), "F_sv")
    cam = frontal_camera(8)
    const = ConstDecoder(8, 3, 0.5)
    out = query_color(f_tv, f_sv, const, cam, np.array([0.1, 0.2, 0.3]))
    assert np.allclose(out, 0.5)
    torch.manual_seed(0)
    dec = texture_decoder(type("C", (), {"c_sv": 5, "c_tv": 3, "decoder_hidden": 32,
                                         "decoder_layers": 2})())
    pts = rng.uniform(-1, 1, size=(100, 3))
    cols = query_color(f_tv, f_sv, dec, cam, pts)
    assert cols.min() >= 0.0 and cols.max() <= 1.0


def test_query_color_channel_contract(rng):
    f_tv = FeatureMap(rng.normal(size=(3, 8, 8)).astype(np.float32), "F_tv")
    f_sv = FeatureMap(rng.normal(size=(5, 8, 8)).astype(np.float32), "F_sv")
    with pytest.raises(ContractViolation):
        query_color(f_tv, f_sv, ConstDecoder(7, 3, 0.1), frontal_camera(8), np.zeros(3))


def test_torch_bilinear_matches_numpy(rng):
    data = rng.normal(size=(6, 12, 12)).astype(np.float32)
    xy = rng.uniform(-2, 14, size=(200, 2))
    ref = sample_bilinear(data, xy)
    out = bilinear_sample_torch(torch.from_numpy(data).unsqueeze(0),
                                torch.from_numpy(xy).unsqueeze(0).float())
    assert np.abs(out[0].numpy() - ref).max() < 1e-5


def test_decode_sdf_torch_matches_query(rng):
    torch.manual_seed(1)
    dec = shape_decoder(type("C", (), {"c_sv": 4, "decoder_hidden": 32, "decoder_layers": 2})())
    data = rng.normal(size=(4, 16, 16)).astype(np.float32)
    fmap = FeatureMap(data, "F_sv")
    cam = frontal_camera(16)
    pts = rng.uniform(-1, 1, size=(60, 3))
    ref = query_sdf(fmap, dec, cam, pts)
    out = decode_sdf_torch(torch.from_numpy(data).unsqueeze(0), dec,
                           torch.from_numpy(pts).unsqueeze(0).float())
    assert np.abs(out[0].detach().numpy() - ref).max() < 1e-5


def test_decode_color_torch_matches_query(rng):
    torch.manual_seed(2)
    dec = texture_decoder(type("C", (), {"c_sv": 4, "c_tv": 3, "decoder_hidden": 32,
                                         "decoder_layers": 2})())
    tv = rng.normal(size=(3, 16, 16)).astype(np.float32)
    sv = rng.normal(size=(4, 16, 16)).astype(np.float32)
    cam = frontal_camera(16)
    pts = rng.uniform(-1, 1, size=(40, 3))
    ref = query_color(FeatureMap(tv, "F_tv"), FeatureMap(sv, "F_sv"), dec, cam, pts)
    out = decode_color_torch(torch.from_numpy(tv).unsqueeze(0),
                             torch.from_numpy(sv).unsqueeze(0), dec,
                             torch.from_numpy(pts).unsqueeze(0).float())
    assert np.abs(out[0].detach().numpy() - ref).max() < 1e-5


def test_query_determinism(rng):
    torch.manual_seed(3)
    dec = shape_decoder(type("C", (), {"c_sv": 4, "decoder_hidden": 32, "decoder_layers": 2})())
    fmap = FeatureMap(rng.normal(size=(4, 8, 8)).astype(np.float32), "F_sv")
    cam = frontal_camera(8)
    pts = rng.uniform(-1, 1, size=(20, 3))
    a = query_sdf(fmap, dec, cam, pts)
    b = query_sdf(fmap, dec, cam, pts)
    assert np.array_equal(a, b)
