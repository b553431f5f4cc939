"""Procedural capsule-human corpus: articulated bodies with analytic signed
distance and color fields, rendered orthographically to RGB/depth/normal/mask
bundles. Stands in for scanned/photographed humans at desk scale.

Body = 10 capsules (head, torso as a rounded cone, upper/lower arms and
legs) + 2 shoe spheres, blended by smooth-min (blend radius 0.012 canonical
units). Garment offsets inflate primitive radii, so geometry and the region
color field stay consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractViolation
from .fields import BACKGROUND_DEPTH, Camera, frontal_camera
from .fileio import read_manifest, read_raw, sample_seed, write_manifest, write_raw

BLEND_RADIUS = 0.012  # kept small: smooth-min shallows the field along
                      # equidistance ridges (leg gap), deviation scales with it
RAY_START_Z = 1.70
RAY_T_MAX = 3.6
RAY_EPS = 1e-4
RAY_MIN_STEP = 1e-4
RAY_MAX_STEPS = 256
NORMAL_FD_STEP = 1e-3

REGION_NAMES = ("skin", "hair", "shirt", "pants", "shoes")
R_SKIN, R_HAIR, R_SHIRT, R_PANTS, R_SHOES = range(5)

# primitive order: torso, head, arms (upper/lower x L/R), legs, shoes
_PRIM_TORSO, _PRIM_HEAD = 0, 1
_N_PRIMS = 12

_ARM_BASE_ABDUCT = 0.35   # A-pose resting angle, radians from vertical
_LEG_BASE_ABDUCT = 0.07
_LEG_POSE_GAIN = 0.4      # keeps legs from crossing at extreme pose angles
_HAIR_SPLIT = 0.5         # head-axis fraction above which the region is hair


@dataclass
class BodyParams:
    height: float
    limb_lengths: np.ndarray    # (8,) upper/lower arm L/R, upper/lower leg L/R
    limb_radii: np.ndarray      # (6,) upper arm, lower arm, upper leg, lower leg, head, shoe
    torso_dims: np.ndarray      # (3,) hip radius, shoulder radius, torso length
    pose_angles: np.ndarray     # (10,) shoulder/elbow/hip/knee L+R, head tilt, torso lean
    garment_offsets: np.ndarray  # (4,) shirt torso, shirt sleeve, pants upper, pants lower
    region_colors: np.ndarray   # (5,3) skin, hair, shirt, pants, shoes
    seed: int

    def __post_init__(self):
        self.limb_lengths = np.asarray(self.limb_lengths, dtype=np.float64).reshape(8)
        self.limb_radii = np.asarray(self.limb_radii, dtype=np.float64).reshape(6)
        self.torso_dims = np.asarray(self.torso_dims, dtype=np.float64).reshape(3)
        self.pose_angles = np.asarray(self.pose_angles, dtype=np.float64).reshape(10)
        self.garment_offsets = np.asarray(self.garment_offsets, dtype=np.float64).reshape(4)
        self.region_colors = np.asarray(self.region_colors, dtype=np.float64).reshape(5, 3)
        if (self.limb_lengths <= 0).any() or (self.limb_radii <= 0).any() or (self.torso_dims <= 0).any():
            raise ContractViolation("limb lengths/radii and torso dims must be strictly positive")
        if (self.garment_offsets < 0).any():
            raise ContractViolation("garment offsets must be >= 0")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "limb_lengths": self.limb_lengths.tolist(),
            "limb_radii": self.limb_radii.tolist(),
            "torso_dims": self.torso_dims.tolist(),
            "pose_angles": self.pose_angles.tolist(),
            "garment_offsets": self.garment_offsets.tolist(),
            "region_colors": self.region_colors.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(**{k: (np.array(v) if isinstance(v, list) else v) for k, v in d.items()})


def sample_body_params(rng_seed: int) -> BodyParams:
    """Deterministic body sampler; all derived fields satisfy the invariants."""
    rng = np.random.default_rng(rng_seed)
    h = rng.uniform(1.4, 2.0)
    u = rng.uniform

    arm_u = u(0.15, 0.18) * h
    arm_l = u(0.14, 0.17) * h
    leg_u = u(0.22, 0.26) * h
    leg_l = u(0.20, 0.24) * h
    jit = lambda v: v * u(0.985, 1.015)
    limb_lengths = np.array([jit(arm_u), jit(arm_u), jit(arm_l), jit(arm_l),
                             jit(leg_u), jit(leg_u), jit(leg_l), jit(leg_l)])

    limb_radii = np.array([
        u(0.028, 0.042) * h,   # upper arm
        u(0.022, 0.034) * h,   # lower arm
        u(0.050, 0.068) * h,   # upper leg
        u(0.032, 0.045) * h,   # lower leg
        u(0.055, 0.072) * h,   # head
        u(0.040, 0.055) * h,   # shoe
    ])
    torso_dims = np.array([u(0.080, 0.105) * h, u(0.085, 0.115) * h, u(0.28, 0.34) * h])

    pose_angles = u(-0.35, 0.35, size=10)

    garment_offsets = np.array([
        u(0.006, 0.020) * h,
        0.0 if u() < 0.3 else u(0.004, 0.016) * h,   # sleeveless sometimes
        u(0.004, 0.018) * h,
        0.0 if u() < 0.3 else u(0.003, 0.012) * h,   # shorts sometimes
    ])

    skin_base = u(0.45, 0.92)
    skin = np.array([skin_base, skin_base * u(0.72, 0.85), skin_base * u(0.52, 0.70)])
    hair = u(0.02, 0.45, size=3)
    shirt = u(0.05, 0.95, size=3)
    pants = u(0.05, 0.95, size=3)
    shoes = u(0.05, 0.95, size=3)
    region_colors = np.clip(np.stack([skin, hair, shirt, pants, shoes]), 0.0, 1.0)

    return BodyParams(height=h, limb_lengths=limb_lengths, limb_radii=limb_radii,
                      torso_dims=torso_dims, pose_angles=pose_angles,
                      garment_offsets=garment_offsets, region_colors=region_colors,
                      seed=int(rng_seed))


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class CapsuleBody:
    """Primitive arrays derived from BodyParams, normalized into the
    canonical box with >= 0.05 margin per axis."""

    def __init__(self, params: BodyParams):
        self.params = params
        seg_a, seg_b, rad_a, rad_b, regions = self._build_raw(params)
        seg_a, seg_b, rad_a, rad_b = self._normalize(seg_a, seg_b, rad_a, rad_b)
        self.seg_a, self.seg_b = seg_a, seg_b
        self.rad_a, self.rad_b = rad_a, rad_b
        self.regions = regions

    @staticmethod
    def _build_raw(p: BodyParams):
        r_ua, r_la, r_ul, r_ll, r_head, r_shoe = p.limb_radii
        off_shirt, off_sleeve, off_pu, off_pl = p.garment_offsets
        r_hip, r_sh, torso_len = p.torso_dims
        pose = p.pose_angles

        seg_a = np.zeros((_N_PRIMS, 3))
        seg_b = np.zeros((_N_PRIMS, 3))
        rad_a = np.zeros(_N_PRIMS)
        rad_b = np.zeros(_N_PRIMS)
        regions = np.zeros(_N_PRIMS, dtype=np.int64)

        lean = _rot_z(pose[9] * 0.3)
        # torso: rounded cone pelvis -> neck, garment-inflated
        pelvis = np.zeros(3)
        neck = lean @ np.array([0.0, torso_len, 0.0])
        seg_a[_PRIM_TORSO], seg_b[_PRIM_TORSO] = pelvis, neck
        rad_a[_PRIM_TORSO] = r_hip + off_shirt
        rad_b[_PRIM_TORSO] = r_sh + off_shirt
        regions[_PRIM_TORSO] = R_SHIRT if off_shirt > 0 else R_SKIN

        # head capsule above the neck, tilted by pose[8]
        head_dir = _rot_z(pose[8]) @ np.array([0.0, 1.0, 0.0])
        head_a = neck + head_dir * (r_sh * 0.55 + r_head * 0.55)
        head_b = head_a + head_dir * (0.9 * r_head)
        seg_a[_PRIM_HEAD], seg_b[_PRIM_HEAD] = head_a, head_b
        rad_a[_PRIM_HEAD] = rad_b[_PRIM_HEAD] = r_head
        regions[_PRIM_HEAD] = R_SKIN  # split into hair by the color field

        idx = 2
        for side, sh_pose, el_pose in ((-1.0, pose[0], pose[2]), (1.0, pose[1], pose[3])):
            shoulder = neck + np.array([side * r_sh * 0.95, -r_sh * 0.30, 0.0])
            theta = _ARM_BASE_ABDUCT + sh_pose
            d1 = np.array([side * math.sin(theta), -math.cos(theta), 0.0])
            elbow = shoulder + d1 * p.limb_lengths[0 if side < 0 else 1]
            theta2 = theta + el_pose
            d2 = np.array([side * math.sin(theta2), -math.cos(theta2), 0.0])
            wrist = elbow + d2 * p.limb_lengths[2 if side < 0 else 3]
            seg_a[idx], seg_b[idx] = shoulder, elbow
            rad_a[idx] = rad_b[idx] = r_ua + off_sleeve
            regions[idx] = R_SHIRT if off_sleeve > 0 else R_SKIN
            seg_a[idx + 1], seg_b[idx + 1] = elbow, wrist
            rad_a[idx + 1] = rad_b[idx + 1] = r_la
            regions[idx + 1] = R_SKIN
            idx += 2

        hip_off = 0.55 * r_hip
        for side, hip_pose, knee_pose in ((-1.0, pose[4], pose[6]), (1.0, pose[5], pose[7])):
            hip = np.array([side * hip_off, 0.0, 0.0])
            phi = _LEG_BASE_ABDUCT + _LEG_POSE_GAIN * hip_pose
            d1 = np.array([side * math.sin(phi), -math.cos(phi), 0.0])
            knee = hip + d1 * p.limb_lengths[4 if side < 0 else 5]
            phi2 = phi + _LEG_POSE_GAIN * knee_pose
            d2 = np.array([side * math.sin(phi2), -math.cos(phi2), 0.0])
            ankle = knee + d2 * p.limb_lengths[6 if side < 0 else 7]
            seg_a[idx], seg_b[idx] = hip, knee
            rad_a[idx] = rad_b[idx] = r_ul + off_pu
            regions[idx] = R_PANTS if off_pu > 0 else R_SKIN
            seg_a[idx + 1], seg_b[idx + 1] = knee, ankle
            rad_a[idx + 1] = rad_b[idx + 1] = r_ll + off_pl
            regions[idx + 1] = R_PANTS if off_pl > 0 else R_SKIN
            idx += 2

        for ankle_idx in (7, 9):  # left / right lower-leg endpoints
            ankle = seg_b[ankle_idx]
            center = ankle + np.array([0.0, -r_shoe * 0.35, r_shoe * 0.45])
            seg_a[idx], seg_b[idx] = center, center
            rad_a[idx] = rad_b[idx] = r_shoe
            regions[idx] = R_SHOES
            idx += 1
        return seg_a, seg_b, rad_a, rad_b, regions

    @staticmethod
    def _normalize(seg_a, seg_b, rad_a, rad_b):
        rmax = np.maximum(rad_a, rad_b)[:, None]
        lo = np.minimum(seg_a, seg_b) - rmax
        hi = np.maximum(seg_a, seg_b) + rmax
        bb_lo = lo.min(axis=0)
        bb_hi = hi.max(axis=0)
        center = (bb_lo + bb_hi) / 2.0
        ext = bb_hi - bb_lo
        # fill most of the vertical range; hard cap keeps every axis inside
        # +-0.93 even before the smooth-min bulge (<= blend/4)
        scale = min(1.78 / ext[1], 1.86 / ext[0], 1.86 / ext[2])
        seg_a = (seg_a - center) * scale
        seg_b = (seg_b - center) * scale
        return seg_a, seg_b, rad_a.copy() * scale, rad_b.copy() * scale

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return kernels.body_sdf(points, self.seg_a, self.seg_b, self.rad_a, self.rad_b, BLEND_RADIUS)

    def color(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        prim = kernels.body_nearest_primitive(points, self.seg_a, self.seg_b, self.rad_a, self.rad_b)
        region = self.regions[prim]
        head = prim == _PRIM_HEAD
        if head.any():
            a = self.seg_a[_PRIM_HEAD]
            ba = self.seg_b[_PRIM_HEAD] - a
            t = (points[head] - a) @ ba / (ba @ ba)
            region = region.copy()
            region[np.nonzero(head)[0][t >= _HAIR_SPLIT]] = R_HAIR
        return self.params.region_colors[region]

    def bounding_box(self):
        rmax = np.maximum(self.rad_a, self.rad_b)[:, None]
        lo = (np.minimum(self.seg_a, self.seg_b) - rmax).min(axis=0) - BLEND_RADIUS / 4.0
        hi = (np.maximum(self.seg_a, self.seg_b) + rmax).max(axis=0) + BLEND_RADIUS / 4.0
        return lo, hi


def eval_body_sdf(p: np.ndarray, params: BodyParams) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    vals = CapsuleBody(params).sdf(p.reshape(-1, 3))
    return float(vals[0]) if p.ndim == 1 else vals


def eval_body_color(p: np.ndarray, params: BodyParams) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    cols = CapsuleBody(params).color(p.reshape(-1, 3))
    return cols[0] if p.ndim == 1 else cols


@dataclass
class CorpusSample:
    params: BodyParams
    rgb: np.ndarray      # H x W x 3 in [0,1], white background
    depth: np.ndarray    # H x W, camera depth, background +1
    normal: np.ndarray   # H x W x 3 unit camera-frame normals, bg (0,0,1)
    mask: np.ndarray     # H x W bool
    view: Camera


def render_orthographic(params: BodyParams, camera: Camera, resolution: int,
                        body: CapsuleBody | None = None) -> CorpusSample:
    """Ray-march the analytic body along -z of the camera."""
    if resolution not in (64, 128, 256):
        raise ContractViolation(f"render resolution must be 64/128/256, got {resolution}")
    if camera.image_size != resolution:
        camera = Camera(image_size=resolution, view_rotation=camera.view_rotation)
    body = body or CapsuleBody(params)
    rot = camera.view_rotation
    ii = np.arange(resolution, dtype=np.float64)
    px, py = np.meshgrid(ii, ii, indexing="xy")
    x_ndc = 2.0 * px.ravel() / resolution - 1.0
    y_ndc = 1.0 - 2.0 * py.ravel() / resolution
    origins_cam = np.stack([x_ndc, y_ndc, np.full(x_ndc.shape, RAY_START_Z)], axis=1)
    origins = origins_cam @ rot
    direction = rot.T @ np.array([0.0, 0.0, -1.0])

    t, hit = kernels.raymarch_body(origins, direction, body.seg_a, body.seg_b,
                                   body.rad_a, body.rad_b, BLEND_RADIUS,
                                   eps=RAY_EPS, min_step=RAY_MIN_STEP,
                                   max_steps=RAY_MAX_STEPS, t_max=RAY_T_MAX)
    n_pix = resolution * resolution
    rgb = np.ones((n_pix, 3), dtype=np.float64)
    depth = np.full(n_pix, BACKGROUND_DEPTH, dtype=np.float64)
    normal = np.zeros((n_pix, 3), dtype=np.float64)
    normal[:, 2] = 1.0

    if hit.any():
        hp = origins[hit] + t[hit, None] * direction[None, :]
        depth[hit] = np.minimum(RAY_START_Z - t[hit], BACKGROUND_DEPTH - 1e-6)
        rgb[hit] = body.color(hp)
        grad = np.zeros_like(hp)
        for ax in range(3):
            step = np.zeros(3)
            step[ax] = NORMAL_FD_STEP
            grad[:, ax] = body.sdf(hp + step) - body.sdf(hp - step)
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        normal[hit] = (grad / norms) @ rot.T

    shape = (resolution, resolution)
    return CorpusSample(
        params=params,
        rgb=rgb.reshape(*shape, 3).astype(np.float32),
        depth=depth.reshape(shape).astype(np.float32),
        normal=normal.reshape(*shape, 3).astype(np.float32),
        mask=hit.reshape(shape),
        view=camera,
    )


def split_counts(n: int) -> tuple[int, int]:
    """Train/eval split: last ceil(5%) of seeds are eval, but at least one
    sample always stays in train."""
    n_eval = min(math.ceil(0.05 * n), n - 1)
    return n - n_eval, n_eval


def generate_corpus(n: int, seed: int, out_dir, resolution: int = 128) -> dict:
    """Render n frontal samples to out_dir; byte-reproducible for (n, seed)."""
    if n < 1:
        raise ContractViolation("corpus size must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise RuntimeError(f"corpus output directory not writable: {out} ({e})") from e

    n_train, n_eval = split_counts(n)
    camera = frontal_camera(resolution)
    entries = []
    for i in range(n):
        s = sample_seed(seed, i, "corpus")
        params = sample_body_params(s)
        sample = render_orthographic(params, camera, resolution)
        name = f"sample_{i:06d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        write_raw(sdir / "rgb.f32", sample.rgb)
        write_raw(sdir / "depth.f32", sample.depth)
        write_raw(sdir / "normal.f32", sample.normal)
        (sdir / "mask.u8").write_bytes(sample.mask.astype(np.uint8).tobytes())
        split = "train" if i < n_train else "eval"
        write_manifest(sdir / "manifest.json", {
            "index": i, "seed": s, "split": split,
            "shapes": {"rgb": [resolution, resolution, 3],
                       "depth": [resolution, resolution],
                       "normal": [resolution, resolution, 3],
                       "mask": [resolution, resolution]},
            "dtypes": {"rgb": "<f4", "depth": "<f4", "normal": "<f4", "mask": "u1"},
            "camera": camera.to_dict(),
            "params": params.to_dict(),
        })
        entries.append({"name": name, "seed": s, "split": split, "index": i})

    manifest = {
        "n": n, "seed": seed, "resolution": resolution,
        "split_rule": "last ceil(5%) of seeds are eval (min 1 train)",
        "n_train": n_train, "n_eval": n_eval,
        "samples": entries,
    }
    write_manifest(out / "manifest.json", manifest)
    return manifest


class CorpusSet:
    """Lazy reader over a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root / "manifest.json")
        self.resolution = self.manifest["resolution"]
        self.entries = self.manifest["samples"]

    def __len__(self) -> int:
        return len(self.entries)

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, e in enumerate(self.entries) if split is None or e["split"] == split]

    def load(self, i: int) -> CorpusSample:
        entry = self.entries[i]
        sdir = self.root / entry["name"]
        meta = read_manifest(sdir / "manifest.json")
        res = self.resolution
        rgb = read_raw(sdir / "rgb.f32", (res, res, 3))
        depth = read_raw(sdir / "depth.f32", (res, res))
        normal = read_raw(sdir / "normal.f32", (res, res, 3))
        mask = np.frombuffer((sdir / "mask.u8").read_bytes(), dtype=np.uint8).reshape(res, res).astype(bool)
        return CorpusSample(params=BodyParams.from_dict(meta["params"]),
                            rgb=rgb, depth=depth, normal=normal, mask=mask,
                            view=Camera.from_dict(meta["camera"]))

    def params(self, i: int) -> BodyParams:
        meta = read_manifest(self.root / self.entries[i]["name"] / "manifest.json")
        return BodyParams.from_dict(meta["params"])
