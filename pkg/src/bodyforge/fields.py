"""Pixel-aligned field machinery shared by every stage: orthographic camera,
bilinear feature sampling, training-point sampling, marching-cubes mesh
extraction, PLY export, and the mesh/point-cloud containers.

Conventions (pinned once, used everywhere):
  * canonical box [-1,1]^3; +y up; camera at +z looking along -z
  * pixel (i,j) has its center at continuous coordinates (i, j);
    x_pix = (x+1)/2 * size, y_pix = (1-y)/2 * size, so the box center maps
    to (size/2, size/2) and the +x box edge to x_pix = size
  * camera depth d = z in the (rotated) camera frame, already in [-1,1]
    over the canonical box; background sentinel +1
  * SDF sign: negative inside, positive outside; meshes extracted at iso 0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

BACKGROUND_DEPTH = 1.0

FEATURE_ROLES = ("F_s", "F_t", "F_sv", "F_tv")


@dataclass
class Camera:
    image_size: int
    view_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    kind: str = "orthographic"

    def __post_init__(self):
        self.view_rotation = np.asarray(self.view_rotation, dtype=np.float64)
        r = self.view_rotation
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ContractViolation("view_rotation must be a 3x3 orthonormal matrix")
        if self.image_size <= 0:
            raise ContractViolation("image_size must be positive")

    @property
    def scale(self) -> float:
        # canonical box edge-to-edge -> image edge-to-edge
        return self.image_size / 2.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "image_size": self.image_size,
                "scale": self.scale, "view_rotation": self.view_rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(image_size=d["image_size"], view_rotation=np.array(d["view_rotation"]))


def frontal_camera(image_size: int) -> Camera:
    return Camera(image_size=image_size)


def azimuth_camera(image_size: int, angle: float) -> Camera:
    """Camera orbited around +y by ``angle`` radians (0 = frontal)."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return Camera(image_size=image_size, view_rotation=rot)


def project(p: np.ndarray, camera: Camera):
    """World point(s) -> (pixel coords, camera depth)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    cam = pts @ camera.view_rotation.T
    size = camera.image_size
    xy = np.empty((len(pts), 2), dtype=np.float64)
    xy[:, 0] = (cam[:, 0] + 1.0) / 2.0 * size
    xy[:, 1] = (1.0 - cam[:, 1]) / 2.0 * size
    d = cam[:, 2]
    if single:
        return xy[0], float(d[0])
    return xy, d


def backproject(xy: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Inverse of :func:`project`: pixel coords + camera depth -> world points."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    size = camera.image_size
    cam = np.empty((len(xy), 3), dtype=np.float64)
    cam[:, 0] = xy[:, 0] / size * 2.0 - 1.0
    cam[:, 1] = 1.0 - xy[:, 1] / size * 2.0
    cam[:, 2] = depth
    return cam @ camera.view_rotation


@dataclass
class FeatureMap:
    """Pixel-aligned C x H x W feature array tied to the canonical box."""

    data: np.ndarray
    role: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.role not in FEATURE_ROLES:
            raise ContractViolation(f"unknown feature role {self.role!r}")
        if self.data.ndim != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ContractViolation("feature map must be C x H x W with H == W")
        if not np.isfinite(self.data).all():
            raise ContractViolation("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1]


def sample_bilinear(data: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coords, zero outside the image.

    Integer coordinates land exactly on pixel centers, so stored values are
    reproduced bit-exactly there.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    xy = np.asarray(xy, dtype=np.float64)
    single = xy.ndim == 1
    xy = xy.reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = x - x0
    wy = y - y0
    out = np.zeros((len(xy), c), dtype=np.float64)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        weight = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        if valid.any():
            vi = np.nonzero(valid)[0]
            out[vi] += weight[vi, None] * data[:, yi[vi], xi[vi]].T
    if single:
        return out[0]
    return out


def sample_training_points(depth: np.ndarray, mask: np.ndarray, camera: Camera,
                           m_total: int, sigma: float, rng: np.random.Generator):
    """Mixed point set for field losses: half near-surface (back-projected
    foreground pixels, jittered along camera z), half uniform in the box.

    Returns (points (M,3), near flags (M,), used_uniform_fallback).
    """
    if m_total % 2 != 0:
        raise ContractViolation("m_total must be even")
    m_half = m_total // 2
    mask = np.asarray(mask, dtype=bool)
    fg = np.nonzero(mask.reshape(-1))[0]
    fallback = fg.size == 0
    if fallback:
        pts = rng.uniform(-1.0, 1.0, size=(m_total, 3))
        return pts, np.zeros(m_total, dtype=bool), True
    h, w = mask.shape
    pick = fg[rng.integers(0, fg.size, size=m_half)]
    ys, xs = np.divmod(pick, w)
    d = np.asarray(depth).reshape(-1)[pick]
    near = backproject(np.stack([xs, ys], axis=1).astype(np.float64), d, camera)
    jitter = rng.normal(0.0, sigma, size=m_half) if sigma > 0 else np.zeros(m_half)
    near = near + jitter[:, None] * camera.view_rotation[2][None, :]
    uniform = rng.uniform(-1.0, 1.0, size=(m_half, 3))
    pts = np.concatenate([near, uniform], axis=0)
    flags = np.concatenate([np.ones(m_half, dtype=bool), np.zeros(m_half, dtype=bool)])
    return pts, flags, False


@dataclass
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if np.isnan(self.vertices).any():
            raise ContractViolation("mesh vertices contain NaN")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractViolation("face indices out of range")
        if self.vertex_colors is not None:
            self.vertex_colors = np.clip(
                np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)

    def __len__(self) -> int:
        return len(self.points)


def empty_mesh() -> TexturedMesh:
    return TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def grid_coords(resolution: int) -> np.ndarray:
    """(R^3, 3) canonical-box lattice, x fastest varying last axis order (ij)."""
    lin = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate_sdf_grid(sdf_query, resolution: int, chunk: int = 1 << 17) -> np.ndarray:
    """Evaluate a batched SDF callable over the canonical lattice -> (R,R,R)."""
    pts = grid_coords(resolution)
    vals = np.empty(len(pts), dtype=np.float64)
    for s in range(0, len(pts), chunk):
        vals[s:s + chunk] = np.asarray(sdf_query(pts[s:s + chunk])).reshape(-1)
    return vals.reshape(resolution, resolution, resolution)


def extract_mesh(sdf_query, resolution: int) -> TexturedMesh:
    """Marching cubes (iso level 0, linear edge interpolation) over the box."""
    if resolution < 8:
        raise ContractViolation("extraction resolution must be >= 8")
    from skimage import measure

    vol = evaluate_sdf_grid(sdf_query, resolution)
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        return empty_mesh()
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=0.0)
    except (ValueError, RuntimeError):
        return empty_mesh()
    verts = -1.0 + 2.0 * verts.astype(np.float64) / (resolution - 1)
    return TexturedMesh(verts, faces.astype(np.int64))


def paint_mesh(mesh: TexturedMesh, color_query) -> TexturedMesh:
    """Per-vertex colors straight from a field callable (p -> rgb)."""
    if mesh.is_empty:
        return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy())
    colors = np.asarray(color_query(mesh.vertices), dtype=np.float64).reshape(-1, 3)
    return TexturedMesh(mesh.vertices.copy(), mesh.faces.copy(), np.clip(colors, 0.0, 1.0))


def mesh_volume(mesh: TexturedMesh) -> float:
    """Signed-tetrahedra (divergence theorem) volume, absolute value."""
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        return 0.0
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    vol6 = np.einsum("ij,ij->i", v0, np.cross(v1, v2))
    return float(abs(vol6.sum()) / 6.0)


def sample_mesh_surface(mesh: TexturedMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform surface sampling; colors interpolated when present."""
    if mesh.is_empty:
        raise ContractViolation("cannot sample an empty mesh")
    v, f = mesh.vertices, mesh.faces
    v0, v1, v2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ContractViolation("mesh has zero surface area")
    probs = areas / total
    faces = rng.choice(len(f), size=n, p=probs)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip] = 1.0 - u[flip]
    w[flip] = 1.0 - w[flip]
    pts = v0[faces] + u[:, None] * (v1[faces] - v0[faces]) + w[:, None] * (v2[faces] - v0[faces])
    colors = None
    if mesh.vertex_colors is not None:
        c = mesh.vertex_colors
        c0, c1, c2 = c[f[:, 0]], c[f[:, 1]], c[f[:, 2]]
        colors = (1.0 - u - w)[:, None] * c0[faces] + u[:, None] * c1[faces] + w[:, None] * c2[faces]
    return PointCloud(pts, colors)


def save_ply(path, mesh: TexturedMesh, comment: str | None = None) -> None:
    """ASCII PLY with per-vertex uchar RGB (fixed formatting for stable bytes)."""
    v = mesh.vertices
    f = mesh.faces
    colors = mesh.vertex_colors
    if colors is None:
        colors = np.zeros((len(v), 3))
    rgb = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.int64)
    lines = [
        "ply", "format ascii 1.0",
        *([f"comment {comment}"] if comment else []),
        f"element vertex {len(v)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(f)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for i in range(len(v)):
        lines.append(f"{v[i, 0]:.6f} {v[i, 1]:.6f} {v[i, 2]:.6f} "
                     f"{rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}")
    for i in range(len(f)):
        lines.append(f"3 {f[i, 0]} {f[i, 1]} {f[i, 2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ply(path) -> TexturedMesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    n_vert = n_face = 0
    body_at = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line == "end_header":
            body_at = i + 1
            break
    verts = np.zeros((n_vert, 3))
    colors = np.zeros((n_vert, 3))
    for i in range(n_vert):
        parts = lines[body_at + i].split()
        verts[i] = [float(p) for p in parts[:3]]
        colors[i] = [int(p) / 255.0 for p in parts[3:6]]
    faces = np.zeros((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        parts = lines[body_at + n_vert + i].split()
        faces[i] = [int(p) for p in parts[1:4]]
    return TexturedMesh(verts, faces, colors)
