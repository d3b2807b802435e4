"""Point-cloud data model, text I/O, synthetic shapes, poses, and outlier injection.

Clouds are plain (N, 3) float64 arrays in meters wrapped in a small
dataclass. All operations are pure: they return new values and never
mutate their inputs, so clouds and poses are safe to share across
threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import child_seeds, make_rng

FORMATS = ("ply_ascii", "xyz_text")

# kind -> (dimension names, brief meaning)
SHAPE_KINDS = {
    "sphere": ("radius",),
    "box": ("size_x", "size_y", "size_z"),
    "cylinder": ("radius", "height"),
    "mug": ("radius", "height"),
    "laptop": ("width", "depth"),
}


class ParseError(ValueError):
    """Raised when a cloud file is malformed or empty."""


@dataclass(frozen=True)
class PointCloud:
    """N points in 3D with an optional per-point outlier flag.

    `labels`, when present, marks injected outlier points for harness
    bookkeeping; it never influences numerical operations.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=bool)
            if lab.shape != (pts.shape[0],):
                raise ValueError(
                    f"labels must have shape ({pts.shape[0]},), got {lab.shape}"
                )
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Pose:
    """Rigid pose with per-axis size: x -> rotation @ (size * x) + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        s = np.asarray(self.size, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        if s.shape != (3,):
            raise ValueError(f"size must be a 3-vector, got {s.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise ValueError("pose entries must be finite")
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.3e})")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if np.any(s <= 0):
            raise ValueError("size components must be strictly positive")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "size", s)


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3), np.ones(3))


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    u = np.asarray(axis, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    u = u / nu
    k = np.array([
        [0.0, -u[2], u[1]],
        [u[2], 0.0, -u[0]],
        [-u[1], u[0], 0.0],
    ])
    return np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class ShapeSpec:
    """Recipe for a synthetic surface sample: kind, dimensions, seed."""

    kind: str
    dimensions: tuple
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dimensions)
        expected = len(SHAPE_KINDS[self.kind])
        if len(dims) != expected:
            raise ValueError(
                f"{self.kind} takes {expected} dimensions "
                f"({', '.join(SHAPE_KINDS[self.kind])}), got {len(dims)}"
            )
        if any(not math.isfinite(d) or d <= 0 for d in dims):
            raise ValueError("shape dimensions must be positive finite reals")
        object.__setattr__(self, "dimensions", dims)

    @classmethod
    def sphere(cls, radius: float, seed: int = 0) -> "ShapeSpec":
        return cls("sphere", (radius,), seed)

    @classmethod
    def box(cls, sx: float, sy: float, sz: float, seed: int = 0) -> "ShapeSpec":
        return cls("box", (sx, sy, sz), seed)

    @classmethod
    def cylinder(cls, radius: float, height: float, seed: int = 0) -> "ShapeSpec":
        return cls("cylinder", (radius, height), seed)

    @classmethod
    def mug(cls, radius: float, height: float, seed: int = 0) -> "ShapeSpec":
        return cls("mug", (radius, height), seed)

    @classmethod
    def laptop(cls, width: float, depth: float, seed: int = 0) -> "ShapeSpec":
        return cls("laptop", (width, depth), seed)


def _sample_sphere(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def _sample_box(rng, n, sx, sy, sz):
    # Pick one of 6 faces with probability proportional to its area,
    # then a uniform point on that face.
    half = np.array([sx, sy, sz]) / 2.0
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * half[others[0]]
        pts[m, others[1]] = u[m, 1] * half[others[1]]
    return pts


def _sample_cylinder(rng, n, radius, height):
    lateral = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    pts = np.empty((n, 3))
    lat = part == 0
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-height / 2, height / 2, size=int(lat.sum()))
    for p, zsign in ((1, 1.0), (2, -1.0)):
        m = part == p
        r = radius * np.sqrt(rng.uniform(size=int(m.sum())))
        pts[m, 0] = r * np.cos(theta[m])
        pts[m, 1] = r * np.sin(theta[m])
        pts[m, 2] = zsign * height / 2
    return pts


def _sample_mug(rng, n, radius, height):
    # Cylindrical body plus a one-dimensional handle arc in the x-z plane.
    n_handle = max(1, n // 10)
    body = _sample_cylinder(rng, n - n_handle, radius, height)
    arc_r = 0.35 * height
    phi = rng.uniform(0.0, math.pi, size=n_handle)
    handle = np.stack(
        [radius + arc_r * np.sin(phi), np.zeros(n_handle), arc_r * np.cos(phi)],
        axis=1,
    )
    return np.vstack([body, handle])


def _sample_laptop(rng, n, width, depth):
    # Two plates hinged along the x axis, opened at a fixed 110 degrees.
    beta = math.radians(110.0)
    n_base = n // 2
    xy = rng.uniform(size=(n, 2))
    base = np.stack(
        [(xy[:n_base, 0] - 0.5) * width, xy[:n_base, 1] * depth, np.zeros(n_base)],
        axis=1,
    )
    t = xy[n_base:, 1] * depth
    screen = np.stack(
        [(xy[n_base:, 0] - 0.5) * width, t * math.cos(beta), t * math.sin(beta)],
        axis=1,
    )
    return np.vstack([base, screen])


def generate_shape(spec: ShapeSpec, n: int) -> PointCloud:
    """Sample `n` points uniformly on the surface described by `spec`.

    Deterministic for a given (spec, n): the stream is Philox keyed by
    spec.seed.
    """
    if n < 8:
        raise ValueError(f"need at least 8 points, got {n}")
    rng = make_rng(spec.seed)
    d = spec.dimensions
    if spec.kind == "sphere":
        pts = _sample_sphere(rng, n, *d)
    elif spec.kind == "box":
        pts = _sample_box(rng, n, *d)
    elif spec.kind == "cylinder":
        pts = _sample_cylinder(rng, n, *d)
    elif spec.kind == "mug":
        pts = _sample_mug(rng, n, *d)
    elif spec.kind == "laptop":
        pts = _sample_laptop(rng, n, *d)
    else:  # pragma: no cover - guarded by ShapeSpec
        raise ValueError(spec.kind)
    return PointCloud(pts)


def center_to_mean(pc: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Subtract the centroid; returns (centered cloud, subtracted centroid)."""
    centroid = pc.points.mean(axis=0)
    return PointCloud(pc.points - centroid, pc.labels), centroid


def random_downsample(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Keep exactly `n` distinct input points, order randomized by the seed."""
    if n < 1 or n > pc.n:
        raise ValueError(f"target count {n} must be in [1, {pc.n}]")
    idx = make_rng(seed).choice(pc.n, size=n, replace=False)
    labels = pc.labels[idx] if pc.labels is not None else None
    return PointCloud(pc.points[idx], labels)


def apply_pose(pc: PointCloud, pose: Pose) -> PointCloud:
    """Map each point p to rotation @ (size * p) + translation."""
    pts = (pc.points * pose.size) @ pose.rotation.T + pose.translation
    return PointCloud(pts, pc.labels)


def apply_pose_inverse(pc: PointCloud, pose: Pose) -> PointCloud:
    """Invert apply_pose: p = ((x - t) @ R) / size.

    The inverse of a rotate-after-scale map is not itself expressible as
    a Pose when the size is anisotropic, so the inverse is provided as a
    transform rather than an inverse Pose value.
    """
    pts = ((pc.points - pose.translation) @ pose.rotation) / pose.size
    return PointCloud(pts, pc.labels)


def inject_outliers(
    pc: PointCloud, ratio: float, background: PointCloud | None, seed: int
) -> PointCloud:
    """Replace round(ratio * N) points with samples from `background`.

    Replaced rows are flagged is_outlier=True; all others False. N is
    preserved. Rounding is half-up. Deterministic given the seed.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    k = int(math.floor(ratio * pc.n + 0.5))
    labels = np.zeros(pc.n, dtype=bool)
    if k == 0:
        return PointCloud(pc.points, labels)
    if background is None or background.n == 0:
        raise ValueError("nonzero outlier ratio requires a nonempty background cloud")
    rng = make_rng(seed)
    replace_idx = rng.choice(pc.n, size=k, replace=False)
    bg_idx = rng.integers(0, background.n, size=k)
    pts = pc.points.copy()
    pts[replace_idx] = background.points[bg_idx]
    labels[replace_idx] = True
    return PointCloud(pts, labels)


def _fmt(x: float) -> str:
    # 17 significant digits round-trip any float64 exactly.
    return f"{x:.17g}"


def save_pointcloud(pc: PointCloud, path, fmt: str) -> None:
    """Write a cloud as PLY ASCII or XYZ text; round-trips bit-exactly."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    lines = []
    if fmt == "ply_ascii":
        lines += [
            "ply",
            "format ascii 1.0",
            f"element vertex {pc.n}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
    for row in pc.points:
        lines.append(f"{_fmt(row[0])} {_fmt(row[1])} {_fmt(row[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_rows(rows: list[str], path) -> np.ndarray:
    out = np.empty((len(rows), 3))
    for i, line in enumerate(rows):
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: expected 3 values per row, got {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"{path}: bad number in row {i}: {line!r}") from exc
    if not np.all(np.isfinite(out)):
        raise ParseError(f"{path}: non-finite coordinate")
    return out


def _load_ply(text: str, path) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("comment")]
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: missing 'ply' magic line")
    if len(lines) < 2 or lines[1].split() != ["format", "ascii", "1.0"]:
        raise ParseError(f"{path}: only 'format ascii 1.0' is supported")
    expected = ["element vertex", "property float x", "property float y",
                "property float z", "end_header"]
    if len(lines) < 7:
        raise ParseError(f"{path}: truncated header")
    if not lines[2].startswith("element vertex "):
        raise ParseError(f"{path}: expected 'element vertex N', got {lines[2]!r}")
    try:
        n = int(lines[2].split()[2])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: bad vertex count in {lines[2]!r}") from exc
    for want, got in zip(expected[1:], lines[3:7]):
        if got != want:
            raise ParseError(f"{path}: expected header line {want!r}, got {got!r}")
    rows = lines[7:]
    if n == 0:
        raise ParseError(f"{path}: file contains no points")
    if len(rows) != n:
        raise ParseError(f"{path}: header declares {n} vertices but {len(rows)} rows follow")
    return _parse_rows(rows, path)


def load_pointcloud(path, fmt: str) -> PointCloud:
    """Read a cloud from PLY ASCII or XYZ text, preserving point order."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text file (binary PLY is not supported)") from exc
    if fmt == "ply_ascii":
        pts = _load_ply(text, path)
    else:
        rows = [ln.strip() for ln in text.splitlines()]
        rows = [ln for ln in rows if ln and not ln.startswith("#")]
        if not rows:
            raise ParseError(f"{path}: file contains no points")
        pts = _parse_rows(rows, path)
    return PointCloud(pts)
