"""Geometric value types and 3D Gaussian covariance algebra.

Conventions used throughout the package:

* quaternions are stored as ``(w, x, y, z)`` and describe right-handed rotations;
* camera space follows the OpenCV layout (x right, y down, z forward), so
  visible points have positive depth;
* pixel ``(row, col)`` has its center at image coordinates ``(col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_OPACITY = 0.1
QUAT_TOLERANCE = 1e-4


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ----------------------------------------------------------------------------
# Quaternions and rotations
# ----------------------------------------------------------------------------


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-12, 1.0, norm)
    out = q / norm
    # a zero quaternion maps to identity
    zero = np.linalg.norm(q, axis=-1) < 1e-12
    if np.any(zero):
        out = np.array(out)
        out[zero] = (1.0, 0.0, 0.0, 0.0)
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto ``q`` (no normalization)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_grad(q: np.ndarray, d_qhat: np.ndarray) -> np.ndarray:
    """Gradient through ``q -> q / |q|`` along the last axis."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-12, 1.0, norm)
    qhat = q / norm
    return (d_qhat - qhat * np.sum(qhat * d_qhat, axis=-1, keepdims=True)) / norm


def axis_angle_matrix(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise InvalidArgument("rotation axis must be non-zero")
    half = np.deg2rad(degrees) / 2.0
    q = np.concatenate([[np.cos(half)], np.sin(half) * axis / n])
    return quat_to_rotmat(q)


# ----------------------------------------------------------------------------
# Covariance algebra
# ----------------------------------------------------------------------------


def covariance_from_rs(r, s) -> np.ndarray:
    """Covariance ``R S S^T R^T`` from a unit quaternion and per-axis scales.

    Accepts a single Gaussian (shapes (4,), (3,)) or a batch ((K, 4), (K, 3)).
    """
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if r.shape[-1] != 4 or s.shape[-1] != 3:
        raise InvalidArgument("expected quaternion (..., 4) and scales (..., 3)")
    if np.any(np.abs(np.linalg.norm(r, axis=-1) - 1.0) > QUAT_TOLERANCE):
        raise InvalidArgument("rotation quaternion is not unit-norm")
    R = quat_to_rotmat(r)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def project_covariance(cov, W, J) -> np.ndarray:
    """EWA projection ``J W cov W^T J^T`` (batched over leading axes)."""
    cov = np.asarray(cov, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    JW = J @ W
    return JW @ cov @ np.swapaxes(JW, -1, -2)


# ----------------------------------------------------------------------------
# Gaussian sets
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSet:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        k = len(np.asarray(self.positions))
        shapes = {
            "positions": (k, 3),
            "rotations": (k, 4),
            "scales": (k, 3),
            "opacities": (k,),
            "colors": (k, 3),
        }
        for name, shape in shapes.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.size != int(np.prod(shape)):
                raise InvalidArgument(f"GaussianSet.{name} must have shape {shape}")
            a = a.reshape(shape)
            if not np.all(np.isfinite(a)):
                raise InvalidArgument(f"GaussianSet.{name} contains NaN/Inf")
            object.__setattr__(self, name, _frozen(a))
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise InvalidArgument("opacities must lie in [0, 1]")
        if np.any(self.scales <= 0):
            raise InvalidArgument("scales must be positive")

    def __len__(self) -> int:
        return len(self.positions)

    def replace(self, **changes) -> "GaussianSet":
        return replace(self, **changes)

    def covariances(self) -> np.ndarray:
        return covariance_from_rs(normalize_quaternions(self.rotations), self.scales)

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)), np.zeros(0), np.zeros((0, 3)))


def init_sphere_gaussians(count: int, radius: float = 1.0, seed: int = 0) -> GaussianSet:
    """Gaussians placed uniformly on a sphere surface, identity rotation,
    isotropic scale equal to the mean nearest-neighbor spacing."""
    if radius <= 0:
        raise InvalidArgument("radius must be positive")
    if count < 0:
        raise InvalidArgument("count must be non-negative")
    if count == 0:
        return GaussianSet.empty()
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * radius
    if count > 1:
        dist, _ = cKDTree(pos).query(pos, k=2)
        spacing = float(dist[:, 1].mean())
    else:
        spacing = 0.1 * radius
    rot = np.zeros((count, 4))
    rot[:, 0] = 1.0
    return GaussianSet(
        positions=pos,
        rotations=rot,
        scales=np.full((count, 3), spacing),
        opacities=np.full(count, DEFAULT_OPACITY),
        colors=np.full((count, 3), 0.5),
    )


# ----------------------------------------------------------------------------
# Cameras
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera looking at the world origin with world-up +y.

    ``azimuth = 0, elevation = 0`` places the camera on the +z axis.
    """

    fov: float
    elevation: float
    azimuth: float
    radius: float
    width: int
    height: int

    def __post_init__(self):
        if not (0 < self.fov < 180):
            raise InvalidArgument("fov must lie in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image size must be at least 1x1")
        if self.radius <= 0:
            raise InvalidArgument("camera radius must be positive")
        if abs(self.elevation) >= 90:
            raise InvalidArgument("elevation must lie in (-90, 90)")

    @property
    def center(self) -> np.ndarray:
        e, a = np.deg2rad(self.elevation), np.deg2rad(self.azimuth)
        return self.radius * np.array([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)])

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation (rows are the camera axes in world space)."""
        c = self.center
        fwd = -c / np.linalg.norm(c)
        right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / np.tan(np.deg2rad(self.fov) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (col, row) and camera depth of world points."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        f = self.focal
        cx, cy = self.principal_point
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        uv = np.stack([f * pc[:, 0] / safe + cx, f * pc[:, 1] / safe + cy], axis=1)
        return uv, z

    def projection_jacobian(self, cam_points: np.ndarray) -> np.ndarray:
        """Affine EWA Jacobian (3x3, last row zero) at camera-space points."""
        pc = np.atleast_2d(cam_points)
        f = self.focal
        tx, ty, tz = pc[:, 0], pc[:, 1], pc[:, 2]
        J = np.zeros((len(pc), 3, 3))
        J[:, 0, 0] = f / tz
        J[:, 0, 2] = -f * tx / tz**2
        J[:, 1, 1] = f / tz
        J[:, 1, 2] = -f * ty / tz**2
        return J

    def to_dict(self) -> dict:
        return {
            "fov": self.fov,
            "elevation": self.elevation,
            "azimuth": self.azimuth,
            "radius": self.radius,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(float(d["fov"]), float(d["elevation"]), float(d["azimuth"]),
                   float(d["radius"]), int(d["width"]), int(d["height"]))


# ----------------------------------------------------------------------------
# Triangle meshes
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("mesh vertices contain NaN/Inf")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise InvalidArgument("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InvalidArgument("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        for name in ("colors", "normals"):
            a = getattr(self, name)
            if a is not None:
                a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
                if len(a) != len(v):
                    raise InvalidArgument(f"mesh {name} must match vertex count")
                object.__setattr__(self, name, _frozen(a))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def replace(self, **changes) -> "TriMesh":
        return replace(self, **changes)

    def translated(self, offset) -> "TriMesh":
        return self.replace(vertices=self.vertices + np.asarray(offset, dtype=np.float64))

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per face-edge incidence (sorted pairs)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        unique_edges = np.unique(self.edges(), axis=0)
        used = np.unique(self.faces)
        return len(used) - len(unique_edges) + self.n_faces

    def is_edge_manifold_closed(self) -> bool:
        if self.n_faces == 0:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
