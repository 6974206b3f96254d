"""Gaussian density grids, isosurface extraction and forward mesh rasterization."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes as _sk_marching_cubes

from .geometry import CameraPose, GaussianSet, InvalidArgument, TriMesh
from .render import FAR_DEPTH, NEAR_PLANE

DEFAULT_RESOLUTION = 96
DEFAULT_PADDING = 0.1
ISO_FRACTION = 0.3
DENSITY_CUTOFF_SIGMA = 4.0
FILTER_VOXELS = 0.5
MIN_COMPONENT_FRACTION = 0.5
MAX_KERNEL_ALPHA = 0.99
FALLBACK_COLOR = (0.7, 0.7, 0.7)


@dataclass(frozen=True)
class ScalarGrid:
    """Scalar samples on a regular lattice; ``values[i, j, k]`` sits at
    ``origin + voxel_size * (i, j, k)``."""

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise InvalidArgument("voxel size must be positive")
        if np.asarray(self.values).ndim != 3:
            raise InvalidArgument("grid values must be a 3D array")

    @property
    def resolution(self) -> tuple:
        return tuple(self.values.shape)

    def coordinates(self, index) -> np.ndarray:
        return self.origin + self.voxel_size * np.asarray(index, dtype=np.float64)

    def sample(self, points) -> np.ndarray:
        """Trilinear interpolation (clamped to the grid)."""
        p = (np.atleast_2d(points) - self.origin) / self.voxel_size
        shape = np.array(self.values.shape)
        p = np.clip(p, 0, shape - 1)
        i0 = np.minimum(np.floor(p).astype(int), shape - 2)
        f = p - i0
        out = np.zeros(len(p))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1])
                         * (f[:, 2] if dz else 1 - f[:, 2]))
                    out += w * self.values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out


@dataclass(frozen=True)
class MeshRender:
    mask: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mesh_image: np.ndarray


# ----------------------------------------------------------------------------
# density grid
# ----------------------------------------------------------------------------


@numba.njit(cache=True)
def _splat_density(positions, inv_covs, extents, opac, origin, h, values, occupancy):
    # occupancy mode accumulates log transmittance, sum mode the plain kernel sum
    nx, ny, nz = values.shape
    for k in range(positions.shape[0]):
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        dims = (nx, ny, nz)
        for a in range(3):
            lo[a] = max(0, int(np.ceil((positions[k, a] - extents[k, a] - origin[a]) / h)))
            hi[a] = min(dims[a] - 1, int(np.floor((positions[k, a] + extents[k, a] - origin[a]) / h)))
        P = inv_covs[k]
        for i in range(lo[0], hi[0] + 1):
            dx = origin[0] + i * h - positions[k, 0]
            for j in range(lo[1], hi[1] + 1):
                dy = origin[1] + j * h - positions[k, 1]
                for l in range(lo[2], hi[2] + 1):
                    dz = origin[2] + l * h - positions[k, 2]
                    q = (P[0, 0] * dx * dx + P[1, 1] * dy * dy + P[2, 2] * dz * dz
                         + 2.0 * (P[0, 1] * dx * dy + P[0, 2] * dx * dz + P[1, 2] * dy * dz))
                    w = opac[k] * np.exp(-0.5 * q)
                    if occupancy:
                        values[i, j, l] += np.log1p(-min(w, MAX_KERNEL_ALPHA))
                    else:
                        values[i, j, l] += w


def grid_bounds(G: GaussianSet, padding: float = DEFAULT_PADDING):
    cov = G.covariances()
    ext = DENSITY_CUTOFF_SIGMA * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
    lo = (G.positions - ext).min(axis=0)
    hi = (G.positions + ext).max(axis=0)
    pad = padding * (hi - lo).max()
    return lo - pad, hi + pad


def density_grid(G: GaussianSet, resolution: int = DEFAULT_RESOLUTION,
                 padding: float = DEFAULT_PADDING, bounds=None, field: str = "occupancy",
                 filter_voxels: float = FILTER_VOXELS) -> ScalarGrid:
    """Sample the Gaussians' opacity field on a cubic lattice.

    ``field="occupancy"`` gives ``1 - prod_k (1 - a_k g_k(x))`` (each term capped at
    0.99), ``field="sum"`` gives ``sum_k a_k g_k(x)``. Every kernel is widened by
    ``filter_voxels`` lattice spacings in quadrature (peak kept), so sub-voxel
    Gaussians still register on the grid. The lattice is centered on the padded
    bounding box of the 4-sigma extents; kernels are truncated at 4 sigma per axis.
    """
    if int(resolution) < 8:
        raise InvalidArgument("grid resolution must be at least 8 per axis")
    if field not in ("occupancy", "sum"):
        raise InvalidArgument(f"unknown density field {field!r}")
    if filter_voxels < 0:
        raise InvalidArgument("filter width must be non-negative")
    r = int(resolution)
    if len(G) == 0:
        return ScalarGrid(np.zeros(3), 1.0, np.zeros((r, r, r)))
    lo, hi = bounds if bounds is not None else grid_bounds(G, padding)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    h = float((hi - lo).max()) / (r - 1)
    origin = 0.5 * (lo + hi) - h * (r - 1) / 2.0
    cov = G.covariances() + (filter_voxels * h) ** 2 * np.eye(3)
    inv_covs = np.linalg.inv(cov)
    ext = DENSITY_CUTOFF_SIGMA * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
    values = np.zeros((r, r, r))
    occupancy = field == "occupancy"
    _splat_density(G.positions, inv_covs, ext, G.opacities, origin, h, values, occupancy)
    if occupancy:
        values = -np.expm1(values)
    return ScalarGrid(origin, h, values)


def clean_grid(grid: ScalarGrid, iso: float,
               min_component_fraction: float = MIN_COMPONENT_FRACTION) -> ScalarGrid:
    """Drop small disconnected blobs and fill enclosed cavities.

    Connected regions above ``iso`` smaller than ``min_component_fraction`` of the
    largest are pushed below ``iso``; voxels enclosed by the remaining solid are
    raised to the field max, so the isosurface is the outer shell only.
    """
    v = np.array(grid.values, dtype=np.float64)
    solid = v > iso
    labels, n = ndimage.label(solid)
    if n > 1:
        sizes = ndimage.sum(solid, labels, index=np.arange(1, n + 1))
        keep = np.zeros(n + 1, dtype=bool)
        keep[1:] = sizes >= min_component_fraction * sizes.max()
        drop = solid & ~keep[labels]
        v[drop] = 0.5 * iso
        solid &= keep[labels]
    cavity = ndimage.binary_fill_holes(solid) & ~solid
    if cavity.any():
        v[cavity] = v.max()
    return ScalarGrid(grid.origin, grid.voxel_size, v)


# ----------------------------------------------------------------------------
# marching cubes
# ----------------------------------------------------------------------------


def marching_cubes(grid: ScalarGrid, iso: float | None = None) -> TriMesh:
    """Isosurface at ``iso`` (default 0.3 x field max), oriented toward lower values."""
    values = np.asarray(grid.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgument("grid contains NaN/Inf")
    vmax = float(values.max())
    if iso is None:
        iso = ISO_FRACTION * vmax
    if vmax <= iso or float(values.min()) >= iso:
        return TriMesh.empty()
    h = grid.voxel_size
    try:
        verts, faces, _, _ = _sk_marching_cubes(values, level=iso, spacing=(h, h, h),
                                                gradient_direction="descent",
                                                allow_degenerate=False, method="lewiner")
    except RuntimeError:
        # every crossing collapsed into degenerate triangles
        return TriMesh.empty()
    faces = faces.astype(np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    # skimage emits clockwise triangles w.r.t. the descent normal; flip to counter-clockwise
    faces = faces[:, [0, 2, 1]]
    return TriMesh(verts.astype(np.float64) + grid.origin, faces)


def extract_mesh(G: GaussianSet, resolution: int = DEFAULT_RESOLUTION,
                 padding: float = DEFAULT_PADDING, clean: bool = True) -> TriMesh:
    """Occupancy grid, optional blob/cavity cleanup, then marching cubes at 0.3 x max."""
    grid = density_grid(G, resolution, padding)
    iso = ISO_FRACTION * float(grid.values.max())
    if clean and iso > 0:
        grid = clean_grid(grid, iso)
    mesh = marching_cubes(grid, iso if iso > 0 else None)
    mesh.meta["voxel_size"] = grid.voxel_size
    return mesh


# ----------------------------------------------------------------------------
# normals
# ----------------------------------------------------------------------------


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def vertex_normals(mesh: TriMesh) -> TriMesh:
    """Area-weighted average of incident face normals; isolated vertices get +z."""
    acc = np.zeros_like(mesh.vertices)
    if mesh.n_faces:
        fn = face_normals(mesh, normalize=False)  # length = 2 x area
        for c in range(3):
            np.add.at(acc, mesh.faces[:, c], fn)
    norm = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (mesh.n_vertices, 1))
    ok = norm > 1e-300
    out[ok] = acc[ok] / norm[ok, None]
    return mesh.replace(normals=out)


# ----------------------------------------------------------------------------
# rasterization
# ----------------------------------------------------------------------------


@numba.njit(cache=True)
def _raster(uv, z, faces, H, W, near):
    zbuf = np.full((H, W), np.inf)
    fid = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        cmin = max(0, int(np.ceil(min(x0, x1, x2))))
        cmax = min(W - 1, int(np.floor(max(x0, x1, x2))))
        rmin = max(0, int(np.ceil(min(y0, y1, y2))))
        rmax = min(H - 1, int(np.floor(max(y0, y1, y2))))
        for py in range(rmin, rmax + 1):
            for px in range(cmin, cmax + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 / z0 + w1 / z1 + w2 / z2
                d = 1.0 / iz
                if d < zbuf[py, px]:
                    zbuf[py, px] = d
                    fid[py, px] = f
                    bary[py, px, 0] = w0 / z0 * d
                    bary[py, px, 1] = w1 / z1 * d
                    bary[py, px, 2] = w2 / z2 * d
    return zbuf, fid, bary


def rasterize_mesh(mesh: TriMesh, cam: CameraPose, background=(1.0, 1.0, 1.0)) -> MeshRender:
    """Z-buffered rasterization with perspective-correct attribute interpolation.

    Normals are expressed in camera space with the axes negated (x left, y up,
    z toward the viewer), the same frame ``normal_from_depth`` produces.
    Both triangle windings are drawn.
    """
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if mesh.n_faces == 0:
        return MeshRender(np.zeros((H, W)), np.full((H, W), FAR_DEPTH),
                          np.zeros((H, W, 3)), np.broadcast_to(bg, (H, W, 3)).copy())
    if mesh.normals is None:
        mesh = vertex_normals(mesh)
    colors = mesh.colors if mesh.colors is not None else np.tile(FALLBACK_COLOR, (mesh.n_vertices, 1))
    uv, z = cam.project(mesh.vertices)
    zbuf, fid, bary = _raster(uv, z, mesh.faces, H, W, NEAR_PLANE)
    mask = fid >= 0
    depth = np.where(mask, zbuf, FAR_DEPTH)
    tri = mesh.faces[np.where(mask, fid, 0)]  # (H, W, 3)
    w = bary[..., None]
    image = (w * colors[tri]).sum(axis=2)
    image = np.where(mask[..., None], image, bg)
    n_cam = -(mesh.normals @ cam.rotation.T)
    normal = (w * n_cam[tri]).sum(axis=2)
    nn = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.where(mask[..., None] & (nn > 1e-12), normal / np.maximum(nn, 1e-12), 0.0)
    # a pixel whose interpolated normal cancels out falls back to facing the viewer
    degenerate = mask & (nn[..., 0] <= 1e-12)
    normal[degenerate] = (0.0, 0.0, 1.0)
    return MeshRender(mask.astype(np.float64), depth, normal, image)
