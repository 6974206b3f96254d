"""Edit propagation through the canonical mesh proxy.

Geometry travels through the Gaussians: a per-vertex edit on the canonical mesh
is lifted to the Gaussians by nearest-vertex lookup, the edited Gaussians are
deformed per frame and re-meshed. Texture travels through the mesh: the
canonical mesh is pushed through the forward field, colored by mapping its
vertices back to canonical space, and the colors are gathered onto the re-meshed
output by nearest-vertex lookup.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .deformation import ColorField, DeformationField, canonical_map, color_query, deform_forward
from .geometry import GaussianSet, InvalidArgument, TriMesh, axis_angle_matrix
from .mesh import DEFAULT_PADDING, DEFAULT_RESOLUTION, MeshRender, extract_mesh, rasterize_mesh, \
    vertex_normals

log = logging.getLogger(__name__)


class EmptyProxyError(RuntimeError):
    """The Gaussian field never crosses the iso level, so there is no mesh to edit."""


@dataclass(frozen=True)
class GridConfig:
    resolution: int = DEFAULT_RESOLUTION
    padding: float = DEFAULT_PADDING


# ----------------------------------------------------------------------------
# nearest-vertex maps
# ----------------------------------------------------------------------------


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nn_map(sources, targets) -> np.ndarray:
    """Exact nearest target index for every source, ties going to the lowest index.

    A k-d tree proposes the nearest distance; every target within that radius (plus
    a rounding margin) is then re-scored with the same arithmetic a brute-force
    search would use, so the result is bitwise what the O(n m) scan returns.
    """
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(tgt) == 0:
        raise InvalidArgument("nearest-neighbor map needs at least one target")
    if len(src) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(tgt)
    dist, _ = tree.query(src)
    radius = dist * (1.0 + 1e-9) + 1e-12
    out = np.empty(len(src), dtype=np.int64)
    for i, cand in enumerate(tree.query_ball_point(src, radius)):
        cand = np.asarray(sorted(cand), dtype=np.int64)
        d = _sq_dist(tgt[cand], src[i])
        out[i] = cand[np.argmin(d)]  # argmin keeps the first (lowest) index on ties
    return out


def brute_force_nn(sources, targets) -> np.ndarray:
    """Reference O(n m) nearest-neighbor scan (lowest index on ties)."""
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(tgt) == 0:
        raise InvalidArgument("nearest-neighbor map needs at least one target")
    return np.array([int(np.argmin(_sq_dist(tgt, s))) for s in src], dtype=np.int64)


# ----------------------------------------------------------------------------
# core propagation steps
# ----------------------------------------------------------------------------


def extract_canonical_mesh(G_c: GaussianSet, grid: GridConfig = GridConfig()) -> TriMesh:
    if len(G_c) == 0:
        raise EmptyProxyError("canonical Gaussian set is empty")
    mesh = extract_mesh(G_c, grid.resolution, grid.padding)
    if mesh.n_faces == 0:
        raise EmptyProxyError("density field never crosses the iso level; no canonical mesh")
    return mesh


def lift_offset(delta_m, phi) -> np.ndarray:
    """Per-Gaussian offsets: each Gaussian takes the offset of its nearest canonical vertex."""
    delta_m = np.asarray(delta_m, dtype=np.float64).reshape(-1, 3)
    phi = np.asarray(phi, dtype=np.int64)
    if len(phi) and (phi.min() < 0 or phi.max() >= len(delta_m)):
        raise InvalidArgument("index map refers past the end of the vertex offsets")
    return delta_m[phi]


def propagate_geometry(G_c: GaussianSet, theta: DeformationField, delta_g, t: float,
                       grid: GridConfig = GridConfig()) -> TriMesh:
    """Deform the canonical Gaussians to time ``t``, shift them by ``delta_g``, re-mesh."""
    delta_g = np.asarray(delta_g, dtype=np.float64).reshape(-1, 3)
    if len(delta_g) != len(G_c):
        raise InvalidArgument("one offset per Gaussian required")
    G_t = deform_forward(theta, G_c, t)
    if np.any(delta_g):
        G_t = G_t.replace(positions=G_t.positions + delta_g)
    mesh = extract_mesh(G_t, grid.resolution, grid.padding)
    if mesh.n_faces == 0:
        raise EmptyProxyError(f"no surface at t={t}")
    return mesh


def mesh_propagate(M_c: TriMesh, theta: DeformationField, delta_m, t: float):
    """Returns ``(deformed, edited)``: the canonical mesh pushed through the forward
    field, and the same with the canonical edit added. Faces are shared."""
    delta_m = np.asarray(delta_m, dtype=np.float64).reshape(-1, 3)
    if len(delta_m) != M_c.n_vertices:
        raise InvalidArgument("one offset per canonical vertex required")
    moved = M_c.vertices + theta(M_c.vertices, t)[:, :3] if M_c.n_vertices else M_c.vertices
    deformed = TriMesh(moved, M_c.faces)
    edited = TriMesh(moved + delta_m, M_c.faces)
    return deformed, edited


def texture_query(M_d: TriMesh, theta_inv: DeformationField, color_field: ColorField,
                  t: float) -> np.ndarray:
    """Colors for the deformed canonical mesh, read from the canonical color network."""
    return color_query(color_field, canonical_map(theta_inv, M_d.vertices, t))


def transfer_texture(M_hat: TriMesh, M_tilde: TriMesh, colors) -> np.ndarray:
    """Give every re-meshed vertex the color of its nearest mesh-propagated vertex."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if M_tilde.n_vertices == 0:
        raise InvalidArgument("mesh-propagated mesh is empty")
    if len(colors) != M_tilde.n_vertices:
        raise InvalidArgument("one color per mesh-propagated vertex required")
    return colors[nn_map(M_hat.vertices, M_tilde.vertices)]


# ----------------------------------------------------------------------------
# edit specifications
# ----------------------------------------------------------------------------


def _rigid_matrix(op: dict):
    """Affine ``(A, b)`` so that ``v -> A v + b``."""
    kind = op["type"]
    if kind == "translate":
        return np.eye(3), np.asarray(op["vector"], dtype=np.float64).reshape(3)
    pivot = np.asarray(op.get("pivot", (0.0, 0.0, 0.0)), dtype=np.float64).reshape(3)
    if kind == "rotate":
        A = axis_angle_matrix(op["axis"], float(op["degrees"]))
    elif kind == "scale":
        f = float(op["factor"])
        if not np.isfinite(f) or f <= 0:
            raise InvalidArgument("scale factor must be positive")
        A = f * np.eye(3)
    else:
        raise InvalidArgument(f"not a rigid operation: {kind!r}")
    return A, pivot - A @ pivot


def _group(op: dict, n: int) -> np.ndarray:
    g = op.get("group")
    if g is None:
        return np.arange(n)
    g = np.asarray(g, dtype=np.int64).reshape(-1)
    if len(g) and (g.min() < 0 or g.max() >= n):
        raise InvalidArgument("vertex group index out of range")
    return np.unique(g)


def make_rigid_offset(M_c: TriMesh, transform: dict, group=None) -> np.ndarray:
    """Per-vertex offset ``T(v) - v`` on the selected vertices, zero elsewhere."""
    op = dict(transform)
    if group is not None:
        op["group"] = group
    A, b = _rigid_matrix(op)
    idx = _group(op, M_c.n_vertices)
    out = np.zeros_like(M_c.vertices)
    v = M_c.vertices[idx]
    out[idx] = (v @ A.T + b) - v
    return out


RIGID_OPS = ("rotate", "translate", "scale")
OP_TYPES = RIGID_OPS + ("offsets", "paint", "compose")


@dataclass
class EditSpec:
    """Ordered edit operations applied once to the canonical mesh."""

    operations: list = field(default_factory=list)
    base_dir: Optional[str] = None

    def __post_init__(self):
        for op in self.operations:
            if not isinstance(op, dict) or op.get("type") not in OP_TYPES:
                raise InvalidArgument(f"unknown edit operation: {op!r}")

    @property
    def is_empty(self) -> bool:
        return not self.operations

    def to_json(self) -> str:
        return json.dumps({"operations": self.operations}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "EditSpec":
        path = Path(path)
        data = json.loads(path.read_text())
        if not isinstance(data, dict) or not isinstance(data.get("operations", []), list):
            raise InvalidArgument("edit spec must be an object with an 'operations' list")
        return cls(list(data.get("operations", [])), str(path.parent))

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() or self.base_dir is None else Path(self.base_dir) / p


@dataclass
class Composition:
    """An extra mesh riding on the host's forward motion at one anchor vertex."""

    mesh: TriMesh
    anchor_index: int
    anchor: np.ndarray

    def at(self, theta: DeformationField, t: float) -> TriMesh:
        shift = theta(self.anchor[None, :], t)[0, :3]
        return self.mesh.translated(shift)


@dataclass
class CanonicalEdit:
    delta_m: np.ndarray
    paint: dict = field(default_factory=dict)  # vertex index -> rgb
    compositions: list = field(default_factory=list)


def _placement(mesh: TriMesh, placement: Optional[dict]) -> TriMesh:
    if not placement:
        return mesh
    v = mesh.vertices * float(placement.get("scale", 1.0))
    rot = placement.get("rotate")
    if rot:
        v = v @ axis_angle_matrix(rot["axis"], float(rot["degrees"])).T
    v = v + np.asarray(placement.get("translate", (0.0, 0.0, 0.0)), dtype=np.float64)
    return mesh.replace(vertices=v, normals=None)


def compose_object(M_c: TriMesh, new_mesh: TriMesh, placement: Optional[dict] = None) -> Composition:
    """Anchor the placed mesh at the canonical vertex nearest its centroid."""
    if M_c.n_vertices == 0:
        raise InvalidArgument("host mesh is empty")
    if new_mesh.n_vertices == 0:
        raise InvalidArgument("composed mesh is empty")
    placed = _placement(new_mesh, placement)
    centroid = placed.vertices.mean(axis=0)
    k = int(nn_map(centroid[None, :], M_c.vertices)[0])
    return Composition(placed, k, M_c.vertices[k].copy())


def apply_edit_spec(M_c: TriMesh, spec: EditSpec) -> CanonicalEdit:
    """Fold the operations into one per-vertex offset, paint table and compositions."""
    from .io import load_obj, load_offsets

    current = np.array(M_c.vertices)
    paint: dict = {}
    comps = []
    for op in spec.operations:
        kind = op["type"]
        if kind in RIGID_OPS:
            A, b = _rigid_matrix(op)
            idx = _group(op, len(current))
            current[idx] = current[idx] @ A.T + b
        elif kind == "offsets":
            off = np.asarray(op["data"], dtype=np.float64).reshape(-1, 3) if "data" in op \
                else load_offsets(spec._resolve(op["path"]))
            if len(off) != len(current):
                raise InvalidArgument(
                    f"offset file has {len(off)} vertices, canonical mesh has {len(current)}")
            current += off
        elif kind == "paint":
            rgb = np.clip(np.asarray(op["color"], dtype=np.float64).reshape(3), 0.0, 1.0)
            for i in _group(op, len(current)):
                paint[int(i)] = rgb
        else:  # compose
            new_mesh = load_obj(spec._resolve(op["mesh"]))
            comps.append(compose_object(M_c, new_mesh, op.get("placement")))
    return CanonicalEdit(current - M_c.vertices, paint, comps)


# ----------------------------------------------------------------------------
# full propagation
# ----------------------------------------------------------------------------


def _merge(meshes: Sequence[TriMesh]) -> TriMesh:
    meshes = [m for m in meshes if m.n_vertices]
    if len(meshes) == 1:
        return meshes[0]
    verts, faces, cols = [], [], []
    base = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + base)
        cols.append(m.colors if m.colors is not None else np.full((m.n_vertices, 3), 0.7))
        base += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols))


@dataclass
class PropagationState:
    """Everything that is computed once per edit and reused for every frame."""

    gaussians: GaussianSet
    theta: DeformationField
    theta_inv: DeformationField
    color_field: ColorField
    canonical_mesh: TriMesh
    phi: np.ndarray
    edit: CanonicalEdit
    delta_g: np.ndarray
    grid: GridConfig


def prepare_edit(gaussians: GaussianSet, theta: DeformationField, theta_inv: DeformationField,
                 color_field: ColorField, spec: Optional[EditSpec] = None,
                 grid: GridConfig = GridConfig(), canonical_mesh: Optional[TriMesh] = None
                 ) -> PropagationState:
    spec = spec or EditSpec()
    M_c = canonical_mesh if canonical_mesh is not None else extract_canonical_mesh(gaussians, grid)
    phi = nn_map(gaussians.positions, M_c.vertices)
    edit = apply_edit_spec(M_c, spec)
    return PropagationState(gaussians, theta, theta_inv, color_field, M_c, phi, edit,
                            lift_offset(edit.delta_m, phi), grid)


def propagate_frame(state: PropagationState, t: float) -> TriMesh:
    """Edited, colored mesh at time ``t`` (host plus composed objects)."""
    M_hat = propagate_geometry(state.gaussians, state.theta, state.delta_g, t, state.grid)
    M_d, M_e = mesh_propagate(state.canonical_mesh, state.theta, state.edit.delta_m, t)
    colors = texture_query(M_d, state.theta_inv, state.color_field, t)
    if state.edit.paint:
        idx = np.fromiter(state.edit.paint.keys(), dtype=np.int64)
        colors[idx] = np.stack([state.edit.paint[int(i)] for i in idx])
    host = vertex_normals(M_hat.replace(colors=transfer_texture(M_hat, M_e, colors)))
    extra = [c.at(state.theta, t) for c in state.edit.compositions]
    if not extra:
        return host
    return vertex_normals(_merge([host] + extra))


def propagate_edit(state: PropagationState, times: Sequence[float]) -> list:
    return [propagate_frame(state, t) for t in times]


def render_edit_controls(meshes: Sequence[TriMesh], cameras: Sequence, out_dir=None,
                         background=(1.0, 1.0, 1.0)) -> list:
    """Rasterize each frame's mesh into mask, depth, normal map and mesh image.

    With ``out_dir`` the renders are written as ``{normal,mesh_image,mask}/frame_%04d.png``
    and ``depth/frame_%04d.pfm``. Normals are stored as ``(n + 1) / 2``.
    """
    if len(meshes) != len(cameras):
        raise InvalidArgument("one camera per frame required")
    renders = []
    for i, (mesh, cam) in enumerate(zip(meshes, cameras)):
        if mesh.n_faces == 0:
            warnings.warn(f"frame {i}: empty mesh, writing a background frame", RuntimeWarning,
                          stacklevel=2)
        renders.append(rasterize_mesh(mesh, cam, background))
    if out_dir is not None:
        write_controls(renders, out_dir)
    return renders


def write_controls(renders: Sequence[MeshRender], out_dir) -> dict:
    from .io import save_mask_png, save_pfm, save_png

    out = Path(out_dir)
    dirs = {k: out / k for k in ("normal", "mesh_image", "mask", "depth")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(renders):
        name = f"frame_{i:04d}"
        normal_rgb = np.where(r.mask[..., None] > 0, (r.normal + 1.0) * 0.5, 1.0)
        save_png(dirs["normal"] / f"{name}.png", normal_rgb)
        save_png(dirs["mesh_image"] / f"{name}.png", r.mesh_image)
        save_mask_png(dirs["mask"] / f"{name}.png", r.mask)
        save_pfm(dirs["depth"] / f"{name}.pfm", r.depth.astype(np.float32))
    return {k: str(v) for k, v in dirs.items()}
