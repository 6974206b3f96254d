"""Synthetic dynamic scenes with exact ground truth.

Each preset is an analytic deformation of a canonical colored mesh. Frames
are rendered with the mesh rasterizer from the observed camera (azimuth 0)
and, optionally, six novel azimuths around the object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geometry import CameraPose, InvalidArgument, TriMesh
from .io import (load_mask_png, load_obj, load_pfm, load_png, save_mask_png, save_obj,
                 save_pfm, save_png)
from .mesh import rasterize_mesh, vertex_normals

OBSERVED_FOV = 33.8
OBSERVED_ELEVATION = 0.0
NOVEL_AZIMUTHS = (51.43, 102.86, 154.29, 205.71, 257.14, 308.57)
CAMERA_RADIUS = 4.0
DEFAULT_FRAMES = 21
WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class View:
    image: np.ndarray
    mask: np.ndarray
    disparity: np.ndarray
    camera: CameraPose


@dataclass
class FrameBundle:
    """``views[i][0]`` is the observed view of frame ``i``; ``views[i][1:]`` are novel views."""

    times: np.ndarray
    views: list
    gt_meshes: list = field(default_factory=list)
    trajectories: Optional[np.ndarray] = None
    preset: Optional[str] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) == 0:
            raise InvalidArgument("bundle needs at least one frame")
        if len(self.times) != len(self.views):
            raise InvalidArgument("times and views disagree on frame count")
        counts = {len(v) for v in self.views}
        if len(counts) != 1:
            raise InvalidArgument("every frame must carry the same number of views")
        shape = self.views[0][0].image.shape
        for frame in self.views:
            for v in frame:
                if v.image.shape != shape or v.mask.shape != shape[:2] or v.disparity.shape != shape[:2]:
                    raise InvalidArgument("image/mask/disparity shapes are inconsistent")
        if self.gt_meshes:
            if len({m.n_vertices for m in self.gt_meshes}) != 1:
                raise InvalidArgument("ground-truth vertex count must be constant over time")

    @property
    def n_frames(self) -> int:
        return len(self.views)

    @property
    def n_novel(self) -> int:
        return len(self.views[0]) - 1

    @property
    def resolution(self) -> tuple:
        return self.views[0][0].image.shape[:2]

    def observed(self, i: int) -> View:
        return self.views[i][0]


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------


def _grid_patch(origin, u, v, n):
    s = np.linspace(0.0, 1.0, n + 1)
    a, b = np.meshgrid(s, s, indexing="ij")
    verts = origin + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    q0, q1, q2, q3 = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
    faces = np.concatenate([np.stack([q0, q1, q2], -1).reshape(-1, 3),
                            np.stack([q0, q2, q3], -1).reshape(-1, 3)])
    return verts, faces


def box_mesh(size, center, colors, n=16) -> TriMesh:
    """Axis-aligned box built from six independent grid patches (one color each)."""
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2
    c = np.asarray(center, dtype=np.float64)
    patches = [
        (c + [sx, -sy, -sz], [0, 2 * sy, 0], [0, 0, 2 * sz]),   # +x
        (c + [-sx, -sy, -sz], [0, 0, 2 * sz], [0, 2 * sy, 0]),  # -x
        (c + [-sx, sy, -sz], [0, 0, 2 * sz], [2 * sx, 0, 0]),   # +y
        (c + [-sx, -sy, -sz], [2 * sx, 0, 0], [0, 0, 2 * sz]),  # -y
        (c + [-sx, -sy, sz], [2 * sx, 0, 0], [0, 2 * sy, 0]),   # +z
        (c + [-sx, -sy, -sz], [0, 2 * sy, 0], [2 * sx, 0, 0]),  # -z
    ]
    verts, faces, cols = [], [], []
    offset = 0
    for (o, u, v), col in zip(patches, colors):
        pv, pf = _grid_patch(np.asarray(o), np.asarray(u, float), np.asarray(v, float), n)
        verts.append(pv)
        faces.append(pf + offset)
        cols.append(np.tile(col, (len(pv), 1)))
        offset += len(pv)
    return TriMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(cols))


def uv_sphere(n_lat=32, n_lon=64) -> TriMesh:
    """Unit sphere with poles on the y axis; outward counter-clockwise faces."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)], -1).reshape(-1, 3)
    verts = np.concatenate([[[0, 1, 0]], ring, [[0, -1, 0]]])
    n_rings = n_lat - 1
    faces = []
    idx = lambda r, c: 1 + r * n_lon + (c % n_lon)
    for c in range(n_lon):
        faces.append([0, idx(0, c), idx(0, c + 1)])
        faces.append([len(verts) - 1, idx(n_rings - 1, c + 1), idx(n_rings - 1, c)])
    for r in range(n_rings - 1):
        for c in range(n_lon):
            a, b = idx(r, c), idx(r, c + 1)
            d, e = idx(r + 1, c), idx(r + 1, c + 1)
            faces.append([a, d, e])
            faces.append([a, e, b])
    return TriMesh(verts, np.array(faces))


def cylinder_mesh(radius, height, n_around=48, n_up=24) -> TriMesh:
    """Closed cylinder along y, centered at the origin."""
    phi = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    ys = np.linspace(-height / 2, height / 2, n_up + 1)
    yy, pp = np.meshgrid(ys, phi, indexing="ij")
    side = np.stack([radius * np.sin(pp), yy, radius * np.cos(pp)], -1).reshape(-1, 3)
    verts = np.concatenate([side, [[0, -height / 2, 0], [0, height / 2, 0]]])
    bottom, top = len(side), len(side) + 1
    idx = lambda r, c: r * n_around + (c % n_around)
    faces = []
    for r in range(n_up):
        for c in range(n_around):
            a, b = idx(r, c), idx(r, c + 1)
            d, e = idx(r + 1, c), idx(r + 1, c + 1)
            faces.append([a, b, e])
            faces.append([a, e, d])
    for c in range(n_around):
        faces.append([bottom, idx(0, c + 1), idx(0, c)])
        faces.append([top, idx(n_up, c), idx(n_up, c + 1)])
    return TriMesh(verts, np.array(faces))


# ----------------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    name: str
    canonical: Callable[[], TriMesh]
    deform: Callable[[np.ndarray, float], np.ndarray]
    params: dict


BOX_COLORS = [(0.85, 0.25, 0.2), (0.2, 0.65, 0.3), (0.25, 0.35, 0.85),
              (0.9, 0.75, 0.2), (0.7, 0.3, 0.75), (0.2, 0.75, 0.75)]
BOX_TRANSLATION = (0.5, 0.0, 0.0)
TWO_TONE = ((0.85, 0.2, 0.2), (0.2, 0.3, 0.85))


def _translating_box():
    return box_mesh((0.9, 0.7, 0.6), (-0.25, 0.0, 0.0), BOX_COLORS)


def _translate_box(v, t):
    return v + np.asarray(BOX_TRANSLATION) * t


def _bending_cylinder():
    m = cylinder_mesh(0.25, 1.2)
    y = m.vertices[:, 1]
    band = np.floor((y + 0.6) / 0.3).astype(int) % 2
    colors = np.where(band[:, None] == 0, [0.9, 0.55, 0.15], [0.15, 0.6, 0.6])
    return m.replace(colors=colors)


def _bend(v, t):
    out = np.array(v)
    s = (v[:, 1] + 0.6) / 1.2
    out[:, 0] += 0.45 * t * s**2
    return out


def _bump_sphere():
    m = uv_sphere(32, 64)
    v = m.vertices * 0.5
    az = np.arctan2(v[:, 0], v[:, 2])
    sector = np.floor((az + np.pi) / (2 * np.pi / 3)).astype(int) % 3
    palette = np.array([(0.85, 0.3, 0.25), (0.3, 0.75, 0.35), (0.3, 0.4, 0.85)])
    return TriMesh(v, m.faces, palette[sector])


def _orbit_bump(v, t):
    d = v / np.linalg.norm(v, axis=1, keepdims=True)
    ang = np.pi * t
    b = np.array([np.sin(ang), 0.2, np.cos(ang)])
    b /= np.linalg.norm(b)
    r = 0.5 + 0.15 * np.exp(-(1.0 - d @ b) / 0.08)
    return d * r[:, None]


def _blob():
    m = uv_sphere(32, 64)
    d = m.vertices
    r = 0.5 * (1 + 0.12 * d[:, 0] * d[:, 1] + 0.08 * np.sin(3 * np.arctan2(d[:, 0], d[:, 2])) * (1 - d[:, 1] ** 2))
    v = d * r[:, None]
    colors = np.where(v[:, 0:1] > 0, TWO_TONE[0], TWO_TONE[1])
    return TriMesh(v, m.faces, colors)


def _blob_motion(v, t):
    a = np.deg2rad(45.0) * t
    c, s = np.cos(a), np.sin(a)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return v @ R.T + np.array([0.3 * t, 0.1 * np.sin(np.pi * t), 0.0])


PRESETS = {
    "translating-box": Preset("translating-box", _translating_box, _translate_box,
                              {"translation": list(BOX_TRANSLATION), "size": [0.9, 0.7, 0.6]}),
    "bending-cylinder": Preset("bending-cylinder", _bending_cylinder, _bend,
                               {"radius": 0.25, "height": 1.2, "bend": 0.45}),
    "orbit-bump-sphere": Preset("orbit-bump-sphere", _bump_sphere, _orbit_bump,
                                {"radius": 0.5, "bump_height": 0.15}),
    "two-tone-blob": Preset("two-tone-blob", _blob, _blob_motion,
                            {"radius": 0.5, "rotation_deg": 45.0, "translation": [0.3, 0.0, 0.0]}),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def scene_cameras(resolution: int, n_novel: int) -> list[CameraPose]:
    if n_novel not in (0, 6):
        raise InvalidArgument("novel view count must be 0 or 6")
    azimuths = (0.0,) + (NOVEL_AZIMUTHS if n_novel else ())
    return [CameraPose(OBSERVED_FOV, OBSERVED_ELEVATION, az, CAMERA_RADIUS, resolution, resolution)
            for az in azimuths]


def gt_mesh_at(preset: str, t: float) -> TriMesh:
    p = get_preset(preset)
    canon = p.canonical()
    return canon.replace(vertices=p.deform(canon.vertices, float(t)), normals=None)


def render_view(mesh: TriMesh, cam: CameraPose) -> View:
    r = rasterize_mesh(mesh, cam, WHITE)
    disparity = np.where(r.mask > 0, 1.0 / r.depth, 0.0)
    return View(r.mesh_image, r.mask, disparity, cam)


def render_frame(preset: str, t: float, resolution: int = 64, n_novel: int = 6):
    """Ground-truth mesh and all views of one time step."""
    mesh = vertex_normals(gt_mesh_at(preset, t))
    return mesh, [render_view(mesh, cam) for cam in scene_cameras(resolution, n_novel)]


def make_scene(preset: str, T: int = DEFAULT_FRAMES, resolution: int = 64, N: int = 6) -> FrameBundle:
    if T < 1:
        raise InvalidArgument("need at least one frame")
    if resolution < 32:
        raise InvalidArgument("resolution must be at least 32")
    p = get_preset(preset)
    times = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    meshes, views = [], []
    for t in times:
        mesh, frame_views = render_frame(preset, t, resolution, N)
        meshes.append(mesh)
        views.append(frame_views)
    traj = np.stack([m.vertices for m in meshes])
    params = dict(p.params, frames=T, resolution=resolution, novel_views=N)
    return FrameBundle(times, views, meshes, traj, preset, params)


# ----------------------------------------------------------------------------
# degradation of novel views
# ----------------------------------------------------------------------------


def _similarity_warp(img, angle_deg, scale, shift, order, cval):
    from scipy.ndimage import affine_transform

    H, W = img.shape[:2]
    c = np.array([(H - 1) / 2, (W - 1) / 2])
    a = np.deg2rad(angle_deg)
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) * scale
    Rinv = np.linalg.inv(R)
    offset = c - Rinv @ (c + np.asarray(shift))
    if img.ndim == 2:
        return affine_transform(img, Rinv, offset=offset, order=order, mode="constant", cval=cval)
    return np.stack([affine_transform(img[..., k], Rinv, offset=offset, order=order,
                                      mode="constant", cval=cval) for k in range(img.shape[2])], -1)


def corrupt_views(bundle: FrameBundle, severity: float, seed: int = 0) -> FrameBundle:
    """Degrade novel views with noise and a small random similarity warp."""
    if not 0.0 <= severity <= 1.0:
        raise InvalidArgument("severity must lie in [0, 1]")
    if severity == 0.0:
        return bundle
    rng = np.random.default_rng(seed)
    frames = []
    for frame in bundle.views:
        out = [frame[0]]
        for v in frame[1:]:
            angle = rng.uniform(-6, 6) * severity
            scale = 1.0 + rng.uniform(-0.06, 0.06) * severity
            shift = rng.uniform(-3, 3, size=2) * severity
            img = _similarity_warp(v.image, angle, scale, shift, 1, 1.0)
            img = np.clip(img + rng.normal(0, 0.12 * severity, img.shape), 0, 1)
            mask = (_similarity_warp(v.mask, angle, scale, shift, 0, 0.0) > 0.5).astype(np.float64)
            disp = _similarity_warp(v.disparity, angle, scale, shift, 0, 0.0) * mask
            out.append(View(img, mask, disp, v.camera))
        frames.append(out)
    return replace(bundle, views=frames)


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------


def save_bundle(bundle: FrameBundle, root) -> Path:
    """Write images/masks/disparities plus a manifest JSON; returns the manifest path."""
    root = Path(root)
    for sub in ("images", "masks", "disparity", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (t, views) in enumerate(zip(bundle.times, bundle.views)):
        entries = []
        for j, v in enumerate(views):
            stem = f"frame_{i:04d}_view_{j}"
            save_png(root / "images" / f"{stem}.png", v.image)
            save_mask_png(root / "masks" / f"{stem}.png", v.mask)
            save_pfm(root / "disparity" / f"{stem}.pfm", v.disparity)
            entries.append({
                "image": f"images/{stem}.png",
                "mask": f"masks/{stem}.png",
                "disparity": f"disparity/{stem}.pfm",
                "camera": v.camera.to_dict(),
            })
        record = {"index": i, "time": float(t), "views": entries}
        if bundle.gt_meshes:
            gt = f"gt/frame_{i:04d}.obj"
            save_obj(root / gt, bundle.gt_meshes[i])
            record["gt_mesh"] = gt
        frames.append(record)
    manifest = {"preset": bundle.preset, "params": bundle.params, "frames": frames}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_bundle(manifest_path) -> FrameBundle:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    times, views, meshes = [], [], []
    for rec in manifest["frames"]:
        times.append(rec["time"])
        frame = []
        for e in rec["views"]:
            img = load_png(root / e["image"])
            if img.ndim == 3 and img.shape[2] == 4:
                img = img[..., :3]
            frame.append(View(img, load_mask_png(root / e["mask"]), load_pfm(root / e["disparity"]),
                              CameraPose.from_dict(e["camera"])))
        views.append(frame)
        if "gt_mesh" in rec:
            meshes.append(vertex_normals(load_obj(root / rec["gt_mesh"])))
    traj = np.stack([m.vertices for m in meshes]) if meshes else None
    return FrameBundle(np.array(times), views, meshes, traj, manifest.get("preset"),
                       manifest.get("params", {}))
