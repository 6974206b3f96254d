"""Readers and writers for the on-disk artifact formats."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraPose, GaussianSet, InvalidArgument, TriMesh

PLY_PROPERTIES = ("x", "y", "z", "opacity", "red", "green", "blue",
                  "qw", "qx", "qy", "qz", "sx", "sy", "sz")


# -- Gaussian PLY -------------------------------------------------------------


def save_gaussians_ply(path, gaussians: GaussianSet) -> None:
    data = np.concatenate(
        [gaussians.positions, gaussians.opacities[:, None], gaussians.colors,
         gaussians.rotations, gaussians.scales], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gaussians)}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_gaussians_ply(path) -> GaussianSet:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0 or not raw.startswith(b"ply"):
        raise InvalidArgument(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise InvalidArgument(f"{path}: only binary little-endian PLY is supported")
    count = next(int(l.split()[2]) for l in lines if l.startswith("element vertex"))
    props = [l.split()[2] for l in lines if l.startswith("property float")]
    if tuple(props) != PLY_PROPERTIES:
        raise InvalidArgument(f"{path}: unexpected PLY property layout {props}")
    body = raw[end + len(b"end_header\n"):]
    data = np.frombuffer(body, dtype="<f4", count=count * len(props)).reshape(count, len(props))
    data = data.astype(np.float64)
    return GaussianSet(positions=data[:, 0:3], opacities=data[:, 3], colors=data[:, 4:7],
                       rotations=data[:, 7:11], scales=data[:, 11:14])


# -- OBJ ----------------------------------------------------------------------


def save_obj(path, mesh: TriMesh) -> None:
    out = []
    if mesh.colors is not None:
        for v, c in zip(mesh.vertices, mesh.colors):
            out.append("v %.17g %.17g %.17g %.9g %.9g %.9g" % (*v, *c))
    else:
        for v in mesh.vertices:
            out.append("v %.17g %.17g %.17g" % tuple(v))
    if mesh.normals is not None:
        for n in mesh.normals:
            out.append("vn %.9g %.9g %.9g" % tuple(n))
        for f in mesh.faces + 1:
            out.append("f %d//%d %d//%d %d//%d" % (f[0], f[0], f[1], f[1], f[2], f[2]))
    else:
        for f in mesh.faces + 1:
            out.append("f %d %d %d" % tuple(f))
    Path(path).write_text("\n".join(out) + "\n")


def load_obj(path) -> TriMesh:
    verts, colors, normals, faces = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if colors and len(colors) != len(verts):
        raise InvalidArgument(f"{path}: vertex colors given for only some vertices")
    return TriMesh(
        vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        colors=np.array(colors) if colors else None,
        normals=np.array(normals) if normals and len(normals) == len(verts) else None,
    )


# -- images -------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (H x W or H x W x 3) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    save_png(path, np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8))


def load_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path)) > 127).astype(np.float64)


def save_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (scale -1); rows are stored bottom-to-top."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# -- offsets and rigs -----------------------------------------------------------


def save_offsets(path, offsets: np.ndarray) -> None:
    """Per-vertex offsets: uint32 count header then float32 xyz triplets."""
    off = np.asarray(offsets, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(off)))
        fh.write(off.tobytes())


def load_offsets(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise InvalidArgument(f"{path}: truncated offset file")
    (count,) = struct.unpack("<I", raw[:4])
    if len(raw) != 4 + 12 * count:
        raise InvalidArgument(f"{path}: offset file size does not match its count header")
    return np.frombuffer(raw[4:], dtype="<f4").reshape(count, 3).astype(np.float64)


def save_rig(path, cameras: list[CameraPose]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=2))


def load_rig(path) -> list[CameraPose]:
    return [CameraPose.from_dict(d) for d in json.loads(Path(path).read_text())]
