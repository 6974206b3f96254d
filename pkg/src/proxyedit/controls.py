"""Self-supervised control data: reference and texture simulators, mask algebra,
control-map composition, batch assembly and long-video window blending.

Images are float arrays in [0, 1] (H x W x 3), masks are H x W with values in
{0, 1}. Gray is 128/255 and white is 1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.transform import resize

from .geometry import InvalidArgument

GRAY = 128.0 / 255.0
WHITE = 1.0
STAGE2_TEXTURE_PROB = 0.2
REFERENCE_DROP_PROB = 0.1
DEFAULT_WINDOW = 14


def _image(x, name="image") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise InvalidArgument(f"{name} must be H x W x 3")
    return x


def _mask(m, shape, name="mask") -> np.ndarray:
    m = np.asarray(m)
    if m.shape != tuple(shape[:2]):
        raise InvalidArgument(f"{name} shape {m.shape} does not match image shape {shape[:2]}")
    return m > 0.5


# ----------------------------------------------------------------------------
# reference augmentation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)  # pixels, (x, y)
    rotation: float = 0.0  # degrees, counter-clockwise in the image
    permute: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgument("augmentation scale must be positive")
        object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))

    @classmethod
    def sample(cls, rng: np.random.Generator, scale_range=(0.8, 1.2), max_shift=8.0,
               max_rotation=15.0, permute_prob=0.5) -> "AugmentParams":
        return cls(float(rng.uniform(*scale_range)),
                   tuple(rng.uniform(-max_shift, max_shift, size=2)),
                   float(rng.uniform(-max_rotation, max_rotation)),
                   bool(rng.random() < permute_prob),
                   int(rng.integers(2**31 - 1)))


def similarity_matrix(shape, scale: float, rotation: float, shift) -> np.ndarray:
    """Forward 2x3 map (x, y) -> scale * R (x - c) + c + shift about the image center."""
    H, W = shape[:2]
    c = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    a = np.deg2rad(rotation)
    # image y points down, so a counter-clockwise turn on screen is a clockwise one in (x, y)
    R = scale * np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    return np.hstack([R, (c + np.asarray(shift, dtype=np.float64) - R @ c)[:, None]])


def _warp(img: np.ndarray, A: np.ndarray, order: int, cval: float) -> np.ndarray:
    # ndimage maps output (row, col) -> input (row, col); invert the (x, y) map
    M = A[:, :2]
    Minv = np.linalg.inv(M)
    off = -Minv @ A[:, 2]
    P = np.array([[0, 1], [1, 0]])  # swap x/y <-> row/col
    matrix = P @ Minv @ P
    offset = P @ off
    if img.ndim == 2:
        return ndimage.affine_transform(img, matrix, offset, order=order, mode="constant", cval=cval)
    return np.stack([ndimage.affine_transform(img[..., c], matrix, offset, order=order,
                                              mode="constant", cval=cval)
                     for c in range(img.shape[2])], axis=-1)


def augment_reference(frames: Sequence, masks: Sequence, p: AugmentParams):
    """Cut the object out, apply one shared similarity transform, fill with gray.

    Returns ``(reference_frames, reference_masks, order)`` where ``order`` is the
    frame permutation used (identity unless ``p.permute``).
    """
    if len(frames) != len(masks):
        raise InvalidArgument("frames and masks must be aligned")
    if len(frames) == 0:
        return [], [], np.zeros(0, dtype=np.int64)
    shape = _image(frames[0]).shape
    A = similarity_matrix(shape, p.scale, p.rotation, p.shift)
    identity = p.scale == 1.0 and p.rotation == 0.0 and p.shift == (0.0, 0.0)
    out_f, out_m = [], []
    for i, (f, m) in enumerate(zip(frames, masks)):
        f = _image(f)
        m = _mask(m, f.shape).astype(np.float64)
        if not m.any():
            warnings.warn(f"frame {i}: empty mask, reference frame is all gray", RuntimeWarning,
                          stacklevel=2)
        if identity:
            wm, wf = m, f
        else:
            wm = (_warp(m, A, 0, 0.0) > 0.5).astype(np.float64)
            wf = _warp(f, A, 1, GRAY)
        out_f.append(np.where(wm[..., None] > 0.5, wf, GRAY))
        out_m.append(wm)
    order = np.arange(len(frames))
    if p.permute:
        order = np.random.default_rng(p.seed).permutation(len(frames))
    return [out_f[i] for i in order], [out_m[i] for i in order], order


# ----------------------------------------------------------------------------
# texture simulation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TextureSimParams:
    n_segments: int = 1000
    median_kernel: int = 5
    scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 800 <= self.n_segments <= 1200:
            raise InvalidArgument("superpixel count must lie in [800, 1200]")
        if self.median_kernel not in (3, 5, 7, 9, 11):
            raise InvalidArgument("median kernel must be odd and in [3, 11]")
        if not 0.25 <= self.scale <= 0.5:
            raise InvalidArgument("down-up scale must lie in [0.25, 0.5]")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "TextureSimParams":
        return cls(int(rng.integers(800, 1201)), int(rng.choice([3, 5, 7, 9, 11])),
                   float(rng.uniform(0.25, 0.5)), int(rng.integers(2**31 - 1)))


SLIC_ITERATIONS = 10


@numba.njit(cache=True)
def _slic_assign(lab, centers, S, m, labels, dist):
    H, W = labels.shape
    dist[:, :] = np.inf
    wxy = (m / S) ** 2
    for k in range(centers.shape[0]):
        cy, cx = centers[k, 3], centers[k, 4]
        r0 = max(0, int(cy - 2 * S))
        r1 = min(H - 1, int(cy + 2 * S) + 1)
        c0 = max(0, int(cx - 2 * S))
        c1 = min(W - 1, int(cx + 2 * S) + 1)
        for y in range(r0, r1 + 1):
            for x in range(c0, c1 + 1):
                dc = 0.0
                for c in range(3):
                    d = lab[y, x, c] - centers[k, c]
                    dc += d * d
                ds = (y - cy) ** 2 + (x - cx) ** 2
                D = dc + wxy * ds
                if D < dist[y, x]:
                    dist[y, x] = D
                    labels[y, x] = k


def _slic_grid(H: int, W: int, n: int):
    rows = max(1, int(round(np.sqrt(n * H / W))))
    cols = max(1, int(round(n / rows)))
    rows, cols = min(rows, H), min(cols, W)
    ys = (np.arange(rows) + 0.5) * H / rows - 0.5
    xs = (np.arange(cols) + 0.5) * W / cols - 0.5
    return np.array([(y, x) for y in ys for x in xs])


@numba.njit(cache=True)
def _enforce_connectivity(labels, min_size):
    """Flood-fill relabeling; a piece smaller than ``min_size`` joins the label of the
    already-visited pixel adjacent to its first pixel (raster order)."""
    H, W = labels.shape
    out = np.full((H, W), -1, dtype=np.int64)
    qy = np.empty(H * W, dtype=np.int64)
    qx = np.empty(H * W, dtype=np.int64)
    dy = (-1, 0, 1, 0)
    dx = (0, -1, 0, 1)
    n = 0
    for y0 in range(H):
        for x0 in range(W):
            if out[y0, x0] >= 0:
                continue
            adjacent = -1
            for d in range(4):
                y, x = y0 + dy[d], x0 + dx[d]
                if 0 <= y < H and 0 <= x < W and out[y, x] >= 0:
                    adjacent = out[y, x]
            src = labels[y0, x0]
            out[y0, x0] = n
            qy[0], qx[0] = y0, x0
            head, tail = 0, 1
            while head < tail:
                cy, cx = qy[head], qx[head]
                head += 1
                for d in range(4):
                    y, x = cy + dy[d], cx + dx[d]
                    if 0 <= y < H and 0 <= x < W and out[y, x] < 0 and labels[y, x] == src:
                        out[y, x] = n
                        qy[tail], qx[tail] = y, x
                        tail += 1
            if tail < min_size and adjacent >= 0:
                for i in range(tail):
                    out[qy[i], qx[i]] = adjacent
            else:
                n += 1
    return out


def slic_segment(image, n_segments: int, compactness: float = 10.0) -> np.ndarray:
    """SLIC superpixels: k-means in (L, a, b, x, y) seeded on a regular grid, 10 passes,
    then connectivity enforcement. Labels are ``0..S-1`` in raster order of first pixel."""
    img = _image(image)
    if n_segments < 1:
        raise InvalidArgument("need at least one segment")
    H, W = img.shape[:2]
    n = min(int(n_segments), H * W)
    if n == 1:
        return np.zeros((H, W), dtype=np.int64)
    lab = rgb2lab(np.clip(img, 0.0, 1.0))
    seeds = _slic_grid(H, W, n)
    yi = np.clip(np.rint(seeds[:, 0]).astype(int), 0, H - 1)
    xi = np.clip(np.rint(seeds[:, 1]).astype(int), 0, W - 1)
    centers = np.concatenate([lab[yi, xi], seeds], axis=1)
    S = float(np.sqrt(H * W / len(centers)))
    labels = np.zeros((H, W), dtype=np.int64)
    dist = np.empty((H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    feats = np.concatenate([lab, yy[..., None], xx[..., None]], axis=-1).reshape(-1, 5)
    for _ in range(SLIC_ITERATIONS):
        _slic_assign(lab, centers, S, float(compactness), labels, dist)
        counts = np.bincount(labels.ravel(), minlength=len(centers))
        live = counts > 0
        for c in range(5):
            sums = np.bincount(labels.ravel(), weights=feats[:, c], minlength=len(centers))
            centers[live, c] = sums[live] / counts[live]
    labels = _enforce_connectivity(labels, max(1, int(S * S / 2)))
    _, first, inv = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv].reshape(H, W)


def superpixel_mean_fill(image, labels) -> np.ndarray:
    img = _image(image)
    labels = np.asarray(labels)
    n = int(labels.max()) + 1
    counts = np.bincount(labels.ravel(), minlength=n)
    out = np.empty_like(img)
    for c in range(3):
        means = np.bincount(labels.ravel(), weights=img[..., c].ravel(), minlength=n) / counts
        out[..., c] = means[labels]
    return out


def simulate_texture(image, p: TextureSimParams) -> np.ndarray:
    """Superpixel mean fill, median blur, then bilinear down- and upsampling."""
    img = _image(image)
    H, W = img.shape[:2]
    coarse = superpixel_mean_fill(img, slic_segment(img, p.n_segments))
    coarse = ndimage.median_filter(coarse, size=(p.median_kernel, p.median_kernel, 1), mode="nearest")
    small = (max(1, round(H * p.scale)), max(1, round(W * p.scale)))
    down = resize(coarse, small + (3,), order=1, anti_aliasing=False, mode="edge")
    return np.clip(resize(down, (H, W, 3), order=1, anti_aliasing=False, mode="edge"), 0.0, 1.0)


# ----------------------------------------------------------------------------
# mask algebra and control maps
# ----------------------------------------------------------------------------


def split_fg_bg(frame, mask):
    """Returns ``(V_ref, V_bg)``: the object on gray and the scene with the object whited out."""
    f = _image(frame)
    m = _mask(mask, f.shape)[..., None]
    return np.where(m, f, GRAY), np.where(m, WHITE, f)


def inpaint_mask(m_inp, m_tgt) -> np.ndarray:
    a = np.asarray(m_inp) > 0.5
    b = np.asarray(m_tgt) > 0.5
    if a.shape != b.shape:
        raise InvalidArgument("mask shapes differ")
    return (a & ~b).astype(np.float64)


def texture_control_map(rgb_edited, m_tgt, v_bg) -> np.ndarray:
    e = _image(rgb_edited, "edited frame")
    bg = _image(v_bg, "background")
    if e.shape != bg.shape:
        raise InvalidArgument("edited frame and background shapes differ")
    m = np.asarray(m_tgt, dtype=np.float64)
    if m.shape != e.shape[:2]:
        raise InvalidArgument("mask shape does not match frame shape")
    m = m[..., None]
    return e * m + bg * (1.0 - m)


def geometry_control_map(normal_edited, m_tgt) -> np.ndarray:
    n = _image(normal_edited, "normal map")
    m = _mask(m_tgt, n.shape)[..., None]
    return np.where(m, n, GRAY)


def normal_from_depth(depth) -> np.ndarray:
    """Camera-space normals ``normalize(-dz/dx, -dz/dy, 1)`` from central differences,
    encoded to [0, 1] as ``(n + 1) / 2``."""
    z = np.asarray(depth, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidArgument("depth must be H x W")
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("depth contains NaN/Inf")
    dzdy, dzdx = np.gradient(z)
    n = np.stack([-dzdx, -dzdy, np.ones_like(z)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return (n + 1.0) * 0.5


# ----------------------------------------------------------------------------
# batch assembly
# ----------------------------------------------------------------------------

BATCH_CHANNELS = ("input", "mask", "background", "texture", "geometry", "reference")


@dataclass(frozen=True)
class BatchFlags:
    stage: int
    texture_present: bool
    reference_dropped: bool


def noisy_background(background, mask, rng: np.random.Generator) -> np.ndarray:
    """Background image with uniform RGB noise written into the object region."""
    bg = _image(background, "background")
    m = _mask(mask, bg.shape)[..., None]
    return np.where(m, rng.random(bg.shape), bg)


def assemble_batch(stage: int, inputs: dict, rng: np.random.Generator):
    """Apply the stage's conditioning-dropout rules.

    Two uniforms are drawn per call in a fixed order (texture, then reference), so
    the branch record depends only on the generator state.
    Returns ``(batch, flags)``.
    """
    if stage not in (1, 2):
        raise InvalidArgument("stage must be 1 or 2")
    missing = [k for k in BATCH_CHANNELS if k not in inputs or inputs[k] is None]
    if missing:
        raise InvalidArgument(f"missing control channels: {missing}")
    u_tex, u_ref = rng.random(2)
    texture_present = stage == 2 and u_tex < STAGE2_TEXTURE_PROB
    reference_dropped = bool(u_ref < REFERENCE_DROP_PROB)
    batch = dict(inputs)
    if not texture_present:
        batch["texture"] = noisy_background(inputs["background"], inputs["mask"], rng)
    if reference_dropped:
        batch["reference"] = np.zeros_like(np.asarray(inputs["reference"], dtype=np.float64))
    return batch, BatchFlags(stage, bool(texture_present), reference_dropped)


def branch_flags(stage: int, rng: np.random.Generator) -> BatchFlags:
    """The branch decisions alone, drawn exactly as ``assemble_batch`` draws them."""
    if stage not in (1, 2):
        raise InvalidArgument("stage must be 1 or 2")
    u_tex, u_ref = rng.random(2)
    return BatchFlags(stage, bool(stage == 2 and u_tex < STAGE2_TEXTURE_PROB),
                      bool(u_ref < REFERENCE_DROP_PROB))


def write_batch(batch: dict, flags: BatchFlags, out_dir) -> Path:
    """Per-channel PNGs (masks 0/255) and a manifest.json naming them."""
    from .io import save_mask_png, save_png

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for k in BATCH_CHANNELS:
        v = np.asarray(batch[k], dtype=np.float64)
        name = f"{k}.png"
        (save_mask_png if v.ndim == 2 else save_png)(out / name, v)
        files[k] = name
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"files": files, "flags": asdict(flags)}, indent=2, sort_keys=True))
    return manifest


# ----------------------------------------------------------------------------
# long-video windows
# ----------------------------------------------------------------------------


def window_plan(T_total: int, window: int = DEFAULT_WINDOW, overlap: int = 7) -> list:
    """Inclusive ``(start, end)`` frame ranges covering ``0..T_total-1``.

    Windows advance by ``window - overlap``; the last one is pulled back to end on
    the final frame, so it may overlap its predecessor by more than ``overlap``.
    """
    if T_total < 1 or window < 1:
        raise InvalidArgument("need positive frame count and window")
    if T_total <= window:
        return [(0, T_total - 1)]
    if not 0 < overlap < window:
        raise InvalidArgument("overlap must satisfy 0 < overlap < window")
    stride = window - overlap
    plan = []
    start = 0
    while True:
        if start + window >= T_total:
            plan.append((T_total - window, T_total - 1))
            break
        plan.append((start, start + window - 1))
        start += stride
    return plan


def blend_weights(n: int) -> np.ndarray:
    """Previous-window weights over an ``n``-frame overlap: linear from 1 to 0."""
    if n < 1:
        raise InvalidArgument("overlap must contain at least one frame")
    if n == 1:
        return np.array([0.5])
    return 1.0 - np.arange(n) / (n - 1)


def alpha_merge(prev_frames, next_frames) -> list:
    """Blend the overlapping tail of one window with the head of the next."""
    if len(prev_frames) != len(next_frames):
        raise InvalidArgument("overlap segments must have equal length")
    w = blend_weights(len(prev_frames))
    return [wk * np.asarray(a, dtype=np.float64) + (1.0 - wk) * np.asarray(b, dtype=np.float64)
            for wk, a, b in zip(w, prev_frames, next_frames)]


def merge_windows(plan: list, outputs: list, T_total: int) -> list:
    """Stitch per-window outputs into one frame list using ``alpha_merge`` on overlaps."""
    if len(plan) != len(outputs):
        raise InvalidArgument("one output list per window required")
    frames: list = [None] * T_total
    prev_end = -1
    for (s, e), out in zip(plan, outputs):
        if len(out) != e - s + 1:
            raise InvalidArgument("window output length does not match its range")
        ov = max(0, prev_end - s + 1)
        if ov:
            merged = alpha_merge(frames[s:s + ov], out[:ov])
            frames[s:s + ov] = merged
        frames[s + ov:e + 1] = [np.asarray(f, dtype=np.float64) for f in out[ov:]]
        prev_end = e
    return frames
