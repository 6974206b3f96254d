"""Dynamic-object reconstruction: canonical Gaussians plus deformation fields.

Training runs in three phases:

1. warm-up: canonical Gaussians only, fitted to the first frame;
2. joint: Gaussians and the forward field on views drawn by the balanced
   sampler, with the backward field fitted by a cycle objective;
3. mesh: adds silhouette and scale-invariant depth losses on the splat
   alpha/depth channels, and a color-consistency loss on visible vertices of
   the extracted mesh that trains the color network and the backward field.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .deformation import ColorField, DeformationField, SCALE_FLOOR, _backward, _forward, deform_forward
from .geometry import GaussianSet, InvalidArgument, init_sphere_gaussians, normalize_grad, \
    normalize_quaternions
from .losses import loss_depth_with_grad, loss_mask_with_grad, loss_photometric_with_grad
from .mesh import extract_mesh, rasterize_mesh
from .render import FAR_DEPTH, render_gaussians_backward, render_with_context
from .scenes import FrameBundle

log = logging.getLogger(__name__)

WARMUP_FRACTION = 3 / 25
MESH_START_FRACTION = 12 / 25


@dataclass
class ReconConfig:
    iterations: int = 3000
    warmup_iterations: Optional[int] = None
    mesh_start_iteration: Optional[int] = None
    lambda_ssim: float = 0.2
    novel_view_weight: float = 0.2
    num_gaussians: int = 2000
    init_radius: float = 1.0
    grid_resolution: int = 96
    train_grid_resolution: int = 48
    mesh_refresh: int = 25
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-5
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    lr_deform: float = 8e-4
    lr_backward: float = 8e-4
    lr_color_field: float = 8e-4
    lr_field_final_ratio: float = 0.1
    spatial_lr_scale: Optional[float] = None
    deform_depth: int = 8
    deform_width: int = 128
    deform_skip: int = 4
    color_depth: int = 4
    color_width: int = 128
    pos_freqs: int = 10
    time_freqs: int = 6
    cycle_batch: int = 512
    cycle_jitter: float = 0.02
    background: tuple = (1.0, 1.0, 1.0)
    random_background: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidArgument("iterations must be non-negative")
        if self.warmup_iterations is None:
            self.warmup_iterations = max(1, round(WARMUP_FRACTION * self.iterations))
        if self.mesh_start_iteration is None:
            self.mesh_start_iteration = max(self.warmup_iterations + 1,
                                            round(MESH_START_FRACTION * self.iterations))
        if self.iterations > 0 and not (0 < self.warmup_iterations < self.mesh_start_iteration
                                        < self.iterations):
            raise InvalidArgument("schedule must satisfy 0 < warmup < mesh start < iterations")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise InvalidArgument("lambda_ssim must lie in [0, 1]")
        self.background = tuple(float(x) for x in self.background)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown ReconConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ReconConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# balanced view sampling
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewSampler:
    """Per-frame observed probabilities ``beta`` and novel-view probabilities ``zeta``."""

    beta: np.ndarray
    zeta: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.beta)

    @property
    def n_novel(self) -> int:
        return self.zeta.shape[1]

    def flat_probabilities(self) -> np.ndarray:
        """Probabilities ordered as (frame 0 observed, frame 0 novel 1..N, frame 1 ...)."""
        return np.concatenate([self.beta[:, None], self.zeta], axis=1).ravel()

    def sample(self, rng: np.random.Generator, size: Optional[int] = None, frames=None):
        """Draw ``(frame, view)`` pairs; view 0 is the observed view.

        ``frames`` restricts the draw to a subset of frames (renormalized).
        """
        p = np.concatenate([self.beta[:, None], self.zeta], axis=1)
        if frames is not None:
            keep = np.zeros(self.n_frames, dtype=bool)
            keep[list(frames)] = True
            p = np.where(keep[:, None], p, 0.0)
        cdf = np.cumsum(p.ravel())
        cdf /= cdf[-1]
        u = rng.random(1 if size is None else size)
        flat = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        frame, view = np.divmod(flat, self.n_novel + 1)
        if size is None:
            return int(frame[0]), int(view[0])
        return frame, view


def make_balanced_sampler(T: int, N: int) -> ViewSampler:
    """Half the mass on observed views, half spread over each frame's novel views,
    so every frame's novel views together weigh as much as its observed view."""
    if T < 1 or N < 0:
        raise InvalidArgument("need T >= 1 and N >= 0")
    if N == 0:
        return ViewSampler(np.full(T, 1.0 / T), np.zeros((T, 0)))
    zeta = np.full((T, N), 1.0 / (2 * T * N))
    beta = np.array([math.fsum(row) for row in zeta])
    return ViewSampler(beta, zeta)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgument("params, grads and state must have the same length")
    step = state.step + 1
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    new_p, new_m, new_v = [], [], []
    for p, g, m, v, a in zip(params, grads, state.m, state.v, lrs):
        if p.shape != g.shape or p.shape != m.shape:
            raise InvalidArgument("parameter and gradient shapes differ")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        new_p.append((p - a * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_p, AdamState(new_m, new_v, step)


class _Adam:
    """In-place parameter group driven by ``adam_step``."""

    def __init__(self, params: list):
        self.params = params
        self.state = AdamState.zeros_like(params)

    def step(self, grads, lr):
        new, self.state = adam_step(self.params, grads, self.state, lr)
        for p, n in zip(self.params, new):
            p[...] = n


# ----------------------------------------------------------------------------
# results
# ----------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the offending iteration's snapshot."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class ReconResult:
    gaussians: GaussianSet
    theta: DeformationField
    theta_inv: DeformationField
    color_field: ColorField
    config: ReconConfig
    times: np.ndarray
    log: list = field(default_factory=list)

    def deformed(self, t: float) -> GaussianSet:
        return deform_forward(self.theta, self.gaussians, t)

    def mesh_at(self, t: float, resolution: Optional[int] = None):
        return extract_mesh(self.deformed(t), resolution or self.config.grid_resolution)

    def canonical_mesh(self, resolution: Optional[int] = None):
        return extract_mesh(self.gaussians, resolution or self.config.grid_resolution)

    def write_log_csv(self, path) -> None:
        write_log_csv(path, self.log)


LOG_COLUMNS = ("iteration", "phase", "frame", "view", "l_gs", "l_mask", "l_depth", "l_rgb",
               "l_cycle", "total")


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


class _GaussianParams:
    """Unconstrained Gaussian parameters (log scales, opacity/color logits)."""

    def __init__(self, G: GaussianSet):
        self.pos = np.array(G.positions)
        self.rot = np.array(G.rotations)
        self.log_scale = np.log(G.scales)
        self.opacity_logit = _logit(G.opacities)
        self.color_logit = _logit(G.colors)

    def arrays(self):
        return [self.pos, self.rot, self.log_scale, self.opacity_logit, self.color_logit]

    def gaussians(self) -> GaussianSet:
        return GaussianSet(self.pos, normalize_quaternions(self.rot), np.exp(self.log_scale),
                           _sigmoid(self.opacity_logit), _sigmoid(self.color_logit))


def _encoding_grad(x: np.ndarray, L: int, g_enc: np.ndarray) -> np.ndarray:
    """Back-propagate through ``positional_encode`` (component-major layout)."""
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = x[:, :, None] * freqs
    g = g_enc.reshape(len(x), x.shape[1], L, 2)
    return np.sum(g[..., 0] * np.cos(ang) * freqs - g[..., 1] * np.sin(ang) * freqs, axis=-1)


def _exp_decay(lr0, lr1, frac):
    return float(np.exp((1 - frac) * np.log(lr0) + frac * np.log(lr1)))


def _frame_time(bundle: FrameBundle, i: int) -> float:
    return float(bundle.times[i])


def _color_samples(mesh, view):
    """Visible mesh vertices in ``view`` and the ground-truth colors under them."""
    cam = view.camera
    r = rasterize_mesh(mesh, cam)
    uv, z = cam.project(mesh.vertices)
    px = np.rint(uv).astype(int)
    H, W = view.mask.shape
    inside = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H) & (z > 0)
    idx = np.nonzero(inside)[0]
    cols, rows = px[idx, 0], px[idx, 1]
    tol = 2.0 * (mesh.meta.get("voxel_size", 0.02))
    visible = (z[idx] <= r.depth[rows, cols] + tol) & (view.mask[rows, cols] > 0.5)
    idx = idx[visible]
    return idx, view.image[rows[visible], cols[visible]]


def train_reconstruction(bundle: FrameBundle, cfg: Optional[ReconConfig] = None,
                         callback=None) -> ReconResult:
    cfg = cfg or ReconConfig()
    T, N = bundle.n_frames, bundle.n_novel
    rng = np.random.default_rng(cfg.seed)
    G0 = init_sphere_gaussians(cfg.num_gaussians, cfg.init_radius, cfg.seed)
    theta = DeformationField.create(cfg.deform_depth, cfg.deform_width, cfg.deform_skip,
                                    cfg.pos_freqs, cfg.time_freqs, seed=cfg.seed + 1)
    theta_inv = DeformationField.create(cfg.deform_depth, cfg.deform_width, cfg.deform_skip,
                                        cfg.pos_freqs, cfg.time_freqs, seed=cfg.seed + 2)
    color_field = ColorField.create(cfg.color_depth, cfg.color_width, cfg.pos_freqs, seed=cfg.seed + 3)
    result = ReconResult(G0, theta, theta_inv, color_field, cfg, np.asarray(bundle.times))
    if cfg.iterations == 0:
        return result

    params = _GaussianParams(G0)
    opt_g = _Adam(params.arrays())
    opt_theta = _Adam(theta.mlp.parameters())
    opt_inv = _Adam(theta_inv.mlp.parameters())
    # the cycle objective keeps its own moments: color-path gradients on the same weights
    # pass through high-frequency encodings and would swamp its second-moment estimate
    opt_cycle = _Adam(theta_inv.mlp.parameters())
    opt_color = _Adam(color_field.mlp.parameters())
    sampler = make_balanced_sampler(T, N)
    extent = cfg.spatial_lr_scale
    if extent is None:
        # scene extent: camera distance from the object center, padded by 10%
        extent = 1.1 * max(float(np.linalg.norm(v.camera.center)) for v in bundle.views[0])
    bg = np.asarray(cfg.background)
    mesh_cache: dict = {}

    for it in range(cfg.iterations):
        phase = 1 if it < cfg.warmup_iterations else (2 if it < cfg.mesh_start_iteration else 3)
        frame, view_id = sampler.sample(rng, frames=[0] if phase == 1 else None)
        view = bundle.views[frame][view_id]
        weight = 1.0 if view_id == 0 else cfg.novel_view_weight
        t = _frame_time(bundle, frame)
        frac = it / max(1, cfg.iterations - 1)
        Gc = params.gaussians()

        # forward deformation (inputs detached from the canonical positions)
        if phase >= 2:
            cache = _forward(theta.mlp, theta.encode(Gc.positions, t))
            off = cache.out.astype(np.float64)
            pre_rot = Gc.rotations + off[:, 3:7]
            pre_scale = Gc.scales + off[:, 7:10]
            Gt = Gc.replace(positions=Gc.positions + off[:, :3],
                            rotations=normalize_quaternions(pre_rot),
                            scales=np.maximum(pre_scale, SCALE_FLOOR))
        else:
            Gt = Gc

        if cfg.random_background:
            # recomposite the masked ground truth so transparent and background-colored
            # Gaussians are distinguishable
            bg = rng.random(3)
            m = view.mask[..., None]
            gt_rgb = view.image * m + bg * (1.0 - m)
        else:
            gt_rgb = view.image
        target, ctx = render_with_context(Gt, view.camera, bg)
        l_gs, g_rgb = loss_photometric_with_grad(target.rgb, gt_rgb, cfg.lambda_ssim)
        g_rgb = g_rgb * weight
        g_alpha = g_depth = None
        l_mask = l_depth = l_rgb = l_cycle = 0.0
        if phase == 3:
            l_mask, g_alpha = loss_mask_with_grad(target.alpha, view.mask)
            g_alpha = g_alpha * weight
            covered = target.depth < FAR_DEPTH
            disp = np.where(covered, 1.0 / target.depth, 1.0 / FAR_DEPTH)
            l_depth, g_disp = loss_depth_with_grad(disp, view.disparity, view.mask)
            g_depth = np.where(covered, -g_disp / target.depth**2, 0.0) * weight

        grads = render_gaussians_backward(Gt, view.camera, bg, g_rgb, g_alpha, g_depth, context=ctx)

        # chain to canonical parameters
        d_pos = grads.positions
        if phase >= 2:
            d_pre_rot = normalize_grad(pre_rot, grads.rotations)
            live = pre_scale > SCALE_FLOOR
            d_scale = grads.scales * live
            d_off = np.concatenate([grads.positions, d_pre_rot, d_scale], axis=1)
            dW, db, _ = _backward(theta.mlp, cache, d_off)
            d_rot = normalize_grad(params.rot, d_pre_rot)
        else:
            d_rot = normalize_grad(params.rot, grads.rotations)
            d_scale = grads.scales
        s = np.exp(params.log_scale)
        op = _sigmoid(params.opacity_logit)
        col = _sigmoid(params.color_logit)
        g_params = [d_pos, d_rot, d_scale * s, grads.opacities * op * (1 - op), grads.colors * col * (1 - col)]
        lr_pos = extent * _exp_decay(cfg.lr_position, cfg.lr_position_final, frac)
        opt_g.step(g_params, [lr_pos, cfg.lr_rotation, cfg.lr_scale, cfg.lr_opacity, cfg.lr_color])
        if not all(np.all(np.isfinite(a)) for a in params.arrays()):
            raise TrainingDiverged(f"non-finite Gaussian parameters at iteration {it}",
                                   {"row": {"iteration": it, "phase": phase, "l_gs": l_gs},
                                    "gaussians": Gc, "log": list(result.log)})
        field_lr_scale = _exp_decay(1.0, cfg.lr_field_final_ratio, frac)
        if phase >= 2:
            opt_theta.step([g for pair in zip(dW, db) for g in pair], cfg.lr_deform * field_lr_scale)
            l_cycle = _cycle_step(theta, theta_inv, opt_cycle, Gc, t, cfg, rng,
                                  cfg.lr_backward * field_lr_scale)
        if phase == 3:
            mesh = _frame_mesh(mesh_cache, frame, it, Gt, cfg)
            l_rgb = _color_step(mesh, view, t, theta_inv, color_field, opt_inv, opt_color, weight,
                                cfg.lr_backward * field_lr_scale, cfg.lr_color_field * field_lr_scale)

        total = l_gs * weight + (l_mask + l_depth + l_rgb) * weight
        row = {"iteration": it, "phase": phase, "frame": frame, "view": view_id, "l_gs": l_gs,
               "l_mask": l_mask, "l_depth": l_depth, "l_rgb": l_rgb, "l_cycle": l_cycle,
               "total": total}
        if not all(math.isfinite(row[k]) for k in ("l_gs", "l_mask", "l_depth", "l_rgb", "l_cycle")):
            raise TrainingDiverged(f"non-finite loss at iteration {it}",
                                   {"row": row, "gaussians": Gc, "log": list(result.log)})
        result.log.append(row)
        if callback is not None:
            callback(it, row)
        if it % 250 == 0:
            log.info("iter %d phase %d l_gs %.4f l_mask %.4f l_depth %.4f l_rgb %.4f l_cycle %.5f",
                     it, phase, l_gs, l_mask, l_depth, l_rgb, l_cycle)

    result.gaussians = params.gaussians()
    return result


def _cycle_step(theta, theta_inv, opt_inv, Gc: GaussianSet, t, cfg, rng, lr) -> float:
    """Fit the backward field so that mapping deformed points back recovers them.

    Anchors are drawn in proportion to opacity, so near-transparent floaters do not
    use up the batch."""
    k = min(cfg.cycle_batch, len(Gc))
    p = Gc.opacities / Gc.opacities.sum() if Gc.opacities.sum() > 0 else None
    idx = rng.choice(len(Gc), size=k, replace=True, p=p)
    x = Gc.positions[idx] + rng.normal(0.0, cfg.cycle_jitter, size=(k, 3))
    y = x + theta(x, t)[:, :3]
    cache = _forward(theta_inv.mlp, theta_inv.encode(y, t))
    pred = y - cache.out[:, :3].astype(np.float64)
    r = pred - x
    loss = float(np.mean(np.sum(r * r, axis=1)))
    up = np.zeros((k, 10))
    up[:, :3] = -2.0 * r / k
    dW, db, _ = _backward(theta_inv.mlp, cache, up)
    opt_inv.step([g for pair in zip(dW, db) for g in pair], lr)
    return loss


def _frame_mesh(cache: dict, frame: int, it: int, Gt: GaussianSet, cfg: ReconConfig):
    hit = cache.get(frame)
    if hit is not None and it - hit[0] < cfg.mesh_refresh:
        return hit[1]
    mesh = extract_mesh(Gt, cfg.train_grid_resolution)
    cache[frame] = (it, mesh)
    return mesh


def _color_step(mesh, view, t, theta_inv, color_field, opt_inv, opt_color, weight, lr_inv, lr_color):
    """Color consistency between queried vertex colors and the pixels they project to."""
    if mesh.n_faces == 0:
        return 0.0
    idx, target = _color_samples(mesh, view)
    if len(idx) == 0:
        return 0.0
    p = mesh.vertices[idx]
    inv_cache = _forward(theta_inv.mlp, theta_inv.encode(p, t))
    canon = p - inv_cache.out[:, :3].astype(np.float64)
    enc = color_field.encode(canon)
    col_cache = _forward(color_field.mlp, enc)
    pred = col_cache.out.astype(np.float64)
    diff = pred - target
    n = diff.size
    loss = float(np.abs(diff).mean())
    up = np.sign(diff) / n * weight
    cW, cb, d_enc = _backward(color_field.mlp, col_cache, up)
    d_canon = _encoding_grad(canon, color_field.pos_freqs, d_enc.astype(np.float64))
    up_inv = np.zeros((len(p), 10))
    up_inv[:, :3] = -d_canon
    iW, ib, _ = _backward(theta_inv.mlp, inv_cache, up_inv)
    opt_color.step([g for pair in zip(cW, cb) for g in pair], lr_color)
    opt_inv.step([g for pair in zip(iW, ib) for g in pair], lr_inv)
    return loss


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------


def save_result(result: ReconResult, out_dir) -> dict:
    """Write checkpoints, canonical Gaussians, config and loss log; returns the file map."""
    from .deformation import ROLE_BACKWARD, ROLE_COLOR, ROLE_FORWARD, save_checkpoint
    from .io import save_gaussians_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "gaussians": "canonical_gaussians.ply",
        "theta": "theta.sfm",
        "theta_inv": "theta_inv.sfm",
        "color_field": "color_field.sfm",
        "config": "recon_config.json",
        "log": "train_log.csv",
        "times": "times.json",
    }
    save_gaussians_ply(out / files["gaussians"], result.gaussians)
    save_checkpoint(out / files["theta"], result.theta, ROLE_FORWARD)
    save_checkpoint(out / files["theta_inv"], result.theta_inv, ROLE_BACKWARD)
    save_checkpoint(out / files["color_field"], result.color_field, ROLE_COLOR)
    (out / files["config"]).write_text(result.config.to_json())
    (out / files["times"]).write_text(json.dumps([float(t) for t in result.times]))
    result.write_log_csv(out / files["log"])
    return files


def load_result(out_dir) -> ReconResult:
    from .deformation import load_checkpoint
    from .io import load_gaussians_ply

    out = Path(out_dir)
    cfg = ReconConfig.from_json(out / "recon_config.json")
    theta, _ = load_checkpoint(out / "theta.sfm")
    theta_inv, _ = load_checkpoint(out / "theta_inv.sfm")
    color_field, _ = load_checkpoint(out / "color_field.sfm")
    times = np.array(json.loads((out / "times.json").read_text()))
    return ReconResult(load_gaussians_ply(out / "canonical_gaussians.ply"), theta, theta_inv,
                       color_field, cfg, times)
