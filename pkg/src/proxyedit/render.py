"""Differentiable splatting of a GaussianSet into RGB, alpha and expected depth.

Gaussians are sorted by camera depth and composited front to back per pixel.
Each splat is evaluated over a square pixel window of three standard
deviations. The compositing kernels carry a feature vector per Gaussian:
``(r, g, b, 1, z)``, which yields color, accumulated alpha and the
opacity-weighted depth sum in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraPose, GaussianSet, normalize_grad, normalize_quaternions, \
    quat_to_rotmat, rotmat_grad_to_quat

FAR_DEPTH = 1e4
NEAR_PLANE = 0.05
LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_EPS = 1e-4
CUTOFF_SIGMA = 3.0


@dataclass(frozen=True)
class RenderTarget:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


@dataclass(frozen=True)
class GaussianGradients:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


@numba.njit(cache=True)
def _bbox(u, v, r, W, H):
    x0 = max(0, int(np.floor(u - r)))
    x1 = min(W - 1, int(np.ceil(u + r)))
    y0 = max(0, int(np.floor(v - r)))
    y1 = min(H - 1, int(np.ceil(v + r)))
    return x0, x1, y0, y1


@numba.njit(cache=True)
def _composite_forward(order, means, conics, opac, feats, radii, bg, H, W):
    F = feats.shape[1]
    out = np.zeros((H, W, F))
    T = np.ones((H, W))
    for idx in range(order.shape[0]):
        k = order[idx]
        u = means[k, 0]
        v = means[k, 1]
        a = conics[k, 0]
        b = conics[k, 1]
        c = conics[k, 2]
        x0, x1, y0, y1 = _bbox(u, v, radii[k], W, H)
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0:
                    continue
                al = min(ALPHA_MAX, opac[k] * np.exp(power))
                t = T[py, px]
                for f in range(F):
                    out[py, px, f] += feats[k, f] * al * t
                T[py, px] = t * (1.0 - al)
    for py in range(H):
        for px in range(W):
            for f in range(F):
                out[py, px, f] += T[py, px] * bg[f]
    return out, T


@numba.njit(cache=True)
def _composite_backward(order, means, conics, opac, feats, radii, bg, T_final, grad_out, H, W):
    K = feats.shape[0]
    F = feats.shape[1]
    g_mean = np.zeros((K, 2))
    g_conic = np.zeros((K, 3))
    g_opac = np.zeros(K)
    g_feat = np.zeros((K, F))
    T = T_final.copy()
    S = np.empty((H, W, F))
    for py in range(H):
        for px in range(W):
            for f in range(F):
                S[py, px, f] = bg[f]
    for idx in range(order.shape[0] - 1, -1, -1):
        k = order[idx]
        u = means[k, 0]
        v = means[k, 1]
        a = conics[k, 0]
        b = conics[k, 1]
        c = conics[k, 2]
        x0, x1, y0, y1 = _bbox(u, v, radii[k], W, H)
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0:
                    continue
                gauss = np.exp(power)
                raw = opac[k] * gauss
                al = min(ALPHA_MAX, raw)
                Ti = T[py, px] / (1.0 - al)
                d_al = 0.0
                for f in range(F):
                    g = grad_out[py, px, f]
                    g_feat[k, f] += Ti * al * g
                    d_al += Ti * (feats[k, f] - S[py, px, f]) * g
                    S[py, px, f] = al * feats[k, f] + (1.0 - al) * S[py, px, f]
                T[py, px] = Ti
                if raw < ALPHA_MAX:
                    g_opac[k] += d_al * gauss
                    d_pow = d_al * raw
                    g_mean[k, 0] += d_pow * (a * dx + b * dy)
                    g_mean[k, 1] += d_pow * (b * dx + c * dy)
                    g_conic[k, 0] += -0.5 * d_pow * dx * dx
                    g_conic[k, 1] += -d_pow * dx * dy
                    g_conic[k, 2] += -0.5 * d_pow * dy * dy
    return g_mean, g_conic, g_opac, g_feat


@dataclass
class _Projected:
    qhat: np.ndarray
    R: np.ndarray
    cam_points: np.ndarray
    J: np.ndarray          # (K, 2, 3)
    M: np.ndarray          # camera-space 3D covariance
    means: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    order: np.ndarray


def _project(G: GaussianSet, cam: CameraPose) -> _Projected:
    K = len(G)
    qhat = normalize_quaternions(G.rotations)
    R = quat_to_rotmat(qhat)
    Rs = R * G.scales[:, None, :]
    cov = Rs @ np.swapaxes(Rs, 1, 2)
    Rw = cam.rotation
    pc = cam.world_to_camera(G.positions)
    tz = pc[:, 2]
    valid = tz > NEAR_PLANE
    tzs = np.where(valid, tz, 1.0)
    f = cam.focal
    cx, cy = cam.principal_point
    J = np.zeros((K, 2, 3))
    J[:, 0, 0] = f / tzs
    J[:, 0, 2] = -f * pc[:, 0] / tzs**2
    J[:, 1, 1] = f / tzs
    J[:, 1, 2] = -f * pc[:, 1] / tzs**2
    M = Rw @ cov @ Rw.T
    cov2 = J @ M @ np.swapaxes(J, 1, 2)
    cov2[:, 0, 0] += LOW_PASS
    cov2[:, 1, 1] += LOW_PASS
    A, B, C = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = A * C - B * B
    conics = np.stack([C / det, -B / det, A / det], axis=1)
    mid = 0.5 * (A + C)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = CUTOFF_SIGMA * np.sqrt(lam)
    means = np.stack([f * pc[:, 0] / tzs + cx, f * pc[:, 1] / tzs + cy], axis=1)
    idx = np.nonzero(valid)[0]
    order = idx[np.argsort(tz[idx], kind="stable")].astype(np.int64)
    return _Projected(qhat, R, pc, J, M, means, conics, radii, order)


def _features(G: GaussianSet, proj: _Projected) -> np.ndarray:
    return np.concatenate([G.colors, np.ones((len(G), 1)), proj.cam_points[:, 2:3]], axis=1)


@dataclass
class RenderContext:
    """Forward intermediates reused by the backward pass."""

    proj: _Projected
    feats: np.ndarray
    bg: np.ndarray
    out: np.ndarray
    T_final: np.ndarray


def render_with_context(G: GaussianSet, cam: CameraPose, background=(1.0, 1.0, 1.0)):
    bg3 = np.asarray(background, dtype=np.float64).reshape(3)
    bg = np.concatenate([bg3, [0.0, 0.0]])
    H, W = cam.height, cam.width
    if len(G) == 0:
        rgb = np.broadcast_to(bg3, (H, W, 3)).copy()
        target = RenderTarget(rgb, np.zeros((H, W)), np.full((H, W), FAR_DEPTH))
        return target, None
    proj = _project(G, cam)
    feats = _features(G, proj)
    out, T = _composite_forward(proj.order, proj.means, proj.conics, G.opacities, feats,
                                proj.radii, bg, H, W)
    alpha = out[..., 3]
    covered = alpha >= ALPHA_EPS
    depth = np.where(covered, out[..., 4] / np.where(covered, alpha, 1.0), FAR_DEPTH)
    target = RenderTarget(np.clip(out[..., :3], 0.0, 1.0), np.clip(alpha, 0.0, 1.0), depth)
    return target, RenderContext(proj, feats, bg, out, T)


def render_gaussians(G: GaussianSet, cam: CameraPose, background=(1.0, 1.0, 1.0)) -> RenderTarget:
    return render_with_context(G, cam, background)[0]


def render_gaussians_backward(G: GaussianSet, cam: CameraPose, background=(1.0, 1.0, 1.0),
                              grad_rgb=None, grad_alpha=None, grad_depth=None,
                              context: RenderContext | None = None) -> GaussianGradients:
    """Gradients of ``sum(grad_rgb*rgb) + sum(grad_alpha*alpha) + sum(grad_depth*depth)``.

    The rgb/alpha channels are differentiated before clipping (compositing keeps
    them inside [0, 1] already). Depth gradients act only on covered pixels.
    """
    K = len(G)
    H, W = cam.height, cam.width
    if context is None:
        _, context = render_with_context(G, cam, background)
    if K == 0 or context is None:
        z = np.zeros
        return GaussianGradients(z((K, 3)), z((K, 4)), z((K, 3)), z(K), z((K, 3)))
    grad_out = np.zeros((H, W, 5))
    if grad_rgb is not None:
        grad_out[..., :3] = grad_rgb
    if grad_alpha is not None:
        grad_out[..., 3] = grad_alpha
    if grad_depth is not None:
        alpha = context.out[..., 3]
        covered = alpha >= ALPHA_EPS
        safe = np.where(covered, alpha, 1.0)
        gd = np.where(covered, grad_depth, 0.0)
        grad_out[..., 4] = gd / safe
        grad_out[..., 3] -= gd * context.out[..., 4] / safe**2
    proj = context.proj
    g_mean, g_conic, g_opac, g_feat = _composite_backward(
        proj.order, proj.means, proj.conics, G.opacities, context.feats, proj.radii,
        context.bg, context.T_final, grad_out, H, W)
    return _chain_to_gaussians(G, cam, proj, g_mean, g_conic, g_opac, g_feat)


def _chain_to_gaussians(G, cam, proj, g_mean, g_conic, g_opac, g_feat) -> GaussianGradients:
    f = cam.focal
    pc = proj.cam_points
    valid = np.zeros(len(G), dtype=bool)
    valid[proj.order] = True
    tx, ty = pc[:, 0], pc[:, 1]
    tz = np.where(valid, pc[:, 2], 1.0)

    # conic -> 2D covariance
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    conic = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gm = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    d_cov2 = -conic @ Gm @ conic

    J, M = proj.J, proj.M
    Jt = np.swapaxes(J, 1, 2)
    d_M = Jt @ d_cov2 @ J
    d_J = 2.0 * d_cov2 @ J @ M

    Rw = cam.rotation
    d_cov = Rw.T @ d_M @ Rw
    R = proj.R
    s = G.scales
    d_R = 2.0 * d_cov @ R * (s**2)[:, None, :]
    d_s = 2.0 * s * np.einsum("kji,kjl,kli->ki", R, d_cov, R)
    d_qhat = rotmat_grad_to_quat(proj.qhat, d_R)
    d_q = normalize_grad(G.rotations, d_qhat)

    d_tx = -f / tz**2 * d_J[:, 0, 2] + f / tz * g_mean[:, 0]
    d_ty = -f / tz**2 * d_J[:, 1, 2] + f / tz * g_mean[:, 1]
    d_tz = (-f / tz**2 * (d_J[:, 0, 0] + d_J[:, 1, 1])
            + 2 * f * tx / tz**3 * d_J[:, 0, 2] + 2 * f * ty / tz**3 * d_J[:, 1, 2]
            - f * tx / tz**2 * g_mean[:, 0] - f * ty / tz**2 * g_mean[:, 1]
            + g_feat[:, 4])
    d_pc = np.stack([d_tx, d_ty, d_tz], axis=1)
    d_pos = d_pc @ Rw

    mask = valid[:, None]
    return GaussianGradients(
        positions=np.where(mask, d_pos, 0.0),
        rotations=np.where(mask, d_q, 0.0),
        scales=np.where(mask, d_s, 0.0),
        opacities=np.where(valid, g_opac, 0.0),
        colors=np.where(mask, g_feat[:, :3], 0.0),
    )
