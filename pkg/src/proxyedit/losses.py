"""Image losses with analytic gradients w.r.t. the prediction."""

from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np

from .geometry import InvalidArgument

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


@lru_cache(maxsize=32)
def _window_matrix(n: int, win: int) -> np.ndarray:
    x = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-x**2 / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    M = np.zeros((n - win + 1, n))
    for i in range(n - win + 1):
        M[i, i:i + win] = g
    return M


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def _filters(shape):
    H, W = shape[:2]
    win = min(SSIM_WINDOW, H, W)
    if win % 2 == 0:
        win -= 1
    return _window_matrix(H, win), _window_matrix(W, win)


def _ssim_terms(a, b):
    Mv, Mh = _filters(a.shape)

    def filt(x):
        return np.einsum("ih,hwc,jw->ijc", Mv, x, Mh, optimize=True)

    mu_a, mu_b = filt(a), filt(b)
    e_aa, e_bb, e_ab = filt(a * a), filt(b * b), filt(a * b)
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    return S, (Mv, Mh, mu_a, mu_b, A1, A2, B1, B2)


def ssim(a, b) -> float:
    """Mean SSIM over fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _check_pair(a, b)
    S, _ = _ssim_terms(_as_hwc(a), _as_hwc(b))
    return float(S.mean())


def ssim_with_grad(a, b):
    """Returns ``(ssim(a, b), d ssim / d a)``."""
    a, b = _check_pair(a, b)
    a3, b3 = _as_hwc(a), _as_hwc(b)
    S, (Mv, Mh, mu_a, mu_b, A1, A2, B1, B2) = _ssim_terms(a3, b3)
    n = S.size
    den = B1 * B2
    d_mu_a = (2 * mu_b * A2 - 2 * mu_b * A1) / den - S * (2 * mu_a / B1 - 2 * mu_a / B2)
    d_eab = 2 * A1 / den
    d_eaa = -S / B2

    def filt_t(y):
        return np.einsum("ih,ijc,jw->hwc", Mv, y, Mh, optimize=True)

    grad = (filt_t(d_mu_a) + 2 * a3 * filt_t(d_eaa) + b3 * filt_t(d_eab)) / n
    return float(S.mean()), grad.reshape(a.shape)


def loss_photometric(pred, gt, lambda_ssim: float = 0.2) -> float:
    """``(1 - lambda) * mean L1 + lambda * (1 - SSIM)``."""
    return loss_photometric_with_grad(pred, gt, lambda_ssim)[0]


def loss_photometric_with_grad(pred, gt, lambda_ssim: float = 0.2):
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim == 0:
        return l1, grad
    s, ds = ssim_with_grad(pred, gt)
    return (1 - lambda_ssim) * l1 + lambda_ssim * (1 - s), grad - lambda_ssim * ds


def loss_mask(pred_alpha, gt_mask) -> float:
    pred, gt = _check_pair(pred_alpha, gt_mask)
    return float(np.abs(pred - gt).mean())


def loss_mask_with_grad(pred_alpha, gt_mask):
    pred, gt = _check_pair(pred_alpha, gt_mask)
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_depth(pred_disparity, gt_disparity, gt_mask) -> float:
    """Masked L1 between disparities, each min-max normalized over the mask."""
    return loss_depth_with_grad(pred_disparity, gt_disparity, gt_mask)[0]


def _minmax(x):
    lo, hi = x.min(), x.max()
    rng = hi - lo
    if rng <= 0:
        return np.zeros_like(x), int(np.argmin(x)), int(np.argmax(x)), 0.0
    return (x - lo) / rng, int(np.argmin(x)), int(np.argmax(x)), rng


def loss_depth_with_grad(pred_disparity, gt_disparity, gt_mask):
    pred, gt = _check_pair(pred_disparity, gt_disparity)
    mask = np.asarray(gt_mask) > 0.5
    if mask.shape != pred.shape:
        raise InvalidArgument("mask shape does not match disparity shape")
    grad = np.zeros_like(pred)
    if not mask.any():
        warnings.warn("depth loss: empty foreground mask, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0, grad
    p = pred[mask]
    g = gt[mask]
    rp, i_min, i_max, span = _minmax(p)
    rg = _minmax(g)[0]
    diff = rp - rg
    n = len(p)
    loss = float(np.abs(diff).sum() / n)
    if span > 0:
        d_r = np.sign(diff) / n
        d_p = d_r / span
        d_p[i_min] += np.sum(d_r * (rp - 1.0)) / span
        d_p[i_max] += np.sum(d_r * (-rp)) / span
        grad[mask] = d_p
    return loss, grad
