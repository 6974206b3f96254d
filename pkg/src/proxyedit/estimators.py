"""scikit-learn style wrappers around the pipeline stages.

The wrappers hold hyperparameters as constructor arguments (so ``get_params`` /
``set_params`` / ``clone`` work) and keep fitted state in trailing-underscore
attributes.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .controls import AugmentParams, TextureSimParams, augment_reference, simulate_texture
from .geometry import InvalidArgument
from .metrics import chamfer, psnr
from .propagation import EditSpec, GridConfig, prepare_edit, propagate_edit
from .recon import ReconConfig, train_reconstruction
from .render import render_gaussians
from .scenes import FrameBundle


def check_bundle(bundle) -> FrameBundle:
    if not isinstance(bundle, FrameBundle):
        raise InvalidArgument(f"expected a FrameBundle, got {type(bundle).__name__}")
    if bundle.n_frames < 1:
        raise InvalidArgument("bundle has no frames")
    return bundle


def check_times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if t.ndim != 1 or np.any(~np.isfinite(t)) or np.any((t < 0) | (t > 1)):
        raise InvalidArgument("times must be a 1-D array of values in [0, 1]")
    return t


def check_frames(frames) -> list:
    out = [np.asarray(f, dtype=np.float64) for f in frames]
    if any(f.ndim != 3 or f.shape[2] != 3 for f in out):
        raise InvalidArgument("frames must be H x W x 3 images")
    return out


class ProxyReconstructor(BaseEstimator):
    """Fit canonical Gaussians and deformation fields to a posed frame bundle."""

    def __init__(self, iterations=3000, num_gaussians=2000, novel_view_weight=0.2,
                 lambda_ssim=0.2, grid_resolution=96, seed=0):
        self.iterations = iterations
        self.num_gaussians = num_gaussians
        self.novel_view_weight = novel_view_weight
        self.lambda_ssim = lambda_ssim
        self.grid_resolution = grid_resolution
        self.seed = seed

    def _config(self) -> ReconConfig:
        known = {f.name for f in fields(ReconConfig)}
        return ReconConfig(**{k: v for k, v in self.get_params().items() if k in known})

    def fit(self, X, y=None):
        bundle = check_bundle(X)
        self.result_ = train_reconstruction(bundle, self._config())
        self.n_frames_ = bundle.n_frames
        return self

    def predict(self, X):
        """Proxy meshes at the given normalized times."""
        check_is_fitted(self, "result_")
        return [self.result_.mesh_at(t) for t in check_times(X)]

    def score(self, X, y=None):
        """Mean observed-view PSNR over the bundle's frames."""
        check_is_fitted(self, "result_")
        bundle = check_bundle(X)
        vals = []
        for i in range(bundle.n_frames):
            v = bundle.observed(i)
            vals.append(psnr(render_gaussians(self.result_.deformed(bundle.times[i]), v.camera).rgb,
                             v.image))
        return float(np.mean(vals))

    def chamfer_to_gt(self, bundle) -> list:
        """Per-frame chamfer distance to the bundle's ground-truth meshes (world units)."""
        check_is_fitted(self, "result_")
        bundle = check_bundle(bundle)
        if bundle.gt_meshes is None:
            raise InvalidArgument("bundle carries no ground-truth meshes")
        return [chamfer(self.result_.mesh_at(t).vertices, m.vertices)
                for t, m in zip(bundle.times, bundle.gt_meshes)]


class EditPropagator(BaseEstimator):
    """Apply one canonical edit and produce edited, colored meshes per frame."""

    def __init__(self, grid_resolution=96, padding=0.1):
        self.grid_resolution = grid_resolution
        self.padding = padding

    def fit(self, X, y=None):
        """``X`` is a fitted reconstruction result, ``y`` an optional ``EditSpec``."""
        if not all(hasattr(X, a) for a in ("gaussians", "theta", "theta_inv", "color_field")):
            raise InvalidArgument("expected a reconstruction result")
        spec = y if y is not None else EditSpec()
        grid = GridConfig(self.grid_resolution, self.padding)
        self.state_ = prepare_edit(X.gaussians, X.theta, X.theta_inv, X.color_field, spec, grid)
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        return propagate_edit(self.state_, check_times(X))


class TextureSimulator(TransformerMixin, BaseEstimator):
    """Coarsen frames into texture-control look-alikes (stateless)."""

    def __init__(self, n_segments=1000, median_kernel=5, scale=0.5, seed=0):
        self.n_segments = n_segments
        self.median_kernel = median_kernel
        self.scale = scale
        self.seed = seed

    def fit(self, X, y=None):
        self.params_ = TextureSimParams(self.n_segments, self.median_kernel, self.scale, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return [simulate_texture(f, self.params_) for f in check_frames(X)]


class ReferenceAugmenter(TransformerMixin, BaseEstimator):
    """Turn (frames, masks) into a gray-background reference clip with one shared warp."""

    def __init__(self, scale=1.0, shift=(0.0, 0.0), rotation=0.0, permute=False, seed=0):
        self.scale = scale
        self.shift = shift
        self.rotation = rotation
        self.permute = permute
        self.seed = seed

    def fit(self, X, y=None):
        self.params_ = AugmentParams(self.scale, tuple(self.shift), self.rotation, self.permute,
                                     self.seed)
        return self

    def transform(self, X, y=None):
        """``X`` frames, ``y`` masks; returns the reference frames."""
        check_is_fitted(self, "params_")
        if y is None:
            raise InvalidArgument("reference augmentation needs the object masks")
        frames, _, _ = augment_reference(check_frames(X), y, self.params_)
        return frames
