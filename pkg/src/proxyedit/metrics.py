"""Reconstruction and editing metrics with a pluggable embedding provider."""

from __future__ import annotations

import hashlib
import json
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import InvalidArgument

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical inputs give 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def chamfer(A, B) -> float:
    """Symmetric chamfer distance: average of the two mean nearest-neighbor distances."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise InvalidArgument("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ----------------------------------------------------------------------------
# embeddings
# ----------------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    """Maps images (H x W x 3 in [0, 1]) and prompts to unit-norm vectors."""

    def embed_image(self, image) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def histogram_embedding(image, bins: int = 8) -> np.ndarray:
    """L2-normalized ``bins^3`` joint RGB histogram."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] < 3:
        raise InvalidArgument("expected an H x W x 3 image")
    q = np.clip((img[..., :3] * bins).astype(int), 0, bins - 1).reshape(-1, 3)
    flat = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    hist = np.bincount(flat, minlength=bins**3).astype(np.float64)
    return hist / np.linalg.norm(hist)


class HistogramEmbedding:
    """Deterministic stand-in for learned image/text encoders."""

    def __init__(self, bins: int = 8):
        self.bins = bins

    @property
    def dim(self) -> int:
        return self.bins**3

    def embed_image(self, image) -> np.ndarray:
        return histogram_embedding(image, self.bins)

    def embed_text(self, text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        v = np.abs(np.random.default_rng(seed).normal(size=self.dim))
        return v / np.linalg.norm(v)


def _cos(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _embed_all(frames, provider) -> list:
    # frames may already be embedding vectors
    out = []
    for f in frames:
        f = np.asarray(f, dtype=np.float64)
        out.append(f if f.ndim == 1 else provider.embed_image(f))
    return out


def fram_acc(frames: Sequence, src_prompt, tgt_prompt, provider: EmbeddingProvider | None = None) -> float:
    """Fraction of frames strictly closer (cosine) to the target prompt than to the source."""
    if len(frames) < 1:
        raise InvalidArgument("need at least one frame")
    provider = provider or HistogramEmbedding()
    emb = _embed_all(frames, provider)
    hits = [_cos(e, tgt_prompt) > _cos(e, src_prompt) for e in emb]
    return float(np.mean(hits))


def tem_con(frames: Sequence, provider: EmbeddingProvider | None = None) -> float:
    """Mean cosine similarity between consecutive frame embeddings."""
    if len(frames) < 2:
        raise InvalidArgument("temporal consistency needs at least two frames")
    provider = provider or HistogramEmbedding()
    emb = _embed_all(frames, provider)
    return float(np.mean([_cos(a, b) for a, b in zip(emb[:-1], emb[1:])]))


def appearance_similarity(inputs: Sequence, outputs: Sequence,
                          provider: EmbeddingProvider | None = None) -> float:
    """Mean per-frame cosine similarity between input and edited frames."""
    if len(inputs) != len(outputs) or len(inputs) == 0:
        raise InvalidArgument("input and output sequences must be non-empty and equally long")
    provider = provider or HistogramEmbedding()
    a, b = _embed_all(inputs, provider), _embed_all(outputs, provider)
    return float(np.mean([_cos(x, y) for x, y in zip(a, b)]))


def clap_score(fram_acc_value: float, appearance_value: float) -> float:
    for v in (fram_acc_value, appearance_value):
        if not 0.0 <= v <= 1.0:
            raise InvalidArgument("CLAP inputs must lie in [0, 1]")
    return fram_acc_value * appearance_value


def metric_report(metric: str, value: float, config: dict) -> dict:
    digest = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    return {"metric": metric, "value": float(value), "config_hash": digest[:16]}
