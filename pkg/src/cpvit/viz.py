"""Grayscale renderings of attention maps and segment assignments."""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["attention_image", "segment_image"]


def attention_image(probs: np.ndarray, scale: int = 8) -> Image.Image:
    """Render an (L, L) attention matrix as a grayscale image.

    Intensity is linear in probability, normalized by the per-image maximum
    (brighter = stronger interdependency). Pixels are ``scale`` x ``scale``
    blocks, row-major, so the image is (L*scale) x (L*scale).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D attention matrix, got shape {p.shape}")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    peak = p.max()
    levels = np.zeros_like(p) if peak <= 0 else p / peak
    pixels = np.round(levels * 255.0).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    return Image.fromarray(pixels, mode="L")


def segment_image(
    segments: list[list[int]], seq_len: int, scale: int = 8
) -> Image.Image:
    """Render segment membership as a 1 x L luminance strip.

    Patches in higher segments (larger average attention) are brighter;
    segment s of S maps to intensity round(255 * (s+1) / S).
    """
    strip = np.zeros(seq_len, dtype=np.uint8)
    n = len(segments)
    for s, members in enumerate(segments):
        for p in members:
            strip[p] = int(round(255.0 * (s + 1) / n))
    pixels = np.kron(strip[None, :], np.ones((scale, scale), dtype=np.uint8))
    return Image.fromarray(pixels, mode="L")
