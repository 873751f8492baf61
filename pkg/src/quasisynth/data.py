"""Procedural 10-class shape dataset and single-image synthesis fixtures.

The shapes carry sharp, class-defining edges, which makes them a cheap stand-in for
natural images when studying how adversarial training changes input gradients.
"""
from __future__ import annotations

import numpy as np
import torch

SHAPES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "hstripes",
    "vstripes",
    "diamond",
    "ellipse",
    "cross",
)
NUM_CLASSES = len(SHAPES)


def shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Indicator of shape ``kind`` on offsets ``(u, v)`` from its centre, radius ``r``."""
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return u**2 + v**2 <= r**2
    if kind == "square":
        return np.maximum(au, av) <= 0.8 * r
    if kind == "triangle":
        return (v <= 0.8 * r) & (au <= 0.6 * (v + r))
    if kind == "ring":
        d = np.sqrt(u**2 + v**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "plus":
        return ((au <= 0.3 * r) & (av <= r)) | ((av <= 0.3 * r) & (au <= r))
    if kind in ("hstripes", "vstripes"):
        w = v if kind == "hstripes" else u
        box = np.maximum(au, av) <= 0.85 * r
        return box & (np.floor((w + r) / (0.34 * r)).astype(int) % 2 == 0)
    if kind == "diamond":
        return au + av <= r
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (0.45 * r)) ** 2 <= 1.0
    if kind == "cross":
        band = 0.25 * r
        return (np.maximum(au, av) <= 0.85 * r) & ((np.abs(u - v) <= band) | (np.abs(u + v) <= band))
    raise KeyError(f"unknown shape {kind!r}")


def _pick_colors(rng: np.random.Generator, min_contrast: float = 0.3):
    while True:
        fg, bg = rng.uniform(0.05, 0.95, size=3), rng.uniform(0.05, 0.95, size=3)
        if np.abs(fg - bg).mean() > min_contrast:
            return fg, bg


def render_shape(
    kind: str,
    size: int,
    center: tuple[float, float],
    radius: float,
    fg,
    bg,
    rng: np.random.Generator,
    noise: float = 0.03,
    supersample: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one shape; returns ``(image (3, H, W) in [0, 1], mask (H, W) in {0, 1})``."""
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = center
    fine = shape_mask(kind, xx - cx, yy - cy, radius).astype(np.float64)
    cover = fine.reshape(size, s, size, s).mean(axis=(1, 3))

    pix = np.arange(size) + 0.5
    py, px = np.meshgrid(pix, pix, indexing="ij")
    mask = shape_mask(kind, px - cx, py - cy, radius).astype(np.float32)

    # smooth illumination ramp so the background is not flat
    ramp = rng.uniform(-0.08, 0.08, size=2)
    shade = ramp[0] * (py / size - 0.5) + ramp[1] * (px / size - 0.5)
    fg = np.asarray(fg).reshape(3, 1, 1)
    bg = np.asarray(bg).reshape(3, 1, 1)
    img = cover * fg + (1.0 - cover) * bg + shade
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def make_shape_dataset(
    n: int,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.03,
    min_contrast: float = 0.3,
    radius_range: tuple[float, float] = (0.24, 0.38),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Balanced labelled dataset: ``(images (n, 3, size, size), labels (n,))``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, label in enumerate(labels):
        radius = rng.uniform(*radius_range) * size
        margin = radius * 0.9
        center = (rng.uniform(margin, size - margin), rng.uniform(margin, size - margin))
        fg, bg = _pick_colors(rng, min_contrast)
        images[i], _ = render_shape(SHAPES[label], size, center, radius, fg, bg, rng, noise=noise)
    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def make_fixture(
    size: int = 64,
    kind: str = "disk",
    seed: int = 0,
    center_frac: tuple[float, float] = (0.5, 0.3),
    radius_frac: float = 0.18,
) -> tuple[torch.Tensor, torch.Tensor]:
    """A single source image with its aligned binary object mask ``(1, H, W)``.

    The object sits left of centre so a mask shifted right by a quarter of the
    width still fits inside the frame.
    """
    rng = np.random.default_rng(seed)
    fg = np.array([0.85, 0.35, 0.15])
    bg = np.array([0.2, 0.45, 0.7])
    center = (center_frac[0] * size, center_frac[1] * size)
    img, mask = render_shape(kind, size, center, radius_frac * size, fg, bg, rng)
    return torch.from_numpy(img), torch.from_numpy(mask).unsqueeze(0)


def shift_mask(y: torch.Tensor, fraction: float = 0.25) -> torch.Tensor:
    """Translate a mask horizontally by ``fraction`` of its width, filling with zeros."""
    width = y.shape[-1]
    dx = int(round(fraction * width))
    out = torch.zeros_like(y)
    if dx >= 0:
        out[..., dx:] = y[..., : width - dx]
    else:
        out[..., :dx] = y[..., -dx:]
    return out
