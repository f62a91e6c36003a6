"""Class-token attention heatmaps.

Per-patch scores are the class token's post-softmax attention to each
image patch, averaged over every layer and head (no rollout or gradient
weighting).  Scores are min-max normalized per image, bilinearly
upsampled to the input resolution, and alpha-blended over the grayscale
fingerprint with a numerically fixed warm colormap, so overlays are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imgio import FloatImage, GrayImage, resize_bilinear, round_half_up
from .train_eval import EnsembleModel
from .vit import AttentionRecord, forward

__all__ = [
    "Heatmap",
    "class_token_attention",
    "make_heatmap",
    "ensemble_heatmap",
    "render_overlay",
    "write_heatmap",
]

# warm gradient stops (position, RGB); linear interpolation between stops
WARM_COLORMAP: tuple[tuple[float, tuple[int, int, int]], ...] = (
    (0.00, (0, 0, 0)),
    (0.25, (120, 20, 60)),
    (0.50, (220, 50, 30)),
    (0.75, (255, 140, 0)),
    (1.00, (255, 255, 100)),
)

_ALPHA_GAIN = 0.4  # blend alpha is 0.4 * heatmap value


@dataclass(frozen=True)
class Heatmap:
    """Normalized patch-grid scores plus their upsampled full-size map."""

    grid: np.ndarray
    upsampled: np.ndarray
    degenerate: bool
    source: str = ""

    def __post_init__(self):
        for arr in (self.grid, self.upsampled):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("heatmap values must lie in [0, 1]")


def class_token_attention(record: AttentionRecord) -> np.ndarray:
    """Mean class-token-to-patch attention over all layers and heads.

    Takes row 0 (the class token) of every post-softmax matrix, drops
    column 0 (its self-attention mass), and averages; the result has one
    non-negative entry per patch and sums to at most 1.
    """
    if not record.layers:
        raise ValueError("empty attention record")
    t = record.layers[0].shape[-1]
    acc = np.zeros(t - 1, dtype=np.float64)
    count = 0
    for i, layer in enumerate(record.layers):
        if layer.ndim != 3 or layer.shape[-2:] != (t, t):
            raise ValueError(f"layer {i}: expected (heads, {t}, {t}) attention, got {layer.shape}")
        acc += layer[:, 0, 1:].sum(axis=0)
        count += layer.shape[0]
    return acc / count


def _apply_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB float arrays via the warm gradient."""
    positions = np.array([p for p, _ in WARM_COLORMAP])
    channels = np.array([c for _, c in WARM_COLORMAP], dtype=np.float64)
    out = np.empty(values.shape + (3,))
    for ch in range(3):
        out[..., ch] = np.interp(values, positions, channels[:, ch])
    return out


def render_overlay(heat: np.ndarray, image: GrayImage) -> np.ndarray:
    """Alpha-blend the warm colormap over grayscale; returns (H, W, 3) uint8.

    Blend alpha is 0.4 * heat, so pixels with zero heat are untouched.
    """
    if heat.shape != image.data.shape:
        raise ValueError(f"heatmap {heat.shape} does not match image {image.data.shape}")
    gray = image.data.astype(np.float64)[..., None]
    color = _apply_colormap(heat)
    alpha = (_ALPHA_GAIN * heat)[..., None]
    blended = (1.0 - alpha) * gray + alpha * color
    return round_half_up(blended).astype(np.uint8)


def make_heatmap(scores: np.ndarray, image: GrayImage, source: str = "") -> tuple[Heatmap, np.ndarray]:
    """Normalize patch scores, upsample to the image, and build the overlay.

    ``scores`` must have a square length (g*g patches).  Min-max
    normalization maps a constant score vector to all zeros and sets the
    degenerate flag; otherwise the normalized grid attains both 0 and 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    g = int(round(np.sqrt(scores.size)))
    if g * g != scores.size:
        raise ValueError(f"got {scores.size} patch scores, not a square grid")
    grid = scores.reshape(g, g)
    lo, hi = grid.min(), grid.max()
    degenerate = bool(hi - lo < 1e-15)
    if degenerate:
        grid = np.zeros_like(grid)
    else:
        grid = (grid - lo) / (hi - lo)
    upsampled = resize_bilinear(FloatImage(grid), image.width, image.height).data
    heatmap = Heatmap(grid=grid, upsampled=upsampled, degenerate=degenerate, source=source)
    return heatmap, render_overlay(upsampled, image)


def ensemble_heatmap(
    ensemble: EnsembleModel, image: GrayImage, model_input: np.ndarray, source: str = ""
) -> tuple[Heatmap, np.ndarray]:
    """Average per-model class-token attention (in fold order), then map.

    The per-model score vectors are averaged before normalization, so
    ensembling identical models reproduces the single-model heatmap
    exactly.
    """
    total = None
    for params, cfg, _ in ensemble.members:
        _, record = forward(params, cfg, model_input)
        vec = class_token_attention(record)
        total = vec if total is None else total + vec
    mean = total / len(ensemble.members)
    return make_heatmap(mean, image, source=source)


def write_heatmap(
    heatmap: Heatmap, overlay: np.ndarray, out_png: str | Path
) -> None:
    """Write the overlay PNG plus a sidecar JSON with the normalized grid."""
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay, mode="RGB").save(out_png, format="PNG")
    sidecar = {
        "grid": [[float(v) for v in row] for row in heatmap.grid],
        "degenerate": heatmap.degenerate,
        "source": heatmap.source,
    }
    with open(out_png.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
