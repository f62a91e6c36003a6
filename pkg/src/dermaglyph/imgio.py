"""Raster containers and PNG I/O for fingerprint images.

Images are small value-semantic wrappers around 2-D numpy arrays:
``GrayImage`` holds 8-bit intensities, ``FloatImage`` holds real
intensities used throughout enhancement and as model input.  All
quantization uses round-half-up so results are platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "GrayImage",
    "FloatImage",
    "DecodeError",
    "UnsupportedDepthError",
    "load_png",
    "write_png",
    "invert",
    "resize_bilinear",
    "to_unit_float",
    "from_unit_float",
    "round_half_up",
]


class DecodeError(Exception):
    """The file exists but is not a decodable PNG."""


class UnsupportedDepthError(Exception):
    """The PNG uses more than 8 bits per channel."""


@dataclass(frozen=True)
class GrayImage:
    """Single-channel 8-bit image; ``data`` is (height, width) uint8."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"GrayImage dimensions must be >= 1, got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError(f"GrayImage data must be uint8, got {arr.dtype}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FloatImage:
    """Single-channel real-valued image; ``data`` is (height, width) float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"FloatImage data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"FloatImage dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FloatImage data must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def round_half_up(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, halves away from zero toward +inf."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


# ITU-R BT.601 luminance weights for RGB reduction.
_LUMA = np.array([0.299, 0.587, 0.114])

# Pillow modes with more than 8 bits per channel.
_DEEP_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def load_png(path: str | Path) -> GrayImage:
    """Load an 8-bit grayscale or RGB PNG as a GrayImage.

    RGB input is reduced to luminance (0.299 R + 0.587 G + 0.114 B,
    round-half-up).  Raises FileNotFoundError for a missing file,
    DecodeError for an undecodable one, and UnsupportedDepthError for
    bit depths above 8 per channel.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in _DEEP_MODES:
                raise UnsupportedDepthError(
                    f"{path}: unsupported bit depth (mode {mode}); only 8-bit channels are supported"
                )
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = round_half_up(rgb @ _LUMA).astype(np.uint8)
    except UnsupportedDepthError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode PNG ({exc})") from exc
    return GrayImage(arr)


def write_png(img: GrayImage, path: str | Path) -> None:
    """Write a GrayImage as a single-channel 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.data, mode="L").save(path, format="PNG")


def invert(img: GrayImage) -> GrayImage:
    """Complement each pixel: p -> 255 - p."""
    return GrayImage(255 - img.data)


def to_unit_float(img: GrayImage) -> FloatImage:
    """Map 8-bit intensities to [0, 1] by dividing by 255."""
    return FloatImage(img.data.astype(np.float64) / 255.0)


def from_unit_float(img: FloatImage) -> GrayImage:
    """Quantize a [0, 1] image to 8 bits (clamped, round-half-up)."""
    clamped = np.clip(img.data, 0.0, 1.0)
    return GrayImage(round_half_up(clamped * 255.0).astype(np.uint8))


def resize_bilinear(img: FloatImage, out_w: int, out_h: int) -> FloatImage:
    """Resize with bilinear interpolation over half-pixel-center sampling.

    Output values are convex combinations of input values, so they never
    leave the input's [min, max] range.  Resizing to the same dimensions
    reproduces the input exactly.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dimensions must be >= 1, got {out_w}x{out_h}")
    src = img.data
    in_h, in_w = src.shape

    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = np.clip(xs, 0.0, in_w - 1.0)
    ys = np.clip(ys, 0.0, in_h - 1.0)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    fx = xs - x0
    fy = ys - y0

    top = src[y0[:, None], x0[None, :]] * (1.0 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1.0 - fx) + src[y1[:, None], x1[None, :]] * fx
    out = top * (1.0 - fy[:, None]) + bot * fy[:, None]
    return FloatImage(out)
