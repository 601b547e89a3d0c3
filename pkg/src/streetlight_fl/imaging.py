"""Image preprocessing: PPM ingestion, centre crop, bilinear downsampling,
per-channel standardisation and green-channel statistics.

The resampling kernel comes from the compiled ``_resize_ext`` module when it
was built, otherwise from the numpy implementation in ``_resize_py``. Set
``STREETLIGHT_FL_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _resize_py

if os.environ.get("STREETLIGHT_FL_PURE_PYTHON", "") not in ("", "0"):
    _resize_kernel = _resize_py.resize_bilinear
    KERNEL_BACKEND = "python"
else:
    try:
        from ._resize_ext import resize_bilinear as _resize_kernel

        KERNEL_BACKEND = "compiled"
    except ImportError:
        _resize_kernel = _resize_py.resize_bilinear
        KERNEL_BACKEND = "python"

NORM_EPS = 1e-8
FEATURE_SIDE = 32
FEATURE_LEN = 3 * FEATURE_SIDE * FEATURE_SIDE


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


class UnsupportedFormat(ImageFormatError):
    pass


class UnsupportedMaxval(ImageFormatError):
    pass


class TruncatedImage(ImageFormatError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    """H x W x 3 RGB pixel grid, float64, row-major and channel-interleaved."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected an (H, W, 3) array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class GreenStats:
    mean_green: float
    median_green: float


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImage("PPM header ends early")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise TruncatedImage("PPM header is not terminated")
    return tokens, pos + 1


def load_ppm(path) -> ImageBuffer:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise UnsupportedFormat(f"{path}: unsupported format {data[:2]!r}, expected binary P6")
    tokens, offset = _ppm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise UnsupportedMaxval(f"{path}: maxval {maxval} not supported (need 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    need = width * height * 3
    raster = data[2 + offset :]
    if len(raster) < need:
        raise TruncatedImage(f"{path}: payload has {len(raster)} bytes, header declares {need}")
    px = np.frombuffer(raster, dtype=np.uint8, count=need).reshape(height, width, 3)
    return ImageBuffer(px.astype(np.float64))


def save_ppm(img: ImageBuffer, path) -> None:
    px = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + px.tobytes())


def center_crop(img: ImageBuffer, side: int) -> ImageBuffer:
    if side < 1 or side > min(img.height, img.width):
        raise ValueError(f"crop side {side} exceeds image {img.height}x{img.width}")
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    return ImageBuffer(img.pixels[top : top + side, left : left + side])


def bilinear_resize(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    return ImageBuffer(_resize_kernel(img.pixels, out_h, out_w))


def channel_stats(img: ImageBuffer) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population standard deviation."""
    px = img.pixels.reshape(-1, 3)
    return px.mean(axis=0), px.std(axis=0)


def normalize(img: ImageBuffer) -> np.ndarray:
    """Standardise each channel of one image and flatten channel-major (C, H, W)."""
    mean, std = channel_stats(img)
    out = (img.pixels - mean) / np.maximum(std, NORM_EPS)
    return np.ascontiguousarray(out.transpose(2, 0, 1)).reshape(-1)


def green_metadata(img: ImageBuffer) -> GreenStats:
    g = img.pixels[:, :, 1].reshape(-1)
    # np.median averages the two middle order statistics for even counts
    return GreenStats(float(g.mean()), float(np.median(g)))


def preprocess(img: ImageBuffer, crop_side: int | None = None, side: int = FEATURE_SIDE,
               green: bool = False) -> np.ndarray:
    """Crop to a centred square, downsample to ``side`` x ``side`` and standardise.

    With ``green=True`` the raw-image green mean and median (scaled to [0, 1])
    are appended, giving ``3*side*side + 2`` features.
    """
    if crop_side is None:
        crop_side = min(img.height, img.width)
    small = bilinear_resize(center_crop(img, crop_side), side, side)
    feats = normalize(small)
    if green:
        gs = green_metadata(img)
        feats = np.concatenate([feats, [gs.mean_green / 255.0, gs.median_green / 255.0]])
    return feats
