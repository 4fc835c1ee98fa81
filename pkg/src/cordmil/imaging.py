"""Raster image I/O and resampling primitives.

Images are plain (h, w, 3) uint8 RGB arrays throughout the toolkit.
Supported on disk: PNG and binary PPM (P6).
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .validation import check_image

__all__ = ["read_image", "write_image", "rgb_to_gray", "box_downsample"]

_SUPPORTED = {".png", ".ppm"}


def read_image(path) -> np.ndarray:
    """Read a PNG or binary PPM (P6) file as an (h, w, 3) uint8 array."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _SUPPORTED:
        raise ValueError(f"unsupported image format {ext!r} (want .png or .ppm)")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return check_image(arr, str(path))


def write_image(img: np.ndarray, path) -> None:
    img = check_image(img)
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _SUPPORTED:
        raise ValueError(f"unsupported image format {ext!r} (want .png or .ppm)")
    Image.fromarray(img, mode="RGB").save(path)


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Luma grayscale (weights 0.299 / 0.587 / 0.114) as float64 in [0, 255]."""
    img = check_image(img)
    return (
        0.299 * img[:, :, 0].astype(np.float64)
        + 0.587 * img[:, :, 1].astype(np.float64)
        + 0.114 * img[:, :, 2].astype(np.float64)
    )


def box_downsample(plane: np.ndarray, factor: int) -> np.ndarray:
    """Average over factor x factor boxes; edge boxes may be partial.

    Output shape is (ceil(h / factor), ceil(w / factor)) so every source
    pixel maps to exactly one output cell via integer division.
    """
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    if factor == 1:
        return plane.copy()
    oh = -(-h // factor)
    ow = -(-w // factor)
    # Box sums via a padded 2-D cumulative sum, divided by actual box areas.
    c = np.zeros((h + 1, w + 1), dtype=np.float64)
    c[1:, 1:] = plane.cumsum(axis=0).cumsum(axis=1)
    ye = np.minimum(np.arange(1, oh + 1) * factor, h)
    xe = np.minimum(np.arange(1, ow + 1) * factor, w)
    ys = np.arange(oh) * factor
    xs = np.arange(ow) * factor
    sums = c[np.ix_(ye, xe)] - c[np.ix_(ys, xe)] - c[np.ix_(ye, xs)] + c[np.ix_(ys, xs)]
    areas = np.outer(ye - ys, xe - xs)
    return sums / areas
