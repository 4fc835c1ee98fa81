"""Slide tiling: Otsu tissue segmentation, patch grid extraction, and a
deterministic toy patch embedder for self-contained runs.

The tiler operates on plain raster images. Tissue is the dark Otsu class
{0..t}: histology is dark on a bright glass background. The patch grid is
non-overlapping and aligned to the image origin; a patch is kept when the
tissue fraction of its mask footprint reaches ``min_tissue_fraction``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .imaging import box_downsample, rgb_to_gray
from .validation import check_image, check_seed

__all__ = [
    "TissueMask",
    "PatchGrid",
    "otsu_threshold",
    "segment_tissue",
    "extract_patches",
    "toy_embed",
]

DEFAULT_PATCH_SIZE = 224
DEFAULT_DOWNSAMPLE = 16
DEFAULT_MIN_TISSUE_FRACTION = 0.5
TOY_DESCRIPTOR_DIM = 38


@dataclass
class TissueMask:
    """Boolean tissue map at 1/scale_factor of full resolution."""

    bits: np.ndarray
    scale_factor: int

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask bits must be 2-D")
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class PatchGrid:
    """Top-left corners of kept patches, row-major, in full-res pixels."""

    patch_size: int
    coords: list = field(default_factory=list)
    magnification_label: str = ""

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        self.coords = [(int(x), int(y)) for x, y in self.coords]
        if len(set(self.coords)) != len(self.coords):
            raise ValueError("patch coordinates must be unique")

    def __len__(self) -> int:
        return len(self.coords)

    def to_json(self, path=None) -> str:
        text = json.dumps(
            {"patch_size": self.patch_size, "coords": [[x, y] for x, y in self.coords]}
        )
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "PatchGrid":
        with open(path) as f:
            payload = json.load(f)
        return cls(
            patch_size=int(payload["patch_size"]),
            coords=[(int(x), int(y)) for x, y in payload["coords"]],
        )


def otsu_threshold(histogram) -> int:
    """Threshold t maximizing between-class variance of {0..t} vs {t+1..255}.

    Ties are broken toward the smallest t. Empty classes contribute zero
    variance.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"histogram must have 256 bins, got shape {hist.shape}")
    if (hist < 0).any():
        raise ValueError("histogram counts must be non-negative")
    total = hist.sum()
    if total == 0:
        raise ValueError("empty histogram")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * levels)
    sum_all = sum0[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(w0 > 0, sum0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (sum_all - sum0) / w1, 0.0)
    between = np.where((w0 > 0) & (w1 > 0), w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(between))


def segment_tissue(image, downsample: int = DEFAULT_DOWNSAMPLE) -> TissueMask:
    """Grayscale, box-downsample, Otsu; tissue is the dark class {0..t}."""
    image = check_image(image)
    if downsample < 1:
        raise ValueError(f"downsample must be >= 1, got {downsample}")
    h, w = image.shape[:2]
    if h // downsample < 1 or w // downsample < 1:
        raise ValueError(
            f"image {w}x{h} smaller than 1x1 after downsample by {downsample}"
        )
    gray = rgb_to_gray(image)
    small = box_downsample(gray, downsample)
    quantized = np.clip(np.rint(small), 0, 255).astype(np.uint8)
    hist = np.bincount(quantized.ravel(), minlength=256)
    t = otsu_threshold(hist)
    return TissueMask(bits=quantized <= t, scale_factor=downsample)


def extract_patches(
    image,
    mask: TissueMask,
    patch_size: int = DEFAULT_PATCH_SIZE,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
    magnification_label: str = "",
) -> PatchGrid:
    """Keep origin-aligned, non-overlapping patches with enough tissue."""
    image = check_image(image)
    h, w = image.shape[:2]
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image extent {w}x{h}")
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ValueError("min_tissue_fraction must lie in [0, 1]")
    # Expand the mask back to full resolution so footprint fractions count
    # full-res pixels exactly.
    f = mask.scale_factor
    full = np.repeat(np.repeat(mask.bits, f, axis=0), f, axis=1)[:h, :w]
    if full.shape != (h, w):
        raise ValueError("mask does not cover the image at its scale factor")
    c = np.zeros((h + 1, w + 1), dtype=np.int64)
    c[1:, 1:] = full.astype(np.int64).cumsum(axis=0).cumsum(axis=1)
    coords = []
    area = patch_size * patch_size
    for y in range(0, h - patch_size + 1, patch_size):
        for x in range(0, w - patch_size + 1, patch_size):
            y1, x1 = y + patch_size, x + patch_size
            tissue = c[y1, x1] - c[y, x1] - c[y1, x] + c[y, x]
            if tissue / area >= min_tissue_fraction:
                coords.append((x, y))
    if not coords:
        raise ValueError("no tissue patches")
    return PatchGrid(
        patch_size=patch_size, coords=coords, magnification_label=magnification_label
    )


def crop_patch(image, x: int, y: int, patch_size: int) -> np.ndarray:
    image = check_image(image)
    h, w = image.shape[:2]
    if x < 0 or y < 0 or x + patch_size > w or y + patch_size > h:
        raise ValueError(f"patch at ({x}, {y}) size {patch_size} exceeds image bounds")
    return image[y : y + patch_size, x : x + patch_size].copy()


def _toy_descriptor(patch: np.ndarray) -> np.ndarray:
    """38-dim hand-crafted patch descriptor on the [0, 1] intensity scale.

    Layout: 3 channels x 8 histogram-bin fractions (24), per-channel mean
    and std (6), per-channel mean |horizontal| and |vertical| gradient (6),
    dark-pixel fraction and a constant 1 (2).
    """
    x = patch.astype(np.float64) / 255.0
    feats = []
    for ch in range(3):
        plane = patch[:, :, ch]
        hist = np.bincount((plane >> 5).ravel(), minlength=8).astype(np.float64)
        feats.extend(hist / plane.size)
    for ch in range(3):
        plane = x[:, :, ch]
        feats.append(plane.mean())
        feats.append(plane.std())
    for ch in range(3):
        plane = x[:, :, ch]
        dh = np.abs(np.diff(plane, axis=1)).mean() if plane.shape[1] > 1 else 0.0
        dv = np.abs(np.diff(plane, axis=0)).mean() if plane.shape[0] > 1 else 0.0
        feats.append(dh)
        feats.append(dv)
    luma = 0.299 * x[:, :, 0] + 0.587 * x[:, :, 1] + 0.114 * x[:, :, 2]
    feats.append(float((luma < 0.5).mean()))
    feats.append(1.0)
    return np.asarray(feats, dtype=np.float64)


def toy_embed(patch, out_dim: int, seed: int) -> np.ndarray:
    """Deterministic toy embedding: descriptor + seeded random projection.

    Pure function of (patch, out_dim, seed); the projection matrix depends
    only on (out_dim, seed).
    """
    patch = check_image(patch, "patch")
    if out_dim < 8:
        raise ValueError(f"out_dim must be >= 8, got {out_dim}")
    seed = check_seed(seed)
    desc = _toy_descriptor(patch)
    rng = np.random.default_rng(seed)
    projection = rng.normal(0.0, 1.0 / np.sqrt(TOY_DESCRIPTOR_DIM), size=(out_dim, TOY_DESCRIPTOR_DIM))
    return projection @ desc


def toy_embed_many(patches, out_dim: int, seed: int, threads: int = 1) -> np.ndarray:
    """Embed a list of patches; rows follow input order regardless of threads."""
    if out_dim < 8:
        raise ValueError(f"out_dim must be >= 8, got {out_dim}")
    seed = check_seed(seed)
    rng = np.random.default_rng(seed)
    projection = rng.normal(0.0, 1.0 / np.sqrt(TOY_DESCRIPTOR_DIM), size=(out_dim, TOY_DESCRIPTOR_DIM))

    def one(p):
        return projection @ _toy_descriptor(check_image(p, "patch"))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, patches))
    else:
        rows = [one(p) for p in patches]
    return np.stack(rows, axis=0)
