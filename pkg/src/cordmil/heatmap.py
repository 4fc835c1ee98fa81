"""Attention overlay rendering and high-attention patch export.

The attention of one class branch (the predicted class by default) is
min-max normalized per slide, mapped through viridis (purple = low,
yellow = high), and alpha-blended onto the downsampled slide over each
patch footprint. Pixels outside any patch keep the plain image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from matplotlib import colormaps

from .imaging import box_downsample
from .milnet import AttentionResult
from .tiler import PatchGrid, crop_patch
from .validation import check_image

__all__ = [
    "HeatmapSpec",
    "render_attention",
    "top_attention_patches",
    "patch_metadata_json",
]

_VIRIDIS = colormaps["viridis"]


@dataclass
class HeatmapSpec:
    scale: int = 16
    opacity: float = 0.5
    class_index: int = None  # None renders the predicted class

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")


def _normalize_alpha(alpha: np.ndarray) -> np.ndarray:
    """Per-slide min-max; a constant field maps to the colormap midpoint."""
    lo, hi = float(alpha.min()), float(alpha.max())
    if hi == lo:
        return np.full_like(alpha, 0.5)
    return (alpha - lo) / (hi - lo)


def _select_class(attn: AttentionResult, class_index) -> int:
    n_classes = attn.alpha.shape[0]
    c = attn.predicted_class if class_index is None else int(class_index)
    if not 0 <= c < n_classes:
        raise ValueError(f"class index {c} out of range for {n_classes} classes")
    return c


def render_attention(image, grid: PatchGrid, attn: AttentionResult,
                     spec: HeatmapSpec = None) -> np.ndarray:
    """Overlay image at 1/spec.scale resolution, uint8 RGB."""
    if spec is None:
        spec = HeatmapSpec()
    image = check_image(image)
    n_patches = attn.alpha.shape[1]
    if len(grid) != n_patches:
        raise ValueError(
            f"grid has {len(grid)} patches but attention covers {n_patches}"
        )
    c = _select_class(attn, spec.class_index)
    norm = _normalize_alpha(attn.alpha[c])

    h, w = image.shape[:2]
    out_h, out_w = h // spec.scale, w // spec.scale
    if out_h < 1 or out_w < 1:
        raise ValueError(f"image {w}x{h} vanishes at scale {spec.scale}")
    base = np.stack(
        [box_downsample(image[:, :, ch].astype(np.float64), spec.scale) for ch in range(3)],
        axis=2,
    )[:out_h, :out_w]
    out = base.copy()
    for (x, y), value in zip(grid.coords, norm):
        color = np.asarray(_VIRIDIS(float(value))[:3]) * 255.0
        # Half-open footprint in output pixels; floor on both ends keeps
        # adjacent patches from sharing an output pixel.
        x0, y0 = x // spec.scale, y // spec.scale
        x1 = min((x + grid.patch_size) // spec.scale, out_w)
        y1 = min((y + grid.patch_size) // spec.scale, out_h)
        if x0 >= out_w or y0 >= out_h:
            continue
        out[y0:y1, x0:x1] = (
            spec.opacity * color + (1.0 - spec.opacity) * base[y0:y1, x0:x1]
        )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def top_attention_patches(image, grid: PatchGrid, attn: AttentionResult, k: int,
                          class_index=None):
    """k highest-attention patch crops at full resolution.

    Sort is by the selected class's attention descending; exact ties fall
    back to row-major coordinate order. Returns (crops, metadata) where
    metadata rows are {"x", "y", "alpha", "rank"} with rank starting at 1.
    """
    image = check_image(image)
    n_patches = attn.alpha.shape[1]
    if len(grid) != n_patches:
        raise ValueError(
            f"grid has {len(grid)} patches but attention covers {n_patches}"
        )
    if not 1 <= k <= n_patches:
        raise ValueError(f"k must lie in [1, {n_patches}], got {k}")
    c = _select_class(attn, class_index)
    alpha = attn.alpha[c]
    order = sorted(
        range(n_patches),
        key=lambda i: (-alpha[i], grid.coords[i][1], grid.coords[i][0]),
    )[:k]
    crops = []
    metadata = []
    for rank, i in enumerate(order, start=1):
        x, y = grid.coords[i]
        crops.append(crop_patch(image, x, y, grid.patch_size))
        metadata.append({"x": x, "y": y, "alpha": float(alpha[i]), "rank": rank})
    return crops, metadata


def patch_metadata_json(metadata, path=None) -> str:
    text = json.dumps(metadata)
    if path is not None:
        with open(path, "w") as f:
            f.write(text + "\n")
    return text
