"""Bag storage and dataset bookkeeping.

A bag is the set of patch embeddings from one slide plus the patch grid
coordinates. Bags are stored one file per slide in a small binary format
(magic ``MILB``), and a JSON manifest ties bag files to labels and splits.
All multi-byte fields are little-endian regardless of host byte order.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .validation import check_seed

__all__ = [
    "FIRLabel",
    "Bag",
    "ManifestEntry",
    "DatasetManifest",
    "SynthSpec",
    "write_bag",
    "read_bag",
    "stratified_split",
    "generate_synthetic",
]

MAGIC = b"MILB"
VERSION = 1
HEADER = struct.Struct("<4sHHII")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
GROUND_TRUTH_NAME = "ground_truth.json"


class FIRLabel(enum.IntEnum):
    """Fetal inflammatory response stage of a slide."""

    FIR0 = 0
    FIR1 = 1
    FIR2 = 2


@dataclass
class Bag:
    """In-memory bag: one embedding row per kept patch, plus its grid corner."""

    coords: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {self.coords.shape}")
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        if len(self.coords) != len(self.embeddings):
            raise ValueError(
                f"{len(self.coords)} coords but {len(self.embeddings)} embedding rows"
            )
        if len(self.embeddings) == 0:
            raise ValueError("a bag must contain at least one patch")
        if (self.coords < 0).any() or (self.coords > 0xFFFFFFFF).any():
            raise ValueError("coords must fit in an unsigned 32-bit integer")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("embeddings must be finite")

    @property
    def n_patches(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def write_bag(path, bag: Bag) -> None:
    header = HEADER.pack(MAGIC, VERSION, 0, bag.n_patches, bag.dim)
    coords = np.ascontiguousarray(bag.coords, dtype="<u4")
    emb = np.ascontiguousarray(bag.embeddings, dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(coords.tobytes())
        f.write(emb.tobytes())


def read_bag(path) -> Bag:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, reserved, n, dim = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if reserved != 0:
        raise ValueError(f"{path}: reserved field must be zero, got {reserved}")
    if n == 0:
        raise ValueError(f"{path}: bag contains no patches")
    if dim == 0:
        raise ValueError(f"{path}: embedding dimension is zero")
    expected = HEADER.size + n * 8 + n * dim * 4
    if len(blob) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for {n} patches of dim {dim}, "
            f"got {len(blob)}"
        )
    coords = np.frombuffer(blob, dtype="<u4", count=2 * n, offset=HEADER.size)
    emb = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=HEADER.size + n * 8)
    emb = emb.reshape(n, dim)
    if not np.isfinite(emb).all():
        raise ValueError(f"{path}: embeddings contain non-finite values")
    return Bag(coords=coords.reshape(n, 2).astype(np.int64), embeddings=emb)


@dataclass
class ManifestEntry:
    bag: str
    label: int
    split: str

    def __post_init__(self) -> None:
        self.label = int(self.label)
        if self.label not in (0, 1, 2):
            raise ValueError(f"label must be 0, 1, or 2, got {self.label}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Maps bag files to labels and train/val/test splits."""

    extractor_id: str
    dim: int
    entries: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.dim = int(self.dim)
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        self.entries = [
            e if isinstance(e, ManifestEntry) else ManifestEntry(**e)
            for e in self.entries
        ]
        if not self.entries:
            raise ValueError("manifest has no entries")
        paths = [e.bag for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest lists the same bag file twice")

    def split_entries(self, split: str) -> list:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [e for e in self.entries if e.split == split]

    def to_json(self) -> str:
        return json.dumps(
            {
                "extractor_id": self.extractor_id,
                "dim": self.dim,
                "entries": [
                    {"bag": e.bag, "label": e.label, "split": e.split}
                    for e in self.entries
                ],
            },
            indent=2,
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            payload = json.load(f)
        for key in ("extractor_id", "dim", "entries"):
            if key not in payload:
                raise ValueError(f"{path}: manifest missing key {key!r}")
        return cls(
            extractor_id=payload["extractor_id"],
            dim=payload["dim"],
            entries=payload["entries"],
        )


def resolve_bag_path(manifest_path, bag: str) -> str:
    """Bag paths are stored relative to the manifest file's directory."""
    if os.path.isabs(bag):
        return bag
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), bag)


def _largest_remainder_counts(n: int, fractions) -> list:
    quotas = [f * n for f in fractions]
    base = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(base)
    # Ties on the fractional part go to the earlier split (train first).
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def stratified_split(labels, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> list:
    """Assign each item a split, stratified per class by largest remainder.

    Within each class the items are shuffled with a seeded stream, then
    dealt to train, val, test in that order, so per-class counts match the
    largest-remainder apportionment exactly.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must name train, val, test")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    seed = check_seed(seed)
    out = [""] * len(labels)
    for c in sorted(set(int(v) for v in labels)):
        idx = np.flatnonzero(labels == c)
        rng = np.random.default_rng([seed, c])
        idx = idx[rng.permutation(len(idx))]
        counts = _largest_remainder_counts(len(idx), fractions)
        start = 0
        for split, count in zip(SPLITS, counts):
            for i in idx[start : start + count]:
                out[int(i)] = split
            start += count
    return out


@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset with known signal instances.

    Stage 0 bags are pure background noise. Stage 1 and 2 bags plant
    ``round(signal_fraction * n)`` instances at orthogonal axis-aligned
    class centers of norm ``separation``; everything else is background.
    """

    n_bags_per_class: int = 20
    min_patches: int = 30
    max_patches: int = 80
    dim: int = 32
    separation: float = 4.0
    signal_fraction: float = 0.2
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_bags_per_class < 1:
            raise ValueError("n_bags_per_class must be >= 1")
        if self.min_patches < 1 or self.max_patches < self.min_patches:
            raise ValueError("need 1 <= min_patches <= max_patches")
        if self.dim < 3:
            raise ValueError(f"dim must be >= 3, got {self.dim}")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ValueError("signal_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.seed = check_seed(self.seed)


def _class_center(label: int, dim: int, separation: float) -> np.ndarray:
    center = np.zeros(dim)
    if label > 0:
        center[label - 1] = separation
    return center


def generate_synthetic(spec: SynthSpec, out_dir, extractor_id: str = "synthetic"):
    """Write a synthetic bag dataset plus its manifest and ground truth.

    Returns (manifest, ground_truth) where ground_truth records the planted
    signal instance indices per bag. Bags are independent of generation
    order: each uses its own stream keyed by (seed, label, bag index).
    """
    os.makedirs(out_dir, exist_ok=True)
    labels = []
    records = []
    for label in (0, 1, 2):
        center = _class_center(label, spec.dim, spec.separation)
        for b in range(spec.n_bags_per_class):
            rng = np.random.default_rng([spec.seed, label, b])
            n = int(rng.integers(spec.min_patches, spec.max_patches + 1))
            emb = rng.normal(0.0, spec.noise_sigma, size=(n, spec.dim))
            if label == 0:
                signal = []
            else:
                k = int(round(spec.signal_fraction * n))
                k = max(k, 1)
                signal = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
                emb[signal] += center
            cols = max(int(np.ceil(np.sqrt(n))), 1)
            coords = np.array(
                [((i % cols) * 224, (i // cols) * 224) for i in range(n)],
                dtype=np.int64,
            )
            name = f"bag_{label}_{b:03d}.milb"
            write_bag(
                os.path.join(out_dir, name),
                Bag(coords=coords, embeddings=emb.astype(np.float32)),
            )
            labels.append(label)
            records.append({"bag": name, "label": label, "signal_indices": signal})
    splits = stratified_split(labels, seed=spec.seed)
    entries = [
        ManifestEntry(bag=r["bag"], label=r["label"], split=s)
        for r, s in zip(records, splits)
    ]
    manifest = DatasetManifest(extractor_id=extractor_id, dim=spec.dim, entries=entries)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    ground_truth = {"bags": records}
    with open(os.path.join(out_dir, GROUND_TRUTH_NAME), "w") as f:
        json.dump(ground_truth, f, indent=2)
        f.write("\n")
    return manifest, ground_truth
