"""Embedding-quality toolkit: PCA, k-means, KNN scoring, and exact t-SNE.

These are the tools of the patch-embedding comparison protocol: standardize
features, reduce with PCA, cluster, score label separation with a KNN
classifier, and visualize with t-SNE. Everything is written directly
against numpy; the t-SNE is the exact O(n^2) algorithm, adequate for the
protocol's ~1000 patches.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import balanced_accuracy, confusion
from .validation import as_rng, check_embedding_matrix, check_seed

__all__ = [
    "PATCH_GROUPS",
    "PALETTE",
    "LabeledPatchSet",
    "TsneConfig",
    "PcaModel",
    "pca_fit",
    "pca_project",
    "standardize",
    "kmeans",
    "KmeansResult",
    "knn_balanced_accuracy",
    "tsne",
    "TsneResult",
    "PcaReducer",
    "KMeansCluster",
    "TsneEmbedding",
    "save_coords_csv",
    "scatter_png",
]

PATCH_GROUPS = (
    "amnion",
    "blood",
    "vessel wall",
    "Wharton's jelly",
    "non-cord tissue",
    "debris/marker",
)

# Fixed scatter palette, one color per patch group.
PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
)


@dataclass
class LabeledPatchSet:
    """Patch embeddings with group labels and optional provenance.

    Labels may arrive as group-name strings (resolved against ``names``)
    or as integer codes; they are stored as codes.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    names: tuple = PATCH_GROUPS
    provenance: list = None

    def __post_init__(self) -> None:
        self.embeddings = check_embedding_matrix(self.embeddings, "embeddings")
        if len(self.embeddings) < 2:
            raise ValueError("a patch set needs at least 2 points")
        labels = list(self.labels)
        if labels and isinstance(labels[0], str):
            unknown = sorted(set(labels) - set(self.names))
            if unknown:
                raise ValueError(f"labels outside the group set: {unknown}")
            labels = [self.names.index(v) for v in labels]
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) != len(self.embeddings):
            raise ValueError("labels must align 1:1 with embedding rows")
        if (self.labels < 0).any() or (self.labels >= len(self.names)).any():
            raise ValueError(f"label codes must lie in [0, {len(self.names)})")
        if self.provenance is not None and len(self.provenance) != len(self.labels):
            raise ValueError("provenance must align 1:1 with embedding rows")

    @property
    def n_groups(self) -> int:
        return len(self.names)


def standardize(x):
    """Column-wise (x - mean)/std; constant columns map to 0.

    Returns (standardized, mean, std). The returned std has 1 in place of
    zeros so the transform is reusable on new data.
    """
    x = check_embedding_matrix(x)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return (x - mean) / std, mean, std


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.components)


def pca_fit(x, n_components: int) -> PcaModel:
    """Eigendecomposition of the sample covariance (n-1 divisor).

    Components are orthonormal rows ordered by decreasing eigenvalue; each
    is flipped so its largest-magnitude entry is positive (first such entry
    on ties). Input is used as given; standardize first if the protocol
    calls for unit-variance features.
    """
    x = check_embedding_matrix(x)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 points")
    if not 1 <= n_components <= min(n, d):
        raise ValueError(
            f"n_components must lie in [1, {min(n, d)}], got {n_components}"
        )
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=eigvals[order].copy(),
    )


def pca_project(model: PcaModel, x) -> np.ndarray:
    x = check_embedding_matrix(x)
    if x.shape[1] != len(model.mean):
        raise ValueError(f"x has dim {x.shape[1]}, model expects {len(model.mean)}")
    return (x - model.mean) @ model.components.T


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list
    n_iters: int


def _nearest_center_d2(x, centers):
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2


def _kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(x, k: int, seed, max_iters: int = 300) -> KmeansResult:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    A cluster that loses all points is reseeded to the farthest point whose
    own cluster retains another member, so k <= n guarantees k non-empty
    clusters. Inertia (within-cluster sum of squares) is recorded after
    every iteration and never increases.
    """
    x = check_embedding_matrix(x)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = as_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history = []
    n_iters = 0
    for _ in range(max_iters):
        n_iters += 1
        d2 = _nearest_center_d2(x, centers)
        new_assign = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), new_assign]
        for c in range(k):
            if not (new_assign == c).any():
                counts = np.bincount(new_assign, minlength=k)
                donors = np.where(counts[new_assign] > 1)[0]
                far = int(donors[np.argmax(point_d2[donors])])
                new_assign[far] = c
                point_d2[far] = 0.0
        for c in range(k):
            mask = new_assign == c
            centers[c] = x[mask].mean(axis=0)
        inertia = float(((x - centers[new_assign]) ** 2).sum())
        history.append(inertia)
        if (new_assign == assignments).all():
            break
        assignments = new_assign
    return KmeansResult(
        assignments=assignments,
        centers=centers,
        inertia=history[-1],
        inertia_history=history,
        n_iters=n_iters,
    )


def knn_balanced_accuracy(train: LabeledPatchSet, test: LabeledPatchSet, k: int = 5) -> float:
    """Balanced accuracy of a Euclidean k-NN vote of train labels on test.

    Distance ties prefer the smaller train index; vote ties prefer the
    smallest class code.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(train.embeddings):
        raise ValueError(f"k={k} exceeds the {len(train.embeddings)} training points")
    if len(test.embeddings) == 0:
        raise ValueError("empty test set")
    if train.embeddings.shape[1] != test.embeddings.shape[1]:
        raise ValueError("train and test dimensions differ")
    a, b = test.embeddings, train.embeddings
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    n_classes = max(train.n_groups, test.n_groups)
    preds = np.empty(len(a), dtype=np.int64)
    for i in range(len(a)):
        neighbors = np.argsort(d2[i], kind="stable")[:k]
        votes = np.bincount(train.labels[neighbors], minlength=n_classes)
        preds[i] = int(np.argmax(votes))
    return balanced_accuracy(confusion(test.labels, preds, n_classes))


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    out_dim: int = 2
    learning_rate: float = 200.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_switch_iter: int = 250
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.perplexity <= 0:
            raise ValueError("perplexity must be positive")
        if self.out_dim != 2:
            raise ValueError("only 2-D output is supported")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.early_exaggeration < 1:
            raise ValueError("early_exaggeration must be >= 1")
        self.seed = check_seed(self.seed)


@dataclass
class TsneResult:
    coords: np.ndarray
    kl: float
    kl_history: list


def _conditional_p(d2: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic conditional affinities matching the perplexity.

    Each row's precision is found by binary search (50 iterations or
    entropy within 1e-5 nats of log(perplexity))."""
    n = len(d2)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        if row.max() <= 0.0:
            raise ValueError(
                f"point {i} coincides with every other point; affinities are undefined"
            )
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        for _ in range(50):
            w = np.exp(-row * beta)
            sum_w = w.sum()
            if sum_w <= 0.0:
                entropy = -np.inf
            else:
                entropy = np.log(sum_w) + beta * (row @ w) / sum_w
            if abs(entropy - target) < 1e-5:
                break
            if entropy > target:
                beta_min = beta
                beta = beta * 2.0 if np.isinf(beta_max) else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if np.isinf(beta_min) else (beta + beta_min) / 2.0
        w = np.exp(-row * beta)
        w /= w.sum()
        p[i, np.arange(n) != i] = w
    return p


def tsne(x, config: TsneConfig = None) -> TsneResult:
    """Exact t-SNE with early exaggeration and a momentum switch.

    High-dimensional affinities are symmetrized conditionals; the embedding
    uses Student-t (one degree of freedom) similarities. Returns the 2-D
    coordinates plus the KL divergence (against the unexaggerated P) after
    every iteration.
    """
    if config is None:
        config = TsneConfig()
    x = check_embedding_matrix(x)
    n = len(x)
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")
    if config.perplexity >= n - 1:
        raise ValueError(
            f"perplexity {config.perplexity} must be < n-1 = {n - 1}"
        )
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    p_cond = _conditional_p(d2, config.perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, 1e-4, size=(n, config.out_dim))
    update = np.zeros_like(y)
    history = []
    for t in range(1, config.iterations + 1):
        sum_y = (y * y).sum(axis=1)
        num = 1.0 / (1.0 + sum_y[:, None] + sum_y[None, :] - 2.0 * (y @ y.T))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        p_eff = p * config.early_exaggeration if t <= config.exaggeration_iters else p
        w = (p_eff - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        momentum = (
            config.initial_momentum
            if t <= config.momentum_switch_iter
            else config.final_momentum
        )
        update = momentum * update - config.learning_rate * grad
        y = y + update
        y = y - y.mean(axis=0)
        history.append(float((p * np.log(p / q)).sum()))
    return TsneResult(coords=y, kl=history[-1], kl_history=history)


class PcaReducer(TransformerMixin, BaseEstimator):
    """Estimator-style wrapper around pca_fit/pca_project."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.model_ = pca_fit(X, self.n_components)
        self.components_ = self.model_.components
        self.explained_variance_ = self.model_.explained_variance
        return self

    def transform(self, X) -> np.ndarray:
        return pca_project(self.model_, X)


class KMeansCluster(BaseEstimator):
    """Estimator-style wrapper around kmeans."""

    def __init__(self, k: int = 5, seed: int = 0, max_iters: int = 300):
        self.k = k
        self.seed = seed
        self.max_iters = max_iters

    def fit(self, X, y=None):
        result = kmeans(X, self.k, self.seed, self.max_iters)
        self.labels_ = result.assignments
        self.cluster_centers_ = result.centers
        self.inertia_ = result.inertia
        return self

    def predict(self, X) -> np.ndarray:
        X = check_embedding_matrix(X)
        return np.argmin(_nearest_center_d2(X, self.cluster_centers_), axis=1)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).labels_


class TsneEmbedding(BaseEstimator):
    """Estimator-style wrapper around tsne."""

    def __init__(self, perplexity: float = 30.0, learning_rate: float = 200.0,
                 iterations: int = 1000, seed: int = 0):
        self.perplexity = perplexity
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.seed = seed

    def fit_transform(self, X, y=None) -> np.ndarray:
        result = tsne(
            X,
            TsneConfig(
                perplexity=self.perplexity,
                learning_rate=self.learning_rate,
                iterations=self.iterations,
                seed=self.seed,
            ),
        )
        self.kl_ = result.kl
        self.kl_history_ = result.kl_history
        return result.coords


def save_coords_csv(path, coords, labels, ids=None) -> str:
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must have shape (n, 2)")
    if len(labels) != len(coords):
        raise ValueError("labels must align with coords")
    if ids is None:
        ids = list(range(len(coords)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "x", "y", "label"])
    for i, (xy, lab) in enumerate(zip(coords, labels)):
        writer.writerow([ids[i], repr(float(xy[0])), repr(float(xy[1])), lab])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


def scatter_png(path, coords, labels, size: int = 800, margin: int = 40, radius: int = 3):
    """Minimal scatter rendering with the fixed group palette."""
    from PIL import Image, ImageDraw

    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must have shape (n, 2)")
    if len(labels) != len(coords):
        raise ValueError("labels must align with coords")
    img = Image.new("RGB", (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi - lo == 0.0, 1.0, hi - lo)
    inner = size - 2 * margin
    for (cx, cy), lab in zip(coords, labels):
        px = margin + (cx - lo[0]) / span[0] * inner
        # Flip y so larger coordinates render higher on the canvas.
        py = size - margin - (cy - lo[1]) / span[1] * inner
        color = PALETTE[int(lab) % len(PALETTE)]
        draw.ellipse([px - radius, py - radius, px + radius, py + radius], fill=color)
    img.save(path, format="PNG")
    return path
