"""PCA, k-means, KNN scoring, and exact t-SNE."""

from collections import Counter

import numpy as np
import pytest
from sklearn.base import clone

from cordmil.embanalysis import (
    KMeansCluster,
    LabeledPatchSet,
    PcaReducer,
    TsneConfig,
    TsneEmbedding,
    _conditional_p,
    kmeans,
    knn_balanced_accuracy,
    pca_fit,
    pca_project,
    save_coords_csv,
    scatter_png,
    standardize,
    tsne,
)
from cordmil.metrics import balanced_accuracy, confusion


def blobs(n_per, centers, sigma, seed):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    x = np.vstack([c + sigma * rng.normal(size=(n_per, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return x, y


def charpoly_eigvals_3x3(cov):
    """Eigenvalues of a symmetric 3x3 via the characteristic cubic's roots."""
    a = np.asarray(cov, dtype=np.float64)
    tr = np.trace(a)
    minors = (
        a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
        + a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
        + a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    )
    det = np.linalg.det(a)
    roots = np.roots([1.0, -tr, minors, -det])
    return np.sort(roots.real)[::-1]


class TestStandardize:
    def test_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 5.0, size=(50, 4))
        z, mean, std = standardize(x)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose((x - mean) / std, z)

    def test_constant_column_maps_to_zero(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        z, _, std = standardize(x)
        np.testing.assert_array_equal(z[:, 1], 0.0)
        assert std[1] == 1.0  # reusable divisor


class TestPca:
    def test_line_first_component(self):
        t = np.linspace(-3, 3, 40)
        x = np.column_stack([t, 2 * t])
        model = pca_fit(x, 1)
        np.testing.assert_allclose(model.components[0], [1 / np.sqrt(5), 2 / np.sqrt(5)],
                                   atol=1e-12)

    def test_full_projection_preserves_distances(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 6))
        model = pca_fit(x, 6)
        proj = pca_project(model, x)
        orig = np.linalg.norm(x[:, None] - x[None, :], axis=2)
        new = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
        np.testing.assert_allclose(new, orig, atol=1e-9)

    def test_explained_variance_matches_charpoly_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            x = rng.normal(size=(int(rng.integers(5, 40)), 3)) * rng.uniform(0.5, 4.0)
            model = pca_fit(x, 3)
            xc = x - x.mean(axis=0)
            cov = xc.T @ xc / (len(x) - 1)
            np.testing.assert_allclose(
                model.explained_variance, charpoly_eigvals_3x3(cov), rtol=1e-8, atol=1e-10
            )

    def test_components_orthonormal_with_sign_convention(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 5))
        model = pca_fit(x, 5)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(5), atol=1e-10)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_reconstruction_with_all_components(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(25, 4))
        model = pca_fit(x, 4)
        recon = model.mean + pca_project(model, x) @ model.components
        assert np.linalg.norm(recon - x) < 1e-9 * np.linalg.norm(x)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least 2"):
            pca_fit(np.ones((1, 3)), 1)
        with pytest.raises(ValueError, match="n_components"):
            pca_fit(np.ones((5, 3)) + np.eye(5, 3), 4)
        model = pca_fit(np.random.default_rng(5).normal(size=(6, 3)), 2)
        with pytest.raises(ValueError, match="dim"):
            pca_project(model, np.zeros((2, 4)))


class TestKmeans:
    def test_k_equals_n(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(7, 3))
        result = kmeans(x, 7, seed=0)
        assert result.inertia == 0.0
        assert sorted(result.assignments) == list(range(7))

    def test_two_separated_pairs(self):
        x = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 10.0], [10.2, 10.0]])
        result = kmeans(x, 2, seed=1)
        a = result.assignments
        assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]
        centers = sorted(result.centers.tolist())
        np.testing.assert_allclose(centers, [[0.1, 0.0], [10.1, 10.0]], atol=1e-12)

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(60, 4))
        result = kmeans(x, 5, seed=2)
        hist = result.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert result.inertia == hist[-1]

    def test_seeded_determinism(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 3))
        a = kmeans(x, 4, seed=9)
        b = kmeans(x, 4, seed=9)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        np.testing.assert_array_equal(a.centers, b.centers)

    def test_duplicate_points_keep_clusters_nonempty(self):
        x = np.ones((6, 2))
        result = kmeans(x, 3, seed=0)
        assert set(result.assignments) == {0, 1, 2}
        assert result.inertia == 0.0
        assert np.isfinite(result.centers).all()

    def test_duplicate_points_k_equals_n(self):
        x = np.ones((4, 2))
        result = kmeans(x, 4, seed=0)
        assert sorted(result.assignments) == [0, 1, 2, 3]
        assert np.isfinite(result.centers).all()

    def test_errors(self):
        x = np.zeros((3, 2))
        with pytest.raises(ValueError, match="k must"):
            kmeans(x, 4, seed=0)
        with pytest.raises(ValueError, match="k must"):
            kmeans(x, 0, seed=0)
        with pytest.raises(ValueError, match="max_iters"):
            kmeans(np.random.default_rng(0).normal(size=(3, 2)), 2, seed=0, max_iters=0)


class TestKnn:
    def make_set(self, x, y):
        return LabeledPatchSet(embeddings=np.asarray(x, float), labels=np.asarray(y))

    def test_self_match_is_perfect(self):
        rng = np.random.default_rng(10)
        s = self.make_set(rng.normal(size=(30, 4)), rng.integers(0, 3, 30))
        assert knn_balanced_accuracy(s, s, k=1) == 1.0

    def test_exact_train_point(self):
        train = self.make_set([[0, 0], [5, 5], [9, 0]], [0, 1, 2])
        test = self.make_set([[5, 5], [0, 0]], [1, 0])
        assert knn_balanced_accuracy(train, test, k=1) == 1.0

    def test_distance_tie_prefers_smaller_index(self):
        train = self.make_set([[1.0, 0.0], [-1.0, 0.0]], [1, 0])
        test = self.make_set([[0.0, 0.0], [0.0, 0.0]], [1, 1])
        assert knn_balanced_accuracy(train, test, k=1) == 1.0

    def test_vote_tie_prefers_smaller_class(self):
        train = self.make_set([[1.0, 0.0], [-1.0, 0.0]], [1, 0])
        test = self.make_set([[0.0, 0.0], [0.0, 0.0]], [0, 0])
        # k=2 sees one vote each for classes 0 and 1.
        assert knn_balanced_accuracy(train, test, k=2) == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        xtr = rng.normal(size=(40, 3))
        ytr = rng.integers(0, 4, 40)
        xte = rng.normal(size=(25, 3))
        yte = rng.integers(0, 4, 25)
        for k in (1, 3, 5):
            got = knn_balanced_accuracy(self.make_set(xtr, ytr), self.make_set(xte, yte), k)
            preds = []
            for t in xte:
                order = sorted(range(40), key=lambda i: (np.linalg.norm(t - xtr[i]), i))
                votes = Counter(int(ytr[i]) for i in order[:k])
                top = max(votes.values())
                preds.append(min(c for c, v in votes.items() if v == top))
            want = balanced_accuracy(confusion(yte, np.array(preds), 6))
            assert got == pytest.approx(want, abs=1e-12)

    def test_separated_blobs_near_perfect(self):
        centers = 10.0 * np.eye(6)
        x, y = blobs(30, centers, sigma=1.0, seed=12)
        xt, yt = blobs(10, centers, sigma=1.0, seed=13)
        score = knn_balanced_accuracy(self.make_set(x, y), self.make_set(xt, yt), k=5)
        assert score >= 0.98

    def test_errors(self):
        s = self.make_set([[0, 0], [1, 1]], [0, 1])
        with pytest.raises(ValueError, match="k must"):
            knn_balanced_accuracy(s, s, k=0)
        with pytest.raises(ValueError, match="exceeds"):
            knn_balanced_accuracy(s, s, k=3)
        other = self.make_set([[0, 0, 0], [1, 1, 1]], [0, 1])
        with pytest.raises(ValueError, match="dimensions differ"):
            knn_balanced_accuracy(s, other, k=1)


class TestLabeledPatchSet:
    def test_string_labels_resolve_to_codes(self):
        s = LabeledPatchSet(
            embeddings=np.zeros((2, 3)) + np.arange(2)[:, None],
            labels=["blood", "amnion"],
        )
        np.testing.assert_array_equal(s.labels, [1, 0])

    def test_unknown_group_rejected(self):
        with pytest.raises(ValueError, match="outside the group set"):
            LabeledPatchSet(embeddings=np.eye(2), labels=["blood", "bones"])

    def test_misaligned_labels(self):
        with pytest.raises(ValueError, match="1:1"):
            LabeledPatchSet(embeddings=np.eye(3), labels=[0, 1])

    def test_code_range(self):
        with pytest.raises(ValueError, match="label codes"):
            LabeledPatchSet(embeddings=np.eye(2), labels=[0, 6])

    def test_provenance_alignment(self):
        with pytest.raises(ValueError, match="provenance"):
            LabeledPatchSet(embeddings=np.eye(2), labels=[0, 1], provenance=["a"])


class TestTsne:
    def test_conditional_rows_sum_to_one_with_target_entropy(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(30, 5))
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
        np.fill_diagonal(d2, 0.0)
        p = _conditional_p(d2, perplexity=5.0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert (np.diag(p) == 0.0).all()
        for i in range(30):
            row = p[i][p[i] > 0]
            entropy = -(row * np.log(row)).sum()
            assert abs(entropy - np.log(5.0)) < 1e-3

    def test_symmetrized_p_sums_to_one(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(20, 4))
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
        p_cond = _conditional_p(d2, perplexity=4.0)
        p = (p_cond + p_cond.T) / (2 * 20)
        assert abs(p.sum() - 1.0) < 1e-9

    def test_blob_separation_and_kl(self):
        x, y = blobs(20, [[0.0] * 4, [20.0] * 4], sigma=1.0, seed=16)
        result = tsne(x, TsneConfig(perplexity=8.0, iterations=400, seed=3))
        assert result.coords.shape == (40, 2)
        assert result.kl >= 0.0
        assert result.kl == result.kl_history[-1]
        # post-exaggeration descent
        assert result.kl <= result.kl_history[299] + 1e-6
        d = np.linalg.norm(result.coords[:, None] - result.coords[None, :], axis=2)
        same = y[:, None] == y[None, :]
        off_diag = ~np.eye(40, dtype=bool)
        within = d[same & off_diag].mean()
        cross = d[~same].mean()
        assert within < cross

    def test_seeded_determinism(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(15, 3))
        cfg = TsneConfig(perplexity=4.0, iterations=50, seed=5)
        a = tsne(x, cfg)
        b = tsne(x, cfg)
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_coincident_point_named(self):
        x = np.ones((6, 3))
        with pytest.raises(ValueError, match="point 0"):
            tsne(x, TsneConfig(perplexity=2.0, iterations=5))

    def test_preconditions(self):
        rng = np.random.default_rng(18)
        with pytest.raises(ValueError, match="at least 4"):
            tsne(rng.normal(size=(3, 2)))
        with pytest.raises(ValueError, match="perplexity"):
            tsne(rng.normal(size=(10, 2)), TsneConfig(perplexity=9.0))
        with pytest.raises(ValueError, match="perplexity"):
            TsneConfig(perplexity=0.0)
        with pytest.raises(ValueError, match="2-D"):
            TsneConfig(out_dim=3)


class TestEstimators:
    def test_pca_reducer_matches_functions(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(30, 5))
        reducer = PcaReducer(n_components=2).fit(x)
        np.testing.assert_array_equal(reducer.transform(x), pca_project(pca_fit(x, 2), x))
        assert clone(reducer).get_params() == {"n_components": 2}

    def test_kmeans_cluster_predict_consistent(self):
        x, _ = blobs(20, [[0.0, 0.0], [10.0, 10.0], [0.0, 10.0]], sigma=0.5, seed=20)
        est = KMeansCluster(k=3, seed=4)
        labels = est.fit_predict(x)
        np.testing.assert_array_equal(labels, est.labels_)
        np.testing.assert_array_equal(est.predict(x), labels)

    def test_tsne_embedding_wrapper(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(12, 3))
        emb = TsneEmbedding(perplexity=3.0, iterations=30, seed=6)
        coords = emb.fit_transform(x)
        assert coords.shape == (12, 2)
        assert emb.kl_ == emb.kl_history_[-1]
        again = TsneEmbedding(perplexity=3.0, iterations=30, seed=6).fit_transform(x)
        np.testing.assert_array_equal(coords, again)


class TestArtifacts:
    def test_coords_csv(self, tmp_path):
        coords = np.array([[1.5, -2.0], [0.25, 3.75]])
        path = tmp_path / "coords.csv"
        text = save_coords_csv(path, coords, labels=[2, 0])
        lines = text.splitlines()
        assert lines[0] == "id,x,y,label"
        assert len(lines) == 3
        cells = lines[1].split(",")
        assert float(cells[1]) == 1.5 and float(cells[2]) == -2.0
        assert path.read_text() == text

    def test_scatter_png(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(22)
        coords = rng.normal(size=(30, 2))
        labels = rng.integers(0, 6, 30)
        path = tmp_path / "scatter.png"
        scatter_png(path, coords, labels, size=200)
        with Image.open(path) as im:
            assert im.size == (200, 200)
            assert im.mode == "RGB"

    def test_scatter_degenerate_coords(self, tmp_path):
        coords = np.zeros((5, 2))
        scatter_png(tmp_path / "flat.png", coords, labels=np.zeros(5, int), size=100)
        assert (tmp_path / "flat.png").exists()
