import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from sklearn.cluster import KMeans as SkKMeans

from tessella.interpret import (
    InterpretError,
    KMeans,
    best_cluster,
    cluster_detection_auc,
    kmeans,
    load_cluster_model,
    rank_by_cosine,
    render_heatmap,
    save_cluster_model,
    top_representatives,
    write_cluster_report,
    write_montage,
    write_representatives_csv,
)
from tessella.slides import TileGrid, TileRef


def _blobs(n_per=200, k=3, d=5, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((k, d)) * 10
    X = np.concatenate([centers[i] + spread * rng.standard_normal((n_per, d)) for i in range(k)])
    return X, np.repeat(np.arange(k), n_per)


def _purity(pred, truth):
    # best one-to-one agreement for few clusters via majority mapping
    agree = 0
    for c in np.unique(pred):
        agree += np.bincount(truth[pred == c]).max()
    return agree / len(truth)


class TestKMeans:
    def test_blobs_recovered(self):
        X, y = _blobs()
        m = kmeans(X, 3, seed=0)
        assert _purity(m.predict(X), y) >= 0.99
        assert m.counts.sum() == len(X)

    def test_k_equals_m(self):
        X = np.random.default_rng(1).standard_normal((6, 3))
        m = kmeans(X, 6, seed=0)
        assert m.inertia == pytest.approx(0, abs=1e-20)
        assert sorted(map(tuple, np.round(m.centroids, 12))) == sorted(map(tuple, np.round(X, 12)))

    def test_inertia_non_increasing(self):
        X = np.random.default_rng(2).standard_normal((500, 4))
        m = kmeans(X, 10, seed=3)
        h = np.array(m.history)
        assert (np.diff(h) <= 1e-9 * h[0]).all()

    def test_fixed_seed(self):
        X = np.random.default_rng(3).standard_normal((300, 4))
        a, b = kmeans(X, 5, seed=7), kmeans(X, 5, seed=7)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_close_to_sklearn(self):
        X = np.random.default_rng(4).standard_normal((400, 3))
        ours = kmeans(X, 4, seed=0).inertia
        ref = SkKMeans(4, n_init=10, random_state=0).fit(X).inertia_
        assert ours <= ref * 1.05

    def test_too_few_points(self):
        with pytest.raises(InterpretError):
            kmeans(np.zeros((3, 2)), 4)

    def test_duplicate_points_fill_clusters(self):
        X = np.array([[0.0, 0]] * 5 + [[1.0, 1]] * 5)
        m = kmeans(X, 3, seed=0)
        assert m.counts.sum() == 10 and np.isfinite(m.centroids).all()

    def test_estimator(self):
        X, y = _blobs(50)
        est = KMeans(n_clusters=3, random_state=0).fit(X)
        assert np.array_equal(est.predict(X), est.labels_)
        assert _purity(est.labels_, y) >= 0.99

    def test_save_load(self, tmp_path):
        X, _ = _blobs(30)
        m = kmeans(X, 3, fingerprint=bytes(range(32)))
        save_cluster_model(m, tmp_path / "k.tnsr")
        back = load_cluster_model(tmp_path / "k.tnsr")
        assert back.centroids.tobytes() == m.centroids.tobytes() and back.fingerprint == m.fingerprint
        assert back.counts.tolist() == m.counts.tolist() and back.history == m.history


class TestRanking:
    def test_self_and_antipode(self):
        c = np.array([1.0, 2.0, -1.0])
        r = rank_by_cosine(np.stack([-c, c * 0.5, np.array([1.0, 0, 0])]), c)
        assert r.order[0] == 1 and r.similarity[0] == pytest.approx(1.0)
        assert r.order[-1] == 0 and r.similarity[-1] == pytest.approx(-1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            X, c = rng.standard_normal((5, 4)), rng.standard_normal(4)
            sims = [float(x @ c / np.sqrt(x @ x) / np.sqrt(c @ c)) for x in X]
            expected = sorted(range(5), key=lambda i: -sims[i])
            r = rank_by_cosine(X, c)
            assert list(r.order) == expected
            assert np.allclose(r.similarity, sorted(sims, reverse=True))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        X, c = rng.standard_normal((50, 6)), rng.standard_normal(6)
        assert np.array_equal(rank_by_cosine(X, c).order, rank_by_cosine(X * 3, c).order)

    def test_zero_rows_last(self):
        X = np.array([[0.0, 0], [-1, 0], [1, 1]])
        r = rank_by_cosine(X, np.array([1.0, 0]))
        assert list(r.order) == [2, 1, 0] and r.zero_norm.tolist() == [False, False, True]
        assert r.similarity[-1] == 0

    def test_zero_centroid(self):
        with pytest.raises(InterpretError):
            rank_by_cosine(np.ones((2, 2)), np.zeros(2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**31))
    def test_non_increasing(self, n, seed):
        X = np.random.default_rng(seed).standard_normal((n, 3))
        r = rank_by_cosine(X, np.ones(3))
        assert (np.diff(r.similarity) <= 0).all()


class TestDetection:
    def test_hand_case(self):
        assert cluster_detection_auc(np.array([0.9, 0.8, 0.7, 0.1]), [1, 0, 1, 0]) == 0.75

    def test_lesion_first(self):
        X = np.array([[1.0, 0], [0.9, 0.1], [0, 1], [0.1, 1]])
        r = rank_by_cosine(X, np.array([1.0, 0]))
        assert cluster_detection_auc(r, [1, 1, 0, 0]) == 1.0

    def test_random_is_half(self):
        rng = np.random.default_rng(0)
        a = cluster_detection_auc(rng.random(10_000), np.arange(10_000) % 2)
        assert abs(a - 0.5) <= 0.02

    def test_single_class(self):
        with pytest.raises(InterpretError):
            cluster_detection_auc(np.array([0.1, 0.2]), [0, 0])

    def test_best_cluster(self):
        X, y = _blobs(100, k=4, seed=1)
        truth = (y == 2).astype(int)
        m = kmeans(X, 4, seed=0)
        best, table = best_cluster(m, X, truth)
        assert len(table) == 4
        assert table[best][1] == max(row[1] for row in table) and table[best][1] > 0.95
        m1 = kmeans(X, 1)
        assert best_cluster(m1, X, truth)[0] == 0


class TestRepresentatives:
    def test_brute_force_1000(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            X = rng.standard_normal((int(rng.integers(4, 30)), 3))
            m = kmeans(X, 3, seed=int(rng.integers(1000)), max_iter=5)
            reps = top_representatives(m, X, n=5)
            lab = m.predict(X)
            for c in range(3):
                members = [i for i in range(len(X)) if lab[i] == c]
                cen = m.centroids[c]
                sims = {i: X[i] @ cen / np.linalg.norm(X[i]) / np.linalg.norm(cen) for i in members}
                expected = sorted(members, key=lambda i: (-sims[i], i))[:5]
                assert [i for i, _ in reps[c]] == expected

    def test_small_cluster(self):
        X = np.concatenate([np.ones((5, 2)) + np.arange(5)[:, None] * [0.01, -0.01], -np.ones((20, 2))])
        m = kmeans(X, 2, seed=0)
        reps = top_representatives(m, X, n=10)
        sizes = sorted(len(v) for v in reps.values())
        assert sizes == [5, 10]


def _grid():
    tiles = [TileRef(r, c, c * 224, r * 224, 1.0) for r in range(3) for c in range(4) if (r, c) != (0, 0)]
    return TileGrid(tiles, slide_id="s0", raster_shape=(3 * 224, 4 * 224))


class TestHeatmap:
    def test_constant(self, tmp_path):
        g = _grid()
        hm = render_heatmap(g, np.full(len(g), 0.3), tmp_path / "h.png", scale=4)
        img = np.asarray(Image.open(tmp_path / "h.png"))
        assert img.shape == (12, 16, 2)
        assert (img[..., 1][:4, :4] == 0).all()  # missing tile transparent
        assert len(np.unique(hm.intensity()[~np.isnan(hm.values)])) == 1
        assert (tmp_path / "h.csv").read_text().splitlines()[0].startswith(",")

    def test_single_max(self):
        g = _grid()
        s = np.zeros(len(g))
        s[5] = 1
        inten = render_heatmap(g, s).intensity()
        assert (inten == 255).sum() == 1
        t = g.tiles[5]
        assert inten[t.row, t.col] == 255

    def test_count_mismatch(self):
        with pytest.raises(InterpretError):
            render_heatmap(_grid(), np.zeros(3))

    def test_outputs(self, tmp_path):
        write_cluster_report([(0, 0.9, 3), (1, 0.4, 2)], tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "cluster,auc,count"
        write_representatives_csv({0: [(1, 0.99)]}, [("a", 0), ("a", 1)], tmp_path / "r.csv")
        assert "a,1" in (tmp_path / "r.csv").read_text()
        tiles = {0: [np.zeros((16, 16, 3), np.uint8)] * 2, 1: []}
        write_montage(tiles, tmp_path / "m.png", n=5, thumb=8)
        assert np.asarray(Image.open(tmp_path / "m.png")).shape == (16, 40, 3)
