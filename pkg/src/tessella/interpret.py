"""Unsupervised views of tile features: k-means, cosine rankings, lesion-detection AUC, heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .core import ParamSet
from .core.params import CheckpointError, load_params, save_params
from .evaluation import EvalError, auc

__all__ = [
    "InterpretError",
    "ClusterModel",
    "KMeans",
    "kmeans",
    "assign",
    "TileRanking",
    "cosine_similarity",
    "rank_by_cosine",
    "cluster_detection_auc",
    "best_cluster",
    "HeatmapGrid",
    "render_heatmap",
    "top_representatives",
    "write_montage",
    "write_cluster_report",
    "write_representatives_csv",
    "save_cluster_model",
    "load_cluster_model",
]


class InterpretError(ValueError):
    pass


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, D) float64
    inertia: float
    counts: np.ndarray  # (k,) points per cluster
    fingerprint: bytes = b""
    history: list = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def predict(self, features) -> np.ndarray:
        return assign(features, self.centroids)[0]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0)


def assign(features, centroids) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (squared Euclidean, lower id on ties) and its squared distance, per row."""
    X = np.asarray(features, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    lab = _sq_dists(X, C).argmin(axis=1)
    # recompute the chosen distance directly; the expanded form above loses precision near zero
    return lab, ((X - C[lab]) ** 2).sum(axis=1)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; take the next unused index
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(remaining[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[nxt:nxt + 1])[:, 0])
    return X[centers].copy()


def kmeans(features, k: int = 10, seed: int = 0, max_iter: int = 300, tol: float = 1e-4,
           fingerprint: bytes = b"") -> ClusterModel:
    """Lloyd iterations from a k-means++ start.

    Stops when no centroid moves by more than ``tol`` or after ``max_iter``
    iterations. An empty cluster is moved onto the point farthest from its
    current centroid.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InterpretError(f"features must be 2-D, got {X.shape}")
    if k < 1 or len(X) < k:
        raise InterpretError(f"k-means needs at least k={k} points, got {len(X)}")
    if not np.isfinite(X).all():
        raise InterpretError("features must be finite")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4B4D]))
    C = _kmeans_pp(X, k, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        lab, d = assign(X, C)
        counts = np.bincount(lab, minlength=k)
        taken = set()
        for c in np.flatnonzero(counts == 0):
            order = np.argsort(-d, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            lab[far] = c
            d[far] = 0.0
        history.append(float(d.sum()))
        new = np.zeros_like(C)
        np.add.at(new, lab, X)
        new /= np.bincount(lab, minlength=k)[:, None]
        shift = np.sqrt(((new - C) ** 2).sum(1)).max()
        C = new
        if shift < tol:
            break
    lab, d = assign(X, C)
    return ClusterModel(C, float(d.sum()), np.bincount(lab, minlength=k), fingerprint, history, n_iter)


class KMeans(ClusterMixin, BaseEstimator):
    def __init__(self, n_clusters=10, random_state=0, max_iter=300, tol=1e-4):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        self.model_ = kmeans(X, self.n_clusters, self.random_state, self.max_iter, self.tol)
        self.cluster_centers_ = self.model_.centroids
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.n_iter
        self.labels_ = self.model_.predict(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(X)


# ---------------------------------------------------------------------------
# cosine rankings


def cosine_similarity(features, centroid) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of every row with ``centroid``; zero-norm rows get 0 and are flagged."""
    X = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroid, dtype=np.float64).reshape(-1)
    cn = np.linalg.norm(c)
    if cn == 0:
        raise InterpretError("centroid has zero norm")
    xn = np.linalg.norm(X, axis=1)
    zero = xn == 0
    sim = np.zeros(len(X))
    ok = ~zero
    sim[ok] = (X[ok] @ c) / (xn[ok] * cn)
    return np.clip(sim, -1.0, 1.0), zero


@dataclass
class TileRanking:
    cluster: int
    order: np.ndarray  # row indices, most similar first
    similarity: np.ndarray  # similarity of each ranked row, non-increasing
    zero_norm: np.ndarray  # flags, aligned with ``order``
    slide_ids: list = None  # optional per-row owner, aligned with ``order``

    def scores(self) -> np.ndarray:
        """Similarity per original row index."""
        out = np.empty(len(self.order))
        out[self.order] = self.similarity
        return out


def rank_by_cosine(features, centroid, cluster: int = 0, slide_ids=None) -> TileRanking:
    """Rows sorted by cosine similarity, descending and stable; zero-norm rows go last."""
    sim, zero = cosine_similarity(features, centroid)
    order = np.lexsort((np.arange(len(sim)), -sim, zero))
    ids = None if slide_ids is None else [slide_ids[i] for i in order]
    return TileRanking(cluster, order, sim[order], zero[order], ids)


def cluster_detection_auc(ranking, tile_truth) -> float:
    """AUC of the similarity scores against binary per-tile lesion truth."""
    scores = ranking.scores() if isinstance(ranking, TileRanking) else np.asarray(ranking)
    truth = np.asarray(tile_truth).astype(int).reshape(-1)
    if len(np.unique(truth)) < 2:
        raise InterpretError("tile truth must contain both lesion and non-lesion tiles")
    try:
        return auc(scores, truth)
    except EvalError as e:
        raise InterpretError(str(e)) from None


def best_cluster(model: ClusterModel, features, tile_truth) -> tuple[int, list]:
    """(best id, table of (cluster, auc, count)); ties go to the lower id."""
    feats = np.asarray(features, dtype=np.float64)
    table = []
    for c in range(model.k):
        a = cluster_detection_auc(rank_by_cosine(feats, model.centroids[c], c), tile_truth)
        table.append((c, a, int(model.counts[c])))
    aucs = np.array([row[1] for row in table])
    return int(np.argmax(aucs)), table


def top_representatives(model: ClusterModel, features, n: int = 5) -> dict:
    """Per cluster, up to ``n`` (row index, similarity) pairs among its members, most similar first."""
    feats = np.asarray(features, dtype=np.float64)
    lab = model.predict(feats)
    out = {}
    for c in range(model.k):
        members = np.flatnonzero(lab == c)
        if not len(members):
            out[c] = []
            continue
        r = rank_by_cosine(feats[members], model.centroids[c], c)
        out[c] = [(int(members[i]), float(s)) for i, s in zip(r.order[:n], r.similarity[:n])]
    return out


# ---------------------------------------------------------------------------
# outputs


@dataclass
class HeatmapGrid:
    slide_id: str
    values: np.ndarray  # (rows, cols) float, NaN where no tile was retained
    vmin: float
    vmax: float

    def intensity(self) -> np.ndarray:
        """uint8 intensities, linear over [vmin, vmax]; a constant map is drawn at full intensity."""
        v = self.values
        out = np.zeros(v.shape, dtype=np.uint8)
        ok = ~np.isnan(v)
        if self.vmax > self.vmin:
            out[ok] = np.round((v[ok] - self.vmin) / (self.vmax - self.vmin) * 255).astype(np.uint8)
        else:
            out[ok] = 255
        return out


def render_heatmap(grid, scores, path=None, scale: int = 8, vrange=None) -> HeatmapGrid:
    """Place one score per retained tile on the slide's tile grid.

    With ``path`` a grayscale-plus-alpha PNG is written (missing cells fully
    transparent, each cell ``scale`` pixels wide) alongside a CSV of the raw grid.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(grid.tiles):
        raise InterpretError(f"{len(scores)} scores for {len(grid.tiles)} tiles")
    rows, cols = grid.grid_shape
    if grid.tiles:
        # grids read back from CSV do not carry the raster size
        rows = max(rows, max(t.row for t in grid.tiles) + 1)
        cols = max(cols, max(t.col for t in grid.tiles) + 1)
    values = np.full((rows, cols), np.nan)
    for t, s in zip(grid.tiles, scores):
        values[t.row, t.col] = s
    if vrange is None:
        vmin, vmax = (float(scores.min()), float(scores.max())) if len(scores) else (0.0, 0.0)
    else:
        vmin, vmax = map(float, vrange)
    hm = HeatmapGrid(grid.slide_id, values, vmin, vmax)
    if path is not None:
        path = Path(path)
        alpha = np.where(np.isnan(values), 0, 255).astype(np.uint8)
        img = np.stack([hm.intensity(), alpha], axis=-1)
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
        Image.fromarray(img, mode="LA").save(path, format="PNG")
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            for r in range(rows):
                w.writerow(["" if np.isnan(x) else repr(float(x)) for x in values[r]])
    return hm


def write_montage(tiles_by_cluster: dict, path, n: int = 5, thumb: int = 64) -> None:
    """One row per cluster, up to ``n`` tiles per row, blank cells where a cluster has fewer."""
    k = len(tiles_by_cluster)
    canvas = np.full((k * thumb, n * thumb, 3), 255, dtype=np.uint8)
    for r, c in enumerate(sorted(tiles_by_cluster)):
        for j, tile in enumerate(list(tiles_by_cluster[c])[:n]):
            im = Image.fromarray(np.asarray(tile, dtype=np.uint8)).resize((thumb, thumb), Image.BILINEAR)
            canvas[r * thumb:(r + 1) * thumb, j * thumb:(j + 1) * thumb] = np.asarray(im)
    Image.fromarray(canvas).save(path, format="PNG")


def write_cluster_report(table, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "auc", "count"])
        for c, a, n in table:
            w.writerow([c, repr(float(a)), n])


def write_representatives_csv(reps: dict, row_ids, path) -> None:
    """``row_ids[i]`` names feature row i, e.g. (slide_id, tile_index)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "rank", "slide_id", "tile_index", "similarity"])
        for c in sorted(reps):
            for rank, (i, s) in enumerate(reps[c]):
                sid, t = row_ids[i]
                w.writerow([c, rank, sid, t, repr(s)])


def save_cluster_model(model: ClusterModel, path) -> None:
    ps = ParamSet()
    ps.add("centroids", model.centroids.astype(np.float64), trainable=False)
    ps.add("counts", model.counts.astype(np.int64), trainable=False)
    ps.add("inertia", np.array([model.inertia, float(model.n_iter)]), trainable=False)
    ps.add("history", np.asarray(model.history, dtype=np.float64), trainable=False)
    ps.add("fingerprint", np.frombuffer(model.fingerprint, dtype=np.uint8).copy(), trainable=False)
    save_params(ps, path)


def load_cluster_model(path) -> ClusterModel:
    ps = load_params(path, buffer_names=("centroids", "counts", "inertia", "history", "fingerprint"))
    try:
        inertia, n_iter = ps["inertia"].data.tolist()
        return ClusterModel(ps["centroids"].data.astype(np.float64), inertia,
                            ps["counts"].data.astype(np.int64), ps["fingerprint"].data.astype(np.uint8).tobytes(),
                            ps["history"].data.tolist(), int(n_iter))
    except KeyError:
        raise CheckpointError("not a cluster model file") from None
