"""Multiple-instance heads over frozen tile features, and their training loop.

Three heads map a bag (an N x D feature matrix of one slide) to a slide-level
prediction:

* ``weldon``: tile scorer fc-128 -> fc-1, the R highest and R lowest scores are
  averaged, then a sigmoid.
* ``chowder``: tile scorer fc-1, the 2R extreme scores feed an MLP
  2R -> 200 -> 100 -> 1 with sigmoid activations.
* ``deepmil``: fc-128 embedding, gated attention pooling with 128 hidden units,
  classifier MLP 128 -> 128 -> 64 -> 1 with ReLU, then a sigmoid.

With ``n_classes > 2`` the final layer has one output per class and a softmax
replaces the sigmoid (for Weldon every class gets its own scorer column).

Inputs are whitened with statistics of the training tiles, stored with the
model. Frozen encoder features are often dominated by one or two correlated
directions (and dimensions differ in scale by orders of magnitude); without
whitening the extreme-score heads regularly stall at the chance plateau.
``input_transform="standardize"`` z-scores each dimension instead, ``"none"``
feeds raw features.

A minibatch of bags is evaluated as one graph over the concatenated tiles; the
per-bag selection and attention pooling use segment indices, so gradients are
the same as accumulating bag by bag.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import ParamSet, Tensor, nn, no_grad, ops
from .core.optim import Adam
from .core.params import CheckpointError, _raw_tensor, load_params, save_params

__all__ = [
    "HEADS",
    "MILError",
    "MILTrainConfig",
    "MILModel",
    "extreme_indices",
    "extreme_scores",
    "init_head",
    "head_logits",
    "attention_weights",
    "predict_bag",
    "predict",
    "train_mil",
    "fit_input_transform",
    "fit_standardizer",
    "canonical_order",
    "save_model",
    "load_model",
    "write_train_log",
    "WeldonClassifier",
    "ChowderClassifier",
    "DeepMILClassifier",
]

HEADS = ("weldon", "chowder", "deepmil")
INPUT_TRANSFORMS = ("whiten", "standardize", "none")


class MILError(ValueError):
    pass


@dataclass
class MILTrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    n_classes: int = 2
    R: int = 5
    hidden: int = 128  # width of the Weldon / DeepMIL tile embedding
    input_transform: str = "whiten"  # "whiten", "standardize" or "none", fitted on the training tiles
    whiten_eps: float = 1e-4  # eigenvalue floor, relative to the mean eigenvalue

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.n_classes < 2:
            raise MILError("n_classes must be >= 2")
        if self.R < 1:
            raise MILError("R must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise MILError("epochs must be >= 0 and batch_size >= 1")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise MILError(f"input_transform must be one of {INPUT_TRANSFORMS}")
        if self.whiten_eps <= 0:
            raise MILError("whiten_eps must be > 0")

    @property
    def n_outputs(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class MILModel:
    kind: str
    params: ParamSet
    config: MILTrainConfig
    feature_dim: int
    history: list = field(default_factory=list)  # per-epoch mean train loss
    shift: np.ndarray | None = None  # input transform (x - shift) @ matrix, None for identity
    matrix: np.ndarray | None = None

    def prepare(self, bag: np.ndarray) -> np.ndarray:
        if self.shift is None:
            return bag
        return _apply_transform(bag, self.shift, self.matrix)


# ---------------------------------------------------------------------------
# extreme-score selection


def extreme_indices(scores: np.ndarray, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the R highest (descending) and R lowest (ascending) entries of a 1-D array.

    Ties keep index order in the descending sort, so the lower index is
    preferred for the top set; the two sets never overlap.
    """
    scores = np.asarray(scores).reshape(-1)
    n = scores.size
    if R < 1 or n < 2 * R:
        raise MILError(f"need at least 2R={2 * R} tiles, got {n}")
    order = np.argsort(-scores, kind="stable")
    return order[:R], order[n - R:][::-1]


def extreme_scores(scores, R: int) -> tuple[Tensor, np.ndarray]:
    """(N,) or (N, 1) scores -> the 2R extreme values (top descending, then bottom ascending)."""
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores))
    flat = ops.reshape(s, (-1,))
    top, bottom = extreme_indices(flat.data, R)
    idx = np.concatenate([top, bottom])
    return ops.take(flat, idx), idx


def _effective_R(n: int, R: int, training: bool) -> int:
    if n >= 2 * R:
        return R
    if training:
        raise MILError(f"bag with {n} tiles is smaller than 2R={2 * R}")
    if n < 1:
        raise MILError("empty bag")
    r = max(1, n // 2)
    warnings.warn(f"bag with {n} tiles: using R={r} instead of {R}", stacklevel=3)
    return r


def _extreme_gather_index(s: np.ndarray, offsets, R: int, training: bool) -> np.ndarray:
    """Flat indices into ``s.reshape(-1)`` of shape (B, 2R, C) for every bag and output column.

    For bags smaller than 2R at inference the top and bottom blocks are
    shrunk and then padded by repeating their last entry.
    """
    T, C = s.shape
    B = len(offsets) - 1
    out = np.empty((B, 2 * R, C), dtype=np.int64)
    for b in range(B):
        lo, hi = offsets[b], offsets[b + 1]
        r = _effective_R(hi - lo, R, training)
        for c in range(C):
            col = s[lo:hi, c]
            if hi - lo == 1:
                top = bottom = np.zeros(1, dtype=np.int64)
            else:
                top, bottom = extreme_indices(col, r)
            if r < R:
                top = np.concatenate([top, np.repeat(top[-1:], R - r)])
                bottom = np.concatenate([bottom, np.repeat(bottom[-1:], R - r)])
            out[b, :, c] = (np.concatenate([top, bottom]) + lo) * C + c
    return out


# ---------------------------------------------------------------------------
# heads


def init_head(kind: str, feature_dim: int, config: MILTrainConfig | None = None, seed: int = 0,
              zero: bool = False) -> ParamSet:
    """He init before ReLU / linear layers, Xavier before sigmoid / tanh; ``zero`` gives all-zero weights."""
    cfg = config or MILTrainConfig()
    if kind not in HEADS:
        raise MILError(f"unknown head {kind!r}; expected one of {HEADS}")
    rng = np.random.default_rng(seed)
    p = ParamSet()
    k = cfg.n_outputs
    h = cfg.hidden
    if kind == "weldon":
        nn.add_dense(p, "fc1", feature_dim, h, rng, "xavier")
        nn.add_dense(p, "fc2", h, k, rng, "xavier")
    elif kind == "chowder":
        nn.add_dense(p, "score", feature_dim, 1, rng, "xavier")
        nn.add_dense(p, "mlp1", 2 * cfg.R, 200, rng, "xavier")
        nn.add_dense(p, "mlp2", 200, 100, rng, "xavier")
        nn.add_dense(p, "mlp3", 100, k, rng, "xavier")
    else:
        nn.add_dense(p, "embed", feature_dim, h, rng, "xavier")
        nn.add_dense(p, "att_v", h, h, rng, "xavier")
        nn.add_dense(p, "att_u", h, h, rng, "xavier")
        nn.add_dense(p, "att_w", h, 1, rng, "xavier")
        del p._items["att_w.b"]  # a shift of every logit leaves the softmax unchanged
        nn.add_dense(p, "cls1", h, 128, rng, "he")
        nn.add_dense(p, "cls2", 128, 64, rng, "he")
        nn.add_dense(p, "cls3", 64, k, rng, "xavier")
    if zero:
        for t in p.values():
            t.data[...] = 0
    return p


def _offsets(bags) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([len(b) for b in bags])]).astype(np.int64)


def _stack(bags, dtype) -> Tensor:
    return Tensor(np.concatenate([np.asarray(b, dtype=dtype) for b in bags], axis=0))


def _segment_matrix(offsets, dtype) -> np.ndarray:
    B, T = len(offsets) - 1, offsets[-1]
    S = np.zeros((B, T), dtype=dtype)
    for b in range(B):
        S[b, offsets[b]:offsets[b + 1]] = 1
    return S


def _attention(params: ParamSet, x: Tensor, offsets):
    """Tile embeddings (T, h) and per-bag softmax attention weights (T, 1)."""
    h = nn.dense(params, "embed", x)
    gate = ops.tanh(nn.dense(params, "att_v", h)) * ops.sigmoid(nn.dense(params, "att_u", h))
    logits = ops.matmul(gate, params["att_w.w"])  # (T, 1)
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    # subtracting the per-bag max is a constant shift: it leaves softmax values and gradients unchanged
    shift = np.zeros((len(offsets) - 1, 1), dtype=logits.dtype)
    for b in range(len(offsets) - 1):
        shift[b] = logits.data[offsets[b]:offsets[b + 1]].max()
    e = ops.exp(logits - shift[seg])
    S = _segment_matrix(offsets, logits.dtype)
    denom = ops.matmul(Tensor(S), e)  # (B, 1)
    a = e / ops.take(denom, seg[:, None], axis=0)
    return h, a, S


def head_logits(kind: str, params: ParamSet, bags, R: int = 5, training: bool = False) -> Tensor:
    """Pre-activation outputs (B, k) for a list of bags, k = 1 (binary) or n_classes."""
    if not len(bags):
        raise MILError("no bags")
    for b in bags:
        if len(b) == 0:
            raise MILError("empty bag")
    dtype = next(iter(params.values())).dtype
    x = _stack(bags, dtype)
    offsets = _offsets(bags)
    B = len(bags)
    if kind == "weldon":
        s = nn.dense(params, "fc2", nn.dense(params, "fc1", x))  # (T, k)
        idx = _extreme_gather_index(s.data, offsets, R, training)
        sel = ops.reshape(ops.take(ops.reshape(s, (-1,)), idx.reshape(-1)), idx.shape)
        return ops.mean(sel, axis=1)
    if kind == "chowder":
        s = nn.dense(params, "score", x)  # (T, 1)
        idx = _extreme_gather_index(s.data, offsets, R, training)[:, :, 0]
        z = ops.take(ops.reshape(s, (-1,)), idx.reshape(-1))
        z = ops.reshape(z, (B, 2 * R))
        z = ops.sigmoid(nn.dense(params, "mlp1", z))
        z = ops.sigmoid(nn.dense(params, "mlp2", z))
        return nn.dense(params, "mlp3", z)
    if kind == "deepmil":
        h, a, S = _attention(params, x, offsets)
        pooled = ops.matmul(Tensor(S), a * h)  # (B, h)
        z = ops.relu(nn.dense(params, "cls1", pooled))
        z = ops.relu(nn.dense(params, "cls2", z))
        return nn.dense(params, "cls3", z)
    raise MILError(f"unknown head {kind!r}")


def attention_weights(params: ParamSet, bag) -> np.ndarray:
    """DeepMIL attention weights of one bag (N,), summing to one."""
    dtype = next(iter(params.values())).dtype
    bag = np.asarray(bag, dtype=dtype)
    if len(bag) == 0:
        raise MILError("empty bag")
    with no_grad():
        _, a, _ = _attention(params, Tensor(bag), np.array([0, len(bag)]))
    return a.data[:, 0]


def _loss(logits: Tensor, y: np.ndarray) -> Tensor:
    if logits.shape[1] == 1:
        z = ops.reshape(logits, (-1,))
        yt = y.astype(z.dtype)
        # binary cross-entropy on logits: softplus(z) - y z
        return ops.mean(ops.softplus(z) - z * yt)
    logp = ops.log_softmax(logits, axis=1)
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[y]
    return -ops.mean(ops.sum(logp * onehot, axis=1))


def _probabilities(logits: np.ndarray) -> np.ndarray:
    """(B, 1) -> (B,) sigmoid; (B, C) -> (B, C) softmax."""
    if logits.shape[1] == 1:
        z = logits[:, 0].astype(np.float64)
        return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))
    z = logits.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# inference


def canonical_order(bag: np.ndarray) -> np.ndarray:
    """Row permutation sorting tiles lexicographically by their feature values.

    Evaluating a bag in this order makes predictions bit-identical under any
    shuffling of its tiles.
    """
    bag = np.asarray(bag)
    if bag.ndim != 2:
        raise MILError(f"bag must be 2-D, got shape {bag.shape}")
    if len(bag) <= 1:
        return np.arange(len(bag))
    return np.lexsort(bag.T[::-1])


def _check_bag(model: MILModel, bag) -> np.ndarray:
    bag = np.asarray(bag)
    if bag.ndim != 2 or bag.shape[1] != model.feature_dim:
        raise MILError(f"bag of shape {bag.shape} does not match feature dim {model.feature_dim}")
    if len(bag) == 0:
        raise MILError("empty bag")
    return bag


def predict(model: MILModel, bags, batch_size: int = 64) -> np.ndarray:
    """Binary: (B,) positive-class probabilities. Multiclass: (B, C) rows summing to one."""
    bags = [_check_bag(model, b) for b in bags]
    bags = [model.prepare(b[canonical_order(b)]) for b in bags]
    out = []
    with no_grad():
        for i in range(0, len(bags), batch_size):
            z = head_logits(model.kind, model.params, bags[i:i + batch_size], model.config.R, training=False)
            out.append(_probabilities(z.data))
    return np.concatenate(out, axis=0)


def predict_bag(model: MILModel, bag):
    return predict(model, [bag])[0]


# ---------------------------------------------------------------------------
# training


def fit_standardizer(bags) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std over all tiles; near-constant dimensions keep scale 1."""
    n = sum(len(b) for b in bags)
    if n == 0:
        raise MILError("no tiles to fit the standardizer on")
    total = np.zeros(bags[0].shape[1])
    for b in bags:
        total += b.sum(axis=0, dtype=np.float64)
    mean = total / n
    sq = np.zeros_like(mean)
    for b in bags:
        sq += ((b - mean) ** 2).sum(axis=0)
    std = np.sqrt(sq / n)
    std[std < 1e-6] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def fit_whitener(bags, eps: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """ZCA whitening: mean and symmetric matrix U diag(1/sqrt(lam + eps*mean(lam))) U^T.

    The floor keeps near-null directions (rank-deficient features) from being blown up.
    """
    mean, _ = fit_standardizer(bags)
    mean = mean.astype(np.float64)
    D = len(mean)
    cov = np.zeros((D, D))
    n = 0
    for b in bags:
        c = np.asarray(b, dtype=np.float64) - mean
        cov += c.T @ c
        n += len(b)
    cov /= max(n - 1, 1)
    lam, U = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    floor = eps * lam.mean() if lam.mean() > 0 else 1.0
    W = (U / np.sqrt(lam + floor)) @ U.T
    return mean.astype(np.float32), W.astype(np.float32)


def fit_input_transform(bags, kind: str = "whiten", eps: float = 1e-4):
    """(shift, matrix) for the chosen transform, or (None, None) for ``"none"``."""
    if kind == "none":
        return None, None
    if kind == "standardize":
        mean, std = fit_standardizer(bags)
        return mean, np.diag(1.0 / std).astype(np.float32)
    if kind == "whiten":
        return fit_whitener(bags, eps)
    raise MILError(f"unknown input transform {kind!r}")


def _apply_transform(bag, shift, matrix) -> np.ndarray:
    return ((np.asarray(bag, dtype=np.float32) - shift) @ matrix).astype(np.float32)


def train_mil(kind: str, bags, labels, config: MILTrainConfig | None = None, seed: int = 0,
              log=None) -> MILModel:
    """Adam on the head only; bags are visited in a seeded random order each epoch."""
    cfg = config or MILTrainConfig()
    if kind not in HEADS:
        raise MILError(f"unknown head {kind!r}; expected one of {HEADS}")
    bags = [np.asarray(b, dtype=np.float32) for b in bags]
    y = np.asarray(labels, dtype=np.int64)
    if len(bags) != len(y) or not len(bags):
        raise MILError("need one label per bag and at least one bag")
    dims = {b.shape[1] for b in bags if b.ndim == 2}
    if len(dims) != 1 or any(b.ndim != 2 for b in bags):
        raise MILError("all bags must be 2-D with the same feature dimension")
    D = dims.pop()
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise MILError(f"labels must lie in [0, {cfg.n_classes})")
    missing = set(range(cfg.n_classes)) - set(y.tolist())
    if missing:
        raise MILError(f"class(es) {sorted(missing)} absent from the training set")
    if kind in ("weldon", "chowder"):
        small = [i for i, b in enumerate(bags) if len(b) < 2 * cfg.R]
        if small:
            raise MILError(f"{len(small)} bag(s) have fewer than 2R={2 * cfg.R} tiles")
    elif any(len(b) == 0 for b in bags):
        raise MILError("empty bag")

    shift, matrix = fit_input_transform(bags, cfg.input_transform, cfg.whiten_eps)
    if shift is not None:
        bags = [_apply_transform(b, shift, matrix) for b in bags]

    ss = np.random.SeedSequence([seed, 0x4D494C])
    init_ss, order_ss = ss.spawn(2)
    params = init_head(kind, D, cfg, seed=int(init_ss.generate_state(1)[0]))
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(order_ss)
    model = MILModel(kind, params, cfg, D, shift=shift, matrix=matrix)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(bags))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params.zero_grad()
            loss = _loss(head_logits(kind, params, [bags[i] for i in idx], cfg.R, training=True), y[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        model.history.append(total / len(bags))
        if log is not None:
            log(epoch, model.history[-1])
    return model


# ---------------------------------------------------------------------------
# persistence


def _meta(value: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(value, sort_keys=True).encode(), dtype=np.uint8).copy()


def save_model(model: MILModel, path) -> None:
    """ParamSet file with the head kind, feature dim and training config stored as meta entries."""
    out = ParamSet()
    for k, v in model.params.items():
        out._items[k] = v
    out._items["__head__"] = _raw_tensor(_meta({"kind": model.kind, "feature_dim": model.feature_dim}), False)
    out._items["__train_config__"] = _raw_tensor(_meta(model.config.to_dict()), False)
    if model.shift is not None:
        out._items["__shift__"] = _raw_tensor(model.shift, False)
        out._items["__matrix__"] = _raw_tensor(model.matrix, False)
    save_params(out, path)


def load_model(path) -> MILModel:
    ps = load_params(path)
    try:
        head = json.loads(ps["__head__"].data.tobytes())
        cfg = MILTrainConfig(**json.loads(ps["__train_config__"].data.tobytes()))
    except KeyError:
        raise CheckpointError("not a MIL model checkpoint") from None
    params = ParamSet()
    for k, v in ps.items():
        if not k.startswith("__"):
            params._items[k] = v
    shift = ps["__shift__"].data.copy() if "__shift__" in ps else None
    matrix = ps["__matrix__"].data.copy() if "__matrix__" in ps else None
    return MILModel(head["kind"], params, cfg, int(head["feature_dim"]), shift=shift, matrix=matrix)


def write_train_log(model: MILModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(model.history):
            w.writerow([e, repr(float(loss))])


# ---------------------------------------------------------------------------
# estimator wrappers


class _MILClassifier(ClassifierMixin, BaseEstimator):
    """``X`` is a list of bags, each an (N_i, D) array; ``y`` holds one label per bag."""

    _kind = ""

    def __init__(self, epochs=15, batch_size=16, lr=1e-3, R=5, hidden=128, input_transform="whiten", random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.R = R
        self.hidden = hidden
        self.input_transform = input_transform
        self.random_state = random_state

    @staticmethod
    def _check_bags(X):
        if isinstance(X, np.ndarray) and X.ndim == 2:
            raise ValueError("X must be a sequence of 2-D bags, not a single matrix")
        bags = [np.asarray(b, dtype=np.float32) for b in X]
        if not bags:
            raise ValueError("X contains no bags")
        for b in bags:
            if b.ndim != 2:
                raise ValueError(f"every bag must be 2-D, got shape {b.shape}")
            if not np.isfinite(b).all():
                raise ValueError("bags must contain finite values")
        return bags

    def fit(self, X, y):
        bags = self._check_bags(X)
        y = np.asarray(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = MILTrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, R=self.R,
                             hidden=self.hidden, input_transform=self.input_transform, n_classes=len(self.classes_))
        self.model_ = train_mil(self._kind, bags, codes, cfg, seed=self.random_state)
        self.n_features_in_ = self.model_.feature_dim
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = predict(self.model_, self._check_bags(X))
        return np.column_stack([1 - p, p]) if p.ndim == 1 else p

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class WeldonClassifier(_MILClassifier):
    _kind = "weldon"


class ChowderClassifier(_MILClassifier):
    _kind = "chowder"


class DeepMILClassifier(_MILClassifier):
    _kind = "deepmil"
