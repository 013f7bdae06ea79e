"""Momentum-contrast pretraining of the tile encoder.

A query encoder is trained with an InfoNCE loss that contrasts each query
embedding with the embedding of a second view of the same tile (computed by a
slowly moving key encoder) and with a FIFO queue of earlier keys. The key
encoder is an exponential moving average of the query encoder and never
receives gradients. Optimization uses LARS with a cosine learning-rate decay.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentationConfig, Augmenter
from .core import ParamSet, Tensor, no_grad, ops
from .core.params import CheckpointError, _raw_tensor, read_params, write_params
from .encoder import EncoderConfig, config_of, encode, encode_array, init_encoder, project

__all__ = [
    "MoCoConfig",
    "LarsConfig",
    "MoCoError",
    "NegativeQueue",
    "MoCoState",
    "ema_update",
    "info_nce",
    "lars_step",
    "cosine_lr",
    "pretrain",
    "save_state",
    "load_state",
    "write_loss_csv",
    "MoCoFeatureExtractor",
]


class MoCoError(ValueError):
    pass


@dataclass
class LarsConfig:
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    eta: float = 1e-3


@dataclass
class MoCoConfig:
    momentum: float = 0.999
    temperature: float = 0.2
    queue_size: int = 4096
    batch_size: int = 32
    epochs: int = 1
    lars: LarsConfig = field(default_factory=LarsConfig)
    lr_schedule: str = "cosine"  # or "constant"
    max_steps: int | None = None  # caps the total number of steps when set

    def __post_init__(self):
        if isinstance(self.lars, dict):
            self.lars = LarsConfig(**self.lars)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise MoCoError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise MoCoError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise MoCoError("batch_size must be >= 1 and epochs >= 0")
        if self.queue_size < self.batch_size or self.queue_size % self.batch_size:
            raise MoCoError("queue_size must be a multiple of batch_size and at least one batch")
        if self.lr_schedule not in ("cosine", "constant"):
            raise MoCoError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MoCoConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# queue


class NegativeQueue:
    """Ring buffer of K unit-norm key embeddings; the oldest batch is overwritten first."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator | None = None, data=None):
        if data is not None:
            self.data = np.array(data, dtype=np.float32)
        else:
            rng = rng or np.random.default_rng(0)
            q = rng.standard_normal((size, dim)).astype(np.float32)
            self.data = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.cursor = 0

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float32)
        b = keys.shape[0]
        if b > self.size:
            raise MoCoError(f"batch of {b} keys exceeds queue size {self.size}")
        if keys.shape[1] != self.data.shape[1]:
            raise MoCoError("key dimension does not match the queue")
        end = self.cursor + b
        if end <= self.size:
            self.data[self.cursor:end] = keys
        else:
            split = self.size - self.cursor
            self.data[self.cursor:] = keys[:split]
            self.data[:end - self.size] = keys[split:]
        self.cursor = end % self.size


# ---------------------------------------------------------------------------
# update rules and loss


def ema_update(key_params: ParamSet, query_params: ParamSet, m: float) -> None:
    """key <- m * key + (1 - m) * query for every floating-point tensor, in place."""
    if list(key_params.keys()) != list(query_params.keys()):
        raise MoCoError("key and query parameter names differ")
    for name, k in key_params.items():
        q = query_params[name]
        if k.shape != q.shape:
            raise MoCoError(f"shape mismatch for {name}: {k.shape} vs {q.shape}")
        if k.data.dtype.kind != "f":
            continue
        if m == 1.0:
            continue
        if m == 0.0:
            k.data[...] = q.data
        else:
            k.data[...] = m * k.data + (1.0 - m) * q.data


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    if x.size == 0:
        return
    dev = np.abs(np.linalg.norm(x.astype(np.float64), axis=1) - 1.0).max()
    if dev > 1e-3:
        raise MoCoError(f"{what} rows must be L2-normalized (max deviation {dev:.2e})")


def info_nce(q, k_pos, queue, temperature: float) -> Tensor:
    """Mean over the batch of -log softmax of the positive logit against queued negatives.

    Only ``q`` is differentiated; positives and negatives are treated as constants.
    """
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
    k = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=q.dtype)
    neg = np.asarray(queue.data if isinstance(queue, NegativeQueue) else queue, dtype=q.dtype)
    if temperature <= 0:
        raise MoCoError("temperature must be positive")
    if q.ndim != 2 or k.shape != q.shape or neg.ndim != 2 or neg.shape[1] != q.shape[1]:
        raise MoCoError(f"incompatible shapes q={q.shape} k={k.shape} queue={neg.shape}")
    _check_unit_rows(q.data, "query")
    _check_unit_rows(k, "positive key")
    _check_unit_rows(neg, "queue")
    pos = ops.sum(q * Tensor(k), axis=1, keepdims=True)
    negs = ops.matmul(q, Tensor(neg.T))
    logits = ops.concat([pos, negs], axis=1) * (1.0 / temperature)
    return ops.mean(ops.logsumexp(logits, axis=1) - logits[:, 0])


def lars_step(params: ParamSet, grads: dict, velocity: dict, cfg: LarsConfig, global_lr: float) -> bool:
    """One LARS update in place. Returns False (and changes nothing) if any gradient is non-finite."""
    for name, g in grads.items():
        if g is None:
            continue
        if not np.isfinite(g).all():
            return False
        if g.shape != params[name].shape:
            raise MoCoError(f"gradient shape mismatch for {name}")
    wd = cfg.weight_decay
    for name, g in grads.items():
        if g is None:
            continue
        w = params[name].data
        w_norm = float(np.linalg.norm(w))
        g_norm = float(np.linalg.norm(g))
        if w_norm > 0 and g_norm > 0:
            local_lr = cfg.eta * w_norm / (g_norm + wd * w_norm)
        else:
            local_lr = 1.0
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = cfg.momentum * v + local_lr * (g + wd * w)
        velocity[name] = v.astype(w.dtype, copy=False)
        w -= (global_lr * velocity[name]).astype(w.dtype, copy=False)
    return True


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


# ---------------------------------------------------------------------------
# training state and loop


@dataclass
class MoCoState:
    query_params: ParamSet
    key_params: ParamSet
    queue: NegativeQueue
    step: int = 0
    velocity: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (step, epoch, loss, lr)


def init_state(encoder_config: EncoderConfig, cfg: MoCoConfig, seed: int) -> MoCoState:
    ss = np.random.SeedSequence([seed, 0x4D6F436F])
    init_seed, queue_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    qp = init_encoder(encoder_config, seed=init_seed)
    kp = qp.copy()
    for t in kp.values():
        t.requires_grad = False
    queue = NegativeQueue(cfg.queue_size, encoder_config.projection_dim, np.random.default_rng(queue_seed))
    return MoCoState(qp, kp, queue)


def _to_float(tiles: np.ndarray) -> np.ndarray:
    if tiles.dtype == np.uint8:
        return tiles.astype(np.float32) / np.float32(255.0)
    return tiles.astype(np.float32, copy=False)


def train_step(state: MoCoState, q_views: np.ndarray, k_views: np.ndarray, cfg: MoCoConfig, lr: float) -> float:
    """One optimization step on a batch of view pairs. Returns the loss."""
    qp, kp = state.query_params, state.key_params
    enc_cfg = config_of(qp)
    qp.zero_grad()
    z_q, _ = project(qp, encode(qp, q_views, training=True, config=enc_cfg))
    with no_grad():
        z_k, _ = project(kp, encode(kp, k_views, training=True, config=enc_cfg))
    loss = info_nce(z_q, z_k.data, state.queue, cfg.temperature)
    loss.backward()
    grads = {n: p.grad for n, p in qp.trainable().items()}
    value = float(loss.data)
    if not math.isfinite(value) or not lars_step(qp, grads, state.velocity, cfg.lars, lr):
        raise MoCoError(f"non-finite loss or gradient at step {state.step}")
    ema_update(kp, qp, cfg.momentum)
    state.queue.enqueue(z_k.data)
    state.step += 1
    return value


def pretrain(
    tiles,
    cfg: MoCoConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    aug_config: AugmentationConfig | None = None,
    seed: int = 0,
    state: MoCoState | None = None,
    log=None,
    stop_at: int | None = None,
) -> MoCoState:
    """Train on an indexable stack of tiles (N, S, S, 3); returns the final state.

    ``stop_at`` interrupts the run after that many global steps without changing
    the learning-rate schedule, so the state can be checkpointed and resumed.

    The query encoder in ``state.query_params`` is the pretrained feature extractor.
    """
    cfg = cfg or MoCoConfig()
    encoder_config = encoder_config or EncoderConfig()
    n = len(tiles)
    if n == 0:
        raise MoCoError("empty tile corpus")
    if n < 2 * cfg.batch_size:
        raise MoCoError(f"need at least {2 * cfg.batch_size} tiles, got {n}")
    aug = Augmenter(aug_config or AugmentationConfig(output_size=encoder_config.input_size))
    if aug.config.output_size != encoder_config.input_size:
        raise MoCoError("augmentation output size must equal the encoder input size")
    state = state or init_state(encoder_config, cfg, seed)
    if cfg.momentum == 1.0:
        warnings.warn("momentum 1: the key encoder never moves from its initialization", stacklevel=2)
    steps_per_epoch = n // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    # every epoch order and every batch's augmentations come from their own seed stream, so a
    # run resumed from a checkpoint at step s repeats exactly what an uninterrupted run does
    t0 = time.time()
    end = total if stop_at is None else min(total, stop_at)
    for step in range(state.step, end):
        epoch, b = divmod(step, steps_per_epoch)
        order = np.random.default_rng(np.random.SeedSequence([seed, 0x44617461, epoch])).permutation(n)
        idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
        batch = np.asarray(tiles[idx])
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x41756720, step]))
        qv, kv = aug.batch(batch, aug_rng)
        lr = cosine_lr(cfg.lars.lr, step, total) if cfg.lr_schedule == "cosine" else cfg.lars.lr
        loss = train_step(state, qv, kv, cfg, lr)
        state.history.append((state.step, epoch, loss, lr))
        if log is not None:
            log(state.step, epoch, loss, lr, time.time() - t0)
    return state


# ---------------------------------------------------------------------------
# persistence



def state_to_paramset(state: MoCoState) -> ParamSet:
    out = ParamSet()
    for prefix, src in (("query.", state.query_params), ("key.", state.key_params)):
        for k, v in src.items():
            out._items[prefix + k] = v
    for k, v in state.velocity.items():
        out._items["velocity." + k] = _raw_tensor(np.asarray(v), False)
    out._items["queue.data"] = _raw_tensor(state.queue.data, False)
    out._items["queue.cursor"] = _raw_tensor(np.array([state.queue.cursor], dtype=np.uint32), False)
    out._items["train.step"] = _raw_tensor(np.array([state.step], dtype=np.int64), False)
    return out


def save_state(state: MoCoState, path) -> None:
    """Single file holding both encoders, LARS buffers, queue and step, tagged by name prefix."""
    with open(path, "wb") as fh:
        write_params(state_to_paramset(state), fh)


def load_state(path) -> MoCoState:
    with open(path, "rb") as fh:
        ps = read_params(fh)
    try:
        q = ParamSet()
        k = ParamSet()
        vel = {}
        for name, t in ps.items():
            if name.startswith("query."):
                q._items[name[6:]] = t
            elif name.startswith("key."):
                t.requires_grad = False
                k._items[name[4:]] = t
            elif name.startswith("velocity."):
                vel[name[9:]] = t.data
        # restore trainable flags from the query encoder's own conventions
        template = init_encoder(config_of(q), seed=0)
        for name, t in q.items():
            t.requires_grad = template[name].requires_grad
        queue = NegativeQueue(0, 0, data=ps["queue.data"].data)
        queue.cursor = int(ps["queue.cursor"].data[0])
        step = int(ps["train.step"].data[0])
    except KeyError as exc:
        raise CheckpointError(f"missing section in pretraining checkpoint: {exc}") from None
    return MoCoState(q, k, queue, step, vel)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss", "lr"])
        for step, epoch, loss, lr in history:
            w.writerow([step, epoch, repr(float(loss)), repr(float(lr))])


# ---------------------------------------------------------------------------


class MoCoFeatureExtractor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` pretrains on tiles, ``transform`` returns frozen D-dim features.

    ``X`` is an array of tiles (N, S, S, 3), uint8 or float in [0, 1].
    """

    def __init__(self, epochs=1, batch_size=32, queue_size=4096, momentum=0.999, temperature=0.2,
                 lr=0.2, lars_momentum=0.9, weight_decay=1.5e-6, eta=1e-3, max_steps=None,
                 encoder_config=None, aug_config=None, transform_batch_size=64, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.queue_size = queue_size
        self.momentum = momentum
        self.temperature = temperature
        self.lr = lr
        self.lars_momentum = lars_momentum
        self.weight_decay = weight_decay
        self.eta = eta
        self.max_steps = max_steps
        self.encoder_config = encoder_config
        self.aug_config = aug_config
        self.transform_batch_size = transform_batch_size
        self.random_state = random_state

    def _moco_config(self) -> MoCoConfig:
        return MoCoConfig(momentum=self.momentum, temperature=self.temperature, queue_size=self.queue_size,
                          batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
                          lars=LarsConfig(self.lr, self.lars_momentum, self.weight_decay, self.eta))

    @staticmethod
    def _check_tiles(X, size):
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1:] != (size, size, 3):
            raise ValueError(f"expected tiles of shape (N, {size}, {size}, 3), got {X.shape}")
        if X.dtype != np.uint8:
            X = X.astype(np.float32, copy=False)
            if X.size and (X.min() < 0 or X.max() > 1):
                raise ValueError("float tiles must lie in [0, 1]")
        return X

    def fit(self, X, y=None):
        enc_cfg = self.encoder_config or EncoderConfig()
        X = self._check_tiles(X, enc_cfg.input_size)
        state = pretrain(X, self._moco_config(), enc_cfg, self.aug_config, seed=self.random_state)
        self.encoder_params_ = state.query_params
        self.loss_history_ = [h[2] for h in state.history]
        self.n_features_out_ = enc_cfg.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_params_")
        X = self._check_tiles(X, config_of(self.encoder_params_).input_size)
        return encode_array(self.encoder_params_, X, batch_size=self.transform_batch_size)
