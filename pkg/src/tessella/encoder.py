"""Small residual CNN tile encoder with a contrastive projection head.

Layout: patchify stem (8x8 conv, stride 8) -> 2x2 max pool -> residual stages
(the first block of every stage after the first halves the resolution) ->
global average pool -> linear map to D features. The projection head is a
2-layer MLP D -> D -> d whose output is L2-normalized.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ParamSet, Tensor, no_grad, nn, ops
from .core.params import CheckpointError, read_params, write_params

__all__ = [
    "EncoderConfig",
    "EncoderError",
    "init_encoder",
    "encode",
    "project",
    "encode_array",
    "save_encoder",
    "load_encoder",
    "encoder_to_bytes",
    "encoder_from_bytes",
    "fingerprint",
]

CONFIG_ENTRY = "__encoder_config__"
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    feature_dim: int = 128
    projection_dim: int = 64
    use_residual: bool = True
    input_size: int = 224
    stem_patch: int = 8
    stem_pool: int = 2
    feature_activation: str = "none"  # "relu" makes the pooling head fc-ReLU

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) < 1 or min(self.stage_channels) < 1:
            raise EncoderError("need at least one stage with positive width")
        if self.feature_dim < 8 or self.projection_dim < 8:
            raise EncoderError("feature_dim and projection_dim must be >= 8")
        if self.blocks_per_stage < 1:
            raise EncoderError("blocks_per_stage must be >= 1")
        if self.feature_activation not in ("none", "relu"):
            raise EncoderError(f"unknown feature_activation {self.feature_activation!r}")
        side = self.input_size
        if side % self.stem_patch:
            raise EncoderError(f"input_size {side} not divisible by stem_patch {self.stem_patch}")
        side //= self.stem_patch * self.stem_pool
        if side < 2 ** (len(self.stage_channels) - 1):
            raise EncoderError(f"input_size {self.input_size} too small for {len(self.stage_channels)} stages")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _block_names(cfg: EncoderConfig):
    for s, width in enumerate(cfg.stage_channels):
        for b in range(cfg.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            c_in = cfg.stage_channels[s - 1] if (s > 0 and b == 0) else width
            yield f"stage{s}.block{b}", c_in, width, stride


def init_encoder(config: EncoderConfig | None = None, seed: int = 0) -> ParamSet:
    """Fan-in scaled (He) weights, batch-norm scale 1 and shift 0. Deterministic in ``seed``."""
    cfg = config or EncoderConfig()
    rng = np.random.default_rng(seed)
    p = ParamSet()
    c0 = cfg.stage_channels[0]
    k = cfg.stem_patch
    p.add("stem.conv.w", nn.he_normal(rng, (k, k, 3, c0), k * k * 3))
    nn.add_batch_norm(p, "stem.bn", c0)
    for name, c_in, c_out, stride in _block_names(cfg):
        p.add(f"{name}.conv1.w", nn.he_normal(rng, (3, 3, c_in, c_out), 9 * c_in))
        nn.add_batch_norm(p, f"{name}.bn1", c_out)
        p.add(f"{name}.conv2.w", nn.he_normal(rng, (3, 3, c_out, c_out), 9 * c_out))
        nn.add_batch_norm(p, f"{name}.bn2", c_out)
        if cfg.use_residual and (stride != 1 or c_in != c_out):
            p.add(f"{name}.short.w", nn.he_normal(rng, (1, 1, c_in, c_out), c_in))
            nn.add_batch_norm(p, f"{name}.short_bn", c_out)
    nn.add_dense(p, "head.fc", cfg.stage_channels[-1], cfg.feature_dim, rng)
    nn.add_dense(p, "proj.fc1", cfg.feature_dim, cfg.feature_dim, rng)
    nn.add_dense(p, "proj.fc2", cfg.feature_dim, cfg.projection_dim, rng)
    p.add(CONFIG_ENTRY, np.frombuffer(json.dumps(cfg.to_dict()).encode(), dtype=np.uint8).copy(),
          trainable=False)
    return p


def config_of(params: ParamSet) -> EncoderConfig:
    if CONFIG_ENTRY not in params:
        raise EncoderError("parameter set carries no encoder config")
    return EncoderConfig.from_dict(json.loads(params[CONFIG_ENTRY].data.tobytes().decode()))


def _check_input(x, cfg: EncoderConfig):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    s = cfg.input_size
    if arr.ndim != 4 or arr.shape[1:] != (s, s, 3):
        raise EncoderError(f"expected a (B, {s}, {s}, 3) batch, got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
        raise EncoderError("pixel values must lie in [0, 1]")


def _conv_bn(p, name, bn, x, training, stride=1, padding=1):
    y = ops.conv2d(x, p[f"{name}.w"], stride=stride, padding=padding)
    return nn.batch_norm(p, bn, y, training)


def encode(params: ParamSet, x, training: bool = False, config: EncoderConfig | None = None) -> Tensor:
    """(B, S, S, 3) pixels in [0, 1] -> (B, D) features."""
    cfg = config or config_of(params)
    _check_input(x, cfg)
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    h = (x - PIXEL_MEAN) * (1.0 / PIXEL_STD)
    h = _conv_bn(params, "stem.conv", "stem.bn", h, training, stride=cfg.stem_patch, padding=0)
    h = ops.relu(h)
    if cfg.stem_pool > 1:
        h = ops.max_pool2d(h, cfg.stem_pool)
    for name, c_in, c_out, stride in _block_names(cfg):
        y = ops.relu(_conv_bn(params, f"{name}.conv1", f"{name}.bn1", h, training, stride=stride))
        y = _conv_bn(params, f"{name}.conv2", f"{name}.bn2", y, training)
        if cfg.use_residual:
            if f"{name}.short.w" in params:
                sc = _conv_bn(params, f"{name}.short", f"{name}.short_bn", h, training, stride=stride, padding=0)
            else:
                sc = h
            y = y + sc
        h = ops.relu(y)
    h = ops.global_avg_pool(h)
    f = nn.dense(params, "head.fc", h)
    return ops.relu(f) if cfg.feature_activation == "relu" else f


def project(params: ParamSet, features) -> tuple[Tensor, np.ndarray]:
    """(B, D) features -> (B, d) unit-norm embeddings and a per-row zero-vector flag."""
    f = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if f.ndim != 2 or not np.isfinite(f.data).all():
        raise EncoderError("project expects finite (B, D) features")
    h = ops.relu(nn.dense(params, "proj.fc1", f))
    z = nn.dense(params, "proj.fc2", h)
    return ops.l2_normalize(z, axis=1)


def encode_array(params: ParamSet, tiles, batch_size: int = 64, progress=None) -> np.ndarray:
    """Inference-mode features for an array (N, S, S, 3) of uint8 or [0, 1] float tiles."""
    cfg = config_of(params)
    n = len(tiles)
    out = np.empty((n, cfg.feature_dim), dtype=np.float32)
    with no_grad():
        for i in range(0, n, batch_size):
            chunk = np.asarray(tiles[i:i + batch_size])
            if chunk.dtype == np.uint8:
                chunk = chunk.astype(np.float32) / np.float32(255.0)
            out[i:i + len(chunk)] = encode(params, chunk, training=False, config=cfg).data
            if progress is not None:
                progress(min(i + batch_size, n), n)
    return out


def encoder_to_bytes(params: ParamSet) -> bytes:
    config_of(params)
    buf = io.BytesIO()
    write_params(params, buf)
    return buf.getvalue()


def encoder_from_bytes(blob: bytes) -> ParamSet:
    p = read_params(io.BytesIO(blob))
    try:
        config_of(p)
    except (EncoderError, ValueError, TypeError) as exc:
        raise CheckpointError(f"not an encoder checkpoint: {exc}") from None
    return p


def save_encoder(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encoder_to_bytes(params))


def load_encoder(path) -> ParamSet:
    with open(path, "rb") as fh:
        return encoder_from_bytes(fh.read())


def fingerprint(params: ParamSet) -> bytes:
    """SHA-256 of the serialized encoder; identifies which weights produced a feature file."""
    return params.checksum()
