"""Per-slide frozen feature matrices on disk.

HFSX layout (all integers little-endian)::

    b"HFSX" | u16 version | u16 id_len | slide_id utf-8 | u32 N | u32 D
    | 32-byte encoder fingerprint | N x 4 u32 (row, col, x, y) | N x D f32 | u32 CRC32

The CRC covers every byte between the magic and the CRC itself.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import encode_array, fingerprint

__all__ = [
    "FeatureMatrix",
    "FeatureStoreError",
    "IndexEntry",
    "CorpusIndex",
    "write_features",
    "read_features",
    "features_to_bytes",
    "features_from_bytes",
    "extract_features",
    "SlideSource",
]

MAGIC = b"HFSX"
VERSION = 1
FINGERPRINT_BYTES = 32


class FeatureStoreError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    slide_id: str
    data: np.ndarray  # (N, D) float32
    coords: np.ndarray  # (N, 4) uint32: row, col, x, y
    fingerprint: bytes

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise FeatureStoreError(f"feature data must be 2-D, got {self.data.shape}")
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.uint32).reshape(-1, 4))
        if len(self.coords) != len(self.data):
            raise FeatureStoreError(f"{len(self.data)} feature rows but {len(self.coords)} coordinates")
        if not np.isfinite(self.data).all():
            raise FeatureStoreError("feature data must be finite")
        if len(self.fingerprint) != FINGERPRINT_BYTES:
            raise FeatureStoreError("fingerprint must be 32 bytes")

    @property
    def n_tiles(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def is_degenerate(self) -> bool:
        return self.n_tiles == 0

    def equals(self, other: "FeatureMatrix") -> bool:
        return (self.slide_id == other.slide_id and self.fingerprint == other.fingerprint
                and self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()
                and np.array_equal(self.coords, other.coords))


def features_to_bytes(fm: FeatureMatrix) -> bytes:
    sid = fm.slide_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise FeatureStoreError("slide id too long")
    body = b"".join([
        struct.pack("<HH", VERSION, len(sid)),
        sid,
        struct.pack("<II", fm.n_tiles, fm.dim),
        fm.fingerprint,
        fm.coords.astype("<u4").tobytes(),
        fm.data.astype("<f4").tobytes(),
    ])
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def features_from_bytes(blob: bytes) -> FeatureMatrix:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FeatureStoreError("bad magic, not an HFSX feature file")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FeatureStoreError(f"truncated feature file while reading {what} at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, id_len = struct.unpack("<HH", take(4, "header"))
    if version != VERSION:
        raise FeatureStoreError(f"unsupported HFSX version {version}")
    slide_id = take(id_len, "slide id").decode("utf-8")
    n, d = struct.unpack("<II", take(8, "dimensions"))
    fp = take(FINGERPRINT_BYTES, "fingerprint")
    coords_at = pos
    coords = np.frombuffer(take(16 * n, "coordinates"), dtype="<u4").reshape(n, 4)
    payload_at = pos
    data = np.frombuffer(take(4 * n * d, "payload"), dtype="<f4").reshape(n, d)
    crc_at = pos
    (stored,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(blob):
        raise FeatureStoreError(f"{len(blob) - pos} trailing bytes after checksum at byte {pos}")
    actual = zlib.crc32(blob[4:crc_at])
    if actual != stored:
        raise FeatureStoreError(
            f"checksum mismatch (stored {stored:08x}, computed {actual:08x}) for the region "
            f"bytes 4..{crc_at}; coordinates start at byte {coords_at}, payload at byte {payload_at}")
    return FeatureMatrix(slide_id, data.astype(np.float32), coords.astype(np.uint32), bytes(fp))


def write_features(fm: FeatureMatrix, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(features_to_bytes(fm))
    os.replace(tmp, path)


def read_features(path) -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------


@dataclass
class IndexEntry:
    slide_id: str
    label: int
    path: str
    n_tiles: int


@dataclass
class CorpusIndex:
    """Slides whose features were all produced by one encoder (``fingerprint``)."""

    fingerprint: bytes
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FeatureStoreError("duplicate slide ids in corpus index")

    def add(self, entry: IndexEntry, fp: bytes) -> None:
        if fp != self.fingerprint:
            raise FeatureStoreError(
                f"encoder fingerprint {fp.hex()[:12]} does not match corpus {self.fingerprint.hex()[:12]}; "
                "re-extract the whole corpus to change encoders")
        if any(e.slide_id == entry.slide_id for e in self.entries):
            raise FeatureStoreError(f"slide {entry.slide_id!r} already in corpus")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def slide_ids(self) -> list:
        return [e.slide_id for e in self.entries]

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries])

    def resolve(self, entry: IndexEntry, base=None) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or base is None else Path(base) / p

    def load(self, base=None) -> list:
        """Read every matrix, checking each file's fingerprint against the index."""
        out = []
        for e in self.entries:
            fm = read_features(self.resolve(e, base))
            if fm.fingerprint != self.fingerprint:
                raise FeatureStoreError(f"{e.path}: fingerprint differs from the corpus index")
            if fm.slide_id != e.slide_id or fm.n_tiles != e.n_tiles:
                raise FeatureStoreError(f"{e.path}: contents do not match its index entry")
            out.append(fm)
        return out

    def write(self, path) -> None:
        lines = [json.dumps({"slide_id": e.slide_id, "label": int(e.label), "path": e.path,
                             "n_tiles": int(e.n_tiles), "fingerprint": self.fingerprint.hex()})
                 for e in self.entries]
        Path(path).write_text("".join(line + "\n" for line in lines))

    @classmethod
    def read(cls, path) -> "CorpusIndex":
        entries, fps = [], set()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            fps.add(d["fingerprint"])
            entries.append(IndexEntry(d["slide_id"], int(d["label"]), d["path"], int(d["n_tiles"])))
        if len(fps) > 1:
            raise FeatureStoreError("corpus index mixes encoder fingerprints")
        if not fps:
            raise FeatureStoreError("empty corpus index")
        return cls(bytes.fromhex(fps.pop()), entries)


@dataclass
class SlideSource:
    """What extraction needs from one slide: its tiles (or a loader for them) and their coordinates."""

    slide_id: str
    label: int
    coords: np.ndarray  # (N, 4) row, col, x, y
    tiles: object  # (N, S, S, 3) array or zero-argument callable returning one

    def load_tiles(self) -> np.ndarray:
        return self.tiles() if callable(self.tiles) else self.tiles


def extract_features(sources, encoder_params, out_dir, batch_size: int = 64, index_path=None,
                     progress=None) -> CorpusIndex:
    """Encode every slide in eval mode and write one HFSX file per slide.

    With ``index_path`` pointing at an existing index, new slides are appended
    only if the encoder fingerprint matches.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = fingerprint(encoder_params)
    if index_path is not None and Path(index_path).exists():
        index = CorpusIndex.read(index_path)
        if index.fingerprint != fp:
            raise FeatureStoreError(
                "encoder fingerprint differs from the existing corpus; re-extract into a fresh index")
    else:
        index = CorpusIndex(fp)
    for i, src in enumerate(sources):
        tiles = src.load_tiles()
        feats = encode_array(encoder_params, tiles, batch_size=batch_size) if len(tiles) else \
            np.zeros((0, _feature_dim(encoder_params)), dtype=np.float32)
        fm = FeatureMatrix(src.slide_id, feats, src.coords, fp)
        name = f"{src.slide_id}.hfsx"
        write_features(fm, out_dir / name)
        index.add(IndexEntry(src.slide_id, int(src.label), name, fm.n_tiles), fp)
        if progress is not None:
            progress(i + 1, src.slide_id, fm.n_tiles)
    if index_path is not None:
        index.write(index_path)
    return index


def _feature_dim(params) -> int:
    return params["head.fc.w"].shape[1]
