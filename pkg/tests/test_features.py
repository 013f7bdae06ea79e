import struct
import zlib

import numpy as np
import pytest

from tessella.encoder import EncoderConfig, fingerprint, init_encoder
from tessella.features import (
    CorpusIndex,
    FeatureMatrix,
    FeatureStoreError,
    IndexEntry,
    SlideSource,
    extract_features,
    features_from_bytes,
    features_to_bytes,
    read_features,
    write_features,
)

FP = bytes(range(32))
ENC = EncoderConfig(stage_channels=[8, 16], blocks_per_stage=1, feature_dim=16, projection_dim=8,
                    input_size=32, stem_patch=4, stem_pool=2)


def _fm(n=5, d=3, sid="slide_a", seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([np.arange(n), np.arange(n) * 2, np.arange(n) * 224, np.arange(n) * 448])
    return FeatureMatrix(sid, rng.standard_normal((n, d)).astype(np.float32), coords, FP)


class TestFormat:
    def test_round_trip(self, tmp_path):
        fm = _fm()
        write_features(fm, tmp_path / "a.hfsx")
        assert read_features(tmp_path / "a.hfsx").equals(fm)

    def test_layout(self):
        fm = _fm(n=2, d=3, sid="ab")
        blob = features_to_bytes(fm)
        assert blob[:4] == b"HFSX"
        assert struct.unpack_from("<HH", blob, 4) == (1, 2)
        assert blob[8:10] == b"ab"
        assert struct.unpack_from("<II", blob, 10) == (2, 3)
        assert blob[18:50] == FP
        assert np.frombuffer(blob[50:50 + 32], dtype="<u4").reshape(2, 4).tolist() == fm.coords.tolist()
        assert np.frombuffer(blob[82:82 + 24], dtype="<f4").reshape(2, 3).tobytes() == fm.data.tobytes()
        assert len(blob) == 82 + 24 + 4
        assert struct.unpack_from("<I", blob, 106)[0] == zlib.crc32(blob[4:106])

    def test_single_byte_corruption_detected(self):
        blob = bytearray(features_to_bytes(_fm(n=8, d=4)))
        rng = np.random.default_rng(0)
        header = 4 + 4 + len("slide_a") + 8
        for pos in rng.integers(header, len(blob) - 4, 50):
            bad = bytearray(blob)
            bad[pos] ^= 0x01
            with pytest.raises(FeatureStoreError, match="checksum"):
                features_from_bytes(bytes(bad))

    def test_payload_flip_reports_position(self):
        blob = bytearray(features_to_bytes(_fm()))
        blob[-8] ^= 0xFF
        with pytest.raises(FeatureStoreError, match="payload at byte"):
            features_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = features_to_bytes(_fm())
        for cut in (3, 10, 40, len(blob) - 1):
            with pytest.raises(FeatureStoreError):
                features_from_bytes(blob[:cut])

    def test_bad_magic(self):
        with pytest.raises(FeatureStoreError, match="magic"):
            features_from_bytes(b"XXXX" + features_to_bytes(_fm())[4:])

    def test_empty_matrix(self, tmp_path):
        fm = FeatureMatrix("empty", np.zeros((0, 128), np.float32), np.zeros((0, 4)), FP)
        assert fm.is_degenerate
        write_features(fm, tmp_path / "e.hfsx")
        back = read_features(tmp_path / "e.hfsx")
        assert back.equals(fm) and back.is_degenerate and back.dim == 128

    def test_invariants(self):
        with pytest.raises(FeatureStoreError):
            FeatureMatrix("x", np.zeros((3, 2)), np.zeros((2, 4)), FP)
        with pytest.raises(FeatureStoreError):
            FeatureMatrix("x", np.full((1, 2), np.nan), np.zeros((1, 4)), FP)
        with pytest.raises(FeatureStoreError):
            FeatureMatrix("x", np.zeros((1, 2)), np.zeros((1, 4)), b"")


class TestIndex:
    def test_jsonl_round_trip(self, tmp_path):
        idx = CorpusIndex(FP, [IndexEntry("a", 1, "a.hfsx", 10), IndexEntry("b", 0, "b.hfsx", 0)])
        idx.write(tmp_path / "index.jsonl")
        back = CorpusIndex.read(tmp_path / "index.jsonl")
        assert back.fingerprint == FP and back.entries == idx.entries

    def test_mixed_fingerprints_rejected(self):
        idx = CorpusIndex(FP)
        with pytest.raises(FeatureStoreError, match="fingerprint"):
            idx.add(IndexEntry("a", 1, "a.hfsx", 1), bytes(32))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(FeatureStoreError):
            CorpusIndex(FP, [IndexEntry("a", 1, "p", 1), IndexEntry("a", 0, "q", 1)])


def _tiles(n, seed=0):
    return (np.random.default_rng(seed).random((n, 32, 32, 3)) * 255).astype(np.uint8)


def _coords(n):
    return np.column_stack([np.zeros(n), np.arange(n), np.zeros(n), np.arange(n) * 32])


class TestExtract:
    def test_shapes_and_duplicates(self, tmp_path):
        p = init_encoder(ENC, seed=0)
        t = _tiles(100)
        t[7] = t[3]
        idx = extract_features([SlideSource("s1", 1, _coords(100), t)], p, tmp_path / "f", batch_size=32)
        fm = idx.load(tmp_path / "f")[0]
        assert fm.data.shape == (100, 16)
        assert np.array_equal(fm.data[7], fm.data[3])
        assert fm.fingerprint == fingerprint(p)

    def test_deterministic_files(self, tmp_path):
        p = init_encoder(ENC, seed=0)
        srcs = [SlideSource("s1", 0, _coords(5), _tiles(5)), SlideSource("s2", 1, _coords(3), lambda: _tiles(3, 1))]
        extract_features(srcs, p, tmp_path / "a", index_path=tmp_path / "a.jsonl")
        extract_features(srcs, p, tmp_path / "b", index_path=tmp_path / "b.jsonl")
        for s in ("s1", "s2"):
            assert (tmp_path / "a" / f"{s}.hfsx").read_bytes() == (tmp_path / "b" / f"{s}.hfsx").read_bytes()

    def test_append_requires_same_encoder(self, tmp_path):
        p = init_encoder(ENC, seed=0)
        extract_features([SlideSource("s1", 0, _coords(2), _tiles(2))], p, tmp_path, index_path=tmp_path / "i.jsonl")
        extract_features([SlideSource("s2", 0, _coords(2), _tiles(2))], p, tmp_path, index_path=tmp_path / "i.jsonl")
        assert CorpusIndex.read(tmp_path / "i.jsonl").slide_ids() == ["s1", "s2"]
        other = init_encoder(ENC, seed=1)
        with pytest.raises(FeatureStoreError, match="fingerprint"):
            extract_features([SlideSource("s3", 0, _coords(2), _tiles(2))], other, tmp_path,
                             index_path=tmp_path / "i.jsonl")

    def test_slide_without_tiles(self, tmp_path):
        p = init_encoder(ENC, seed=0)
        idx = extract_features([SlideSource("s0", 0, np.zeros((0, 4)), np.zeros((0, 32, 32, 3), np.uint8))],
                               p, tmp_path)
        assert idx.load(tmp_path)[0].is_degenerate
