"""
Tests for feature files, manifests, batching and the synthetic corpus.
"""

import os
import struct
import tempfile

import numpy as np
import pytest
from pydantic import ValidationError

from lightdarts.data import (
    Dataset,
    FeatureMatrix,
    artifact_energy,
    batches,
    fix_frames,
    gen_synthetic,
    load_feature,
    load_manifest,
    permutation,
    resolve_feature_dim,
    store_feature,
    synthetic_utterance,
    write_manifest,
)
from lightdarts.exceptions import DatasetError, FeatureFormatError, ManifestError
from lightdarts.models import ManifestEntry


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


def _write(path, data: bytes):
    with open(path, "wb") as f:
        f.write(data)


def test_feature_file_layout(temp_dir):
    """Test the FAFD header and float32 payload."""
    values = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = os.path.join(temp_dir, "a.fafd")
    store_feature(FeatureMatrix(values=values), path)
    with open(path, "rb") as f:
        raw = f.read()
    assert raw[:4] == b"FAFD"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
    assert len(raw) == 16 + 6 * 4
    np.testing.assert_array_equal(load_feature(path).values, values)


@pytest.mark.parametrize(
    "raw, message",
    [
        (b"XXXX" + struct.pack("<III", 1, 1, 1) + b"\0" * 4, "bad magic"),
        (b"FAFD" + struct.pack("<III", 2, 1, 1) + b"\0" * 4, "version"),
        (b"FAFD" + struct.pack("<III", 1, 2**20, 2**20), "overflow"),
        (b"FAFD" + struct.pack("<III", 1, 2, 2) + b"\0" * 12, "truncated"),
        (b"FAFD" + struct.pack("<III", 1, 1, 1) + b"\0" * 8, "trailing"),
        (b"FAFD" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", float("nan")), "NaN"),
        (b"FAF", "bad magic"),
        (b"FAFD" + struct.pack("<I", 1), "truncated header"),
    ],
)
def test_bad_feature_files(temp_dir, raw, message):
    """Test that every corruption gets its own error."""
    path = os.path.join(temp_dir, "bad.fafd")
    _write(path, raw)
    with pytest.raises(FeatureFormatError, match=message):
        load_feature(path)


def test_feature_matrix_validation():
    """Test that empty and non-finite matrices are rejected."""
    with pytest.raises(ValidationError):
        FeatureMatrix(values=np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        FeatureMatrix(values=np.array([[np.inf]]))


def test_fix_frames_truncates_and_repeats():
    """Test head truncation and cyclic repetition."""
    matrix = FeatureMatrix(values=np.arange(3.0)[:, None])
    np.testing.assert_array_equal(fix_frames(matrix, 2).values[:, 0], [0.0, 1.0])
    np.testing.assert_array_equal(fix_frames(matrix, 7).values[:, 0], [0, 1, 2, 0, 1, 2, 0])
    assert fix_frames(matrix, 3) is matrix
    with pytest.raises(ValueError):
        fix_frames(matrix, 0)


@pytest.mark.parametrize("target", [1, 2, 3, 7, 400])
def test_fix_frames_is_idempotent(target):
    """Test that fixing an already fixed matrix changes nothing."""
    matrix = FeatureMatrix(values=np.random.default_rng(target).standard_normal((3, 4)))
    once = fix_frames(matrix, target)
    twice = fix_frames(once, target)
    assert once.frames == target
    np.testing.assert_array_equal(twice.values, once.values)


def test_manifest_round_trip_and_blank_lines(temp_dir):
    """Test writing, reading and skipping blank lines."""
    entries = [
        ManifestEntry(utt_id="u1", path="f/u1.fafd", label="bonafide"),
        ManifestEntry(utt_id="u2", path="f/u2.fafd", label="unknown"),
    ]
    path = os.path.join(temp_dir, "m.tsv")
    write_manifest(entries, path)
    with open(path, "a", encoding="utf-8") as f:
        f.write("\n\n")
    assert load_manifest(path) == entries


@pytest.mark.parametrize(
    "text, line, message",
    [
        ("u1\ta.fafd\tbonafide\nu2\tb.fafd\n", 2, "3 tab-separated"),
        ("u1\ta.fafd\tbonafide\n\nu1\tb.fafd\tspoof\n", 3, "duplicate"),
        ("u1\ta.fafd\tfake\n", 1, "unknown label"),
        ("\ta.fafd\tspoof\n", 1, "at least 1"),
    ],
)
def test_manifest_errors(temp_dir, text, line, message):
    """Test manifest errors carry the line number."""
    path = os.path.join(temp_dir, "m.tsv")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    with pytest.raises(ManifestError, match=message) as exc_info:
        load_manifest(path)
    assert exc_info.value.line == line


def test_dataset_features_and_errors(temp_dir):
    """Test frame fixing, caching and missing files."""
    matrix = FeatureMatrix(values=np.ones((3, 4), dtype=np.float32))
    store_feature(matrix, os.path.join(temp_dir, "a.fafd"))
    entries = [
        ManifestEntry(utt_id="a", path="a.fafd", label="spoof"),
        ManifestEntry(utt_id="missing", path="nope.fafd", label="bonafide"),
    ]
    dataset = Dataset(entries, temp_dir, frames=5)
    assert dataset.features(0).shape == (5, 4)
    assert dataset.features(0) is dataset.features(0)
    assert dataset.feature_dim == 4
    np.testing.assert_array_equal(dataset.labels, [1, 0])
    with pytest.raises(DatasetError) as exc_info:
        dataset.features(1)
    assert exc_info.value.utt_id == "missing"


def test_unknown_labels_map_to_minus_one(temp_dir):
    """Test unlabeled entries."""
    dataset = Dataset([ManifestEntry(utt_id="x", path="x.fafd", label="unknown")], temp_dir)
    np.testing.assert_array_equal(dataset.labels, [-1])
    assert not dataset.labeled


def test_batches_cover_epoch_deterministically(temp_dir):
    """Test that each epoch visits every entry once in a seeded order."""
    manifests = gen_synthetic(temp_dir, {"train": 10, "val": 1, "eval": 1}, frames=8, dims=8)
    dataset = Dataset.from_manifest(manifests["train"], frames=8)
    first = list(batches(dataset, 4, seed=3, epoch=0))
    again = list(batches(dataset, 4, seed=3, epoch=0))
    other = list(batches(dataset, 4, seed=3, epoch=1))
    assert [len(b.utt_ids) for b in first] == [4, 4, 2]
    assert sorted(u for b in first for u in b.utt_ids) == sorted(dataset.utt_ids)
    assert [b.utt_ids for b in first] == [b.utt_ids for b in again]
    assert [b.utt_ids for b in first] != [b.utt_ids for b in other]
    assert first[0].features.shape == (4, 8, 8)
    np.testing.assert_array_equal(permutation(10, 3, 0), permutation(10, 3, 0))
    with pytest.raises(ValueError):
        next(batches(dataset, 0, seed=0, epoch=0))


def test_gen_synthetic_layout_and_determinism(temp_dir):
    """Test ids, paths, alternating labels and byte-identical reruns."""
    first_dir = os.path.join(temp_dir, "a")
    second_dir = os.path.join(temp_dir, "b")
    manifests = gen_synthetic(first_dir, 4, frames=8, dims=10, seed=9)
    gen_synthetic(second_dir, 4, frames=8, dims=10, seed=9)
    entries = load_manifest(manifests["val"])
    assert [e.utt_id for e in entries] == ["val_00000", "val_00001", "val_00002", "val_00003"]
    assert [e.label for e in entries] == ["bonafide", "spoof", "bonafide", "spoof"]
    assert entries[1].path == "features/val/val_00001.fafd"
    for split in ("train", "val", "eval"):
        for i in range(4):
            rel = os.path.join("features", split, f"{split}_{i:05d}.fafd")
            with open(os.path.join(first_dir, rel), "rb") as f1:
                with open(os.path.join(second_dir, rel), "rb") as f2:
                    assert f1.read() == f2.read()
    sample = load_feature(os.path.join(first_dir, "features/train/train_00000.fafd"))
    assert sample.values.shape == (8, 10)


def test_gen_synthetic_rejects_small_shapes(temp_dir):
    """Test the minimum T and F."""
    with pytest.raises(ValueError):
        gen_synthetic(temp_dir, 2, frames=4, dims=16)


def test_spoofed_utterances_carry_artifact_energy():
    """Test that the checkerboard separates the classes by artifact energy."""
    rng = np.random.default_rng(0)
    bona = [artifact_energy(synthetic_utterance(rng, False, 40, 16)) for _ in range(20)]
    spoof = [artifact_energy(synthetic_utterance(rng, True, 40, 16)) for _ in range(20)]
    assert max(bona) < min(spoof)


def test_resolve_feature_dim():
    """Test integer and preset feature dimensions."""
    assert resolve_feature_dim("desk") == 16
    assert resolve_feature_dim("wav2vec2-large") == 1024
    assert resolve_feature_dim("80") == 80
    assert resolve_feature_dim(None) is None
    with pytest.raises(ValueError):
        resolve_feature_dim("mfcc")
