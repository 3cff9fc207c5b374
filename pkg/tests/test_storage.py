import json

import numpy as np
import pytest

from kptrain.scenegen import SceneConfig
from kptrain.storage import (
    PairDirectoryDataset,
    generate_dataset,
    load_pair,
    manifest_hash,
    pair_checksum,
    read_manifest,
    save_pair,
    verify_dataset,
)

TINY = SceneConfig(image_size=32, n_tracks=300)


def test_pair_roundtrip(small_pair, tmp_path):
    save_pair(small_pair, tmp_path / "p")
    back = load_pair(tmp_path / "p")
    for a, b in ((small_pair.view_a, back.view_a), (small_pair.view_b, back.view_b)):
        # grids are stored as little-endian float32
        assert np.array_equal(a.image.astype(np.float32), b.image)
        assert np.array_equal(a.depth.astype(np.float32), b.depth)
        assert np.array_equal(a.surface_id, b.surface_id)
        assert np.array_equal(a.valid, b.valid)
        assert a.camera.intrinsics == b.camera.intrinsics
        assert np.array_equal(a.camera.R, b.camera.R) and np.array_equal(a.camera.t, b.camera.t)
    assert np.array_equal(small_pair.tracks.points, back.tracks.points)
    assert np.array_equal(small_pair.tracks.visibility_a, back.tracks.visibility_a)
    assert back.overlap == small_pair.overlap
    # saving the loaded pair reproduces the same bytes
    save_pair(back, tmp_path / "q")
    assert pair_checksum(tmp_path / "p") == pair_checksum(tmp_path / "q")


def test_dataset_deterministic(tmp_path):
    kw = dict(train_seeds=(0, 50), test_seeds=(100, 150), pairs_per_scene=2)
    generate_dataset(tmp_path / "a", TINY, 4, 2, **kw)
    generate_dataset(tmp_path / "b", TINY, 4, 2, **kw)
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    ds = PairDirectoryDataset(tmp_path / "a", cache=True)
    test = PairDirectoryDataset(tmp_path / "a", split="test")
    assert len(ds) == 4 and len(test) == 2
    assert ds[0] is ds[0]
    assert verify_dataset(tmp_path / "a") == []


def test_dataset_refuses_overlapping_seeds(tmp_path):
    with pytest.raises(ValueError, match="overlap"):
        generate_dataset(tmp_path, TINY, 1, 1, train_seeds=(0, 10), test_seeds=(5, 15))


def test_verify_detects_tampering(tmp_path):
    m = generate_dataset(tmp_path, TINY, 2, 1, train_seeds=(0, 20), test_seeds=(100, 120), pairs_per_scene=2)
    victim = tmp_path / m["train"][0]
    f = sorted(p for p in victim.iterdir() if p.is_file())[0]
    f.write_bytes(f.read_bytes() + b" ")
    assert verify_dataset(tmp_path) == [m["train"][0]]


def test_manifest_format_checked(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        read_manifest(tmp_path)


def test_unreachable_count_raises(tmp_path):
    with pytest.raises(RuntimeError):
        generate_dataset(tmp_path, TINY, 50, 0, train_seeds=(0, 2), pairs_per_scene=2)
