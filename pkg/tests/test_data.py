import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audiogaze import data
from audiogaze.data import GazeTrajectory, TimedWord
from audiogaze.errors import ParseError, TooFewScenes, ValidationError

from conftest import tiny_bundle


def test_minimal_bundle():
    b = tiny_bundle(n_words=2, subjects=2)
    assert b.n_words == 2 and b.n_subjects == 2
    assert b.patch_centers.shape == (16, 2)
    assert b.image_size == (1024.0, 1024.0)


def test_short_trajectory_rejected():
    b = tiny_bundle(n_words=3)
    bad = GazeTrajectory(1, b.trajectories[0].points[:2])
    with pytest.raises(ValidationError, match="trajectory length"):
        data.make_bundle(b.scene_id, b.image_size, b.patch_centers, b.patch_embeddings,
                         b.salient_point, b.words, (bad,) + b.trajectories[1:])


def _rebuild(b, **changes):
    fields = dict(scene_id=b.scene_id, image_size=b.image_size, patch_centers=b.patch_centers,
                  patch_embeddings=b.patch_embeddings, salient_point=b.salient_point,
                  words=b.words, trajectories=b.trajectories)
    fields.update(changes)
    return data.make_bundle(grid_n=b.grid_n, **fields)


def test_one_subject_rejected():
    b = tiny_bundle()
    with pytest.raises(ValidationError, match="at least 2"):
        _rebuild(b, trajectories=b.trajectories[:1])


def test_overlapping_words_rejected():
    b = tiny_bundle(n_words=2)
    w2 = dataclasses.replace(b.words[1], t_start=b.words[0].t_end - 0.1)
    with pytest.raises(ValidationError, match="overlaps"):
        _rebuild(b, words=(b.words[0], w2))


def test_wrong_word_dim_rejected():
    b = tiny_bundle(n_words=2)
    w = dataclasses.replace(b.words[1], embedding=np.zeros(3))
    with pytest.raises(ValidationError, match="word 2 embedding dimension"):
        _rebuild(b, words=(b.words[0], w))


def test_point_outside_image_rejected():
    b = tiny_bundle()
    pts = b.trajectories[0].points.copy()
    pts[0, 0] = 2000.0
    with pytest.raises(ValidationError, match="outside"):
        _rebuild(b, trajectories=(GazeTrajectory(1, pts),) + b.trajectories[1:])


def test_centers_on_border_rejected():
    b = tiny_bundle()
    c = b.patch_centers.copy()
    c[0] = [0.0, 10.0]
    with pytest.raises(ValidationError, match="strictly inside"):
        _rebuild(b, patch_centers=c)


def test_wrong_grid_count_rejected():
    b = tiny_bundle()
    with pytest.raises(ValidationError, match="patch grid"):
        _rebuild(b, patch_centers=b.patch_centers[:15], patch_embeddings=b.patch_embeddings[:15])


def test_roundtrip_synthetic(tmp_path, synth_small):
    for b in synth_small:
        p = tmp_path / f"{b.scene_id}.json"
        data.save_bundle(b, p)
        assert data.load_bundle(p) == b


def test_file_format_keys(tmp_path):
    b = tiny_bundle()
    p = tmp_path / "b.json"
    data.save_bundle(b, p)
    doc = json.loads(p.read_text())
    assert set(doc) == {"scene_id", "image_size", "embed_dim", "grid_n", "patches",
                        "salient_point", "words", "trajectories"}
    assert doc["words"][1]["grounded"] is None
    assert set(doc["words"][0]["grounded"]) == {"center", "emb"}


def test_malformed_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        data.load_bundle(p)
    p.write_text(json.dumps({"scene_id": "a"}))
    with pytest.raises(ParseError):
        data.load_bundle(p)
    with pytest.raises(ParseError):
        data.load_bundle(tmp_path / "missing.json")


def test_validation_happens_at_load(tmp_path):
    b = tiny_bundle(n_words=3)
    doc = data.bundle_to_dict(b)
    doc["trajectories"][0]["points"].pop()
    p = tmp_path / "b.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="trajectory length"):
        data.load_bundle(p)


@pytest.mark.parametrize("n, expected", [(10, (8, 1, 1)), (23, (19, 2, 2)), (250, (200, 25, 25))])
def test_split_sizes(n, expected):
    assert data.split_sizes(n) == expected
    bundles = [tiny_bundle(scene_id=f"s{k:03d}", seed=k) for k in range(n)] if n <= 23 else None
    if bundles:
        ds = data.split_dataset(bundles, seed=1)
        assert (len(ds.train), len(ds.val), len(ds.test)) == expected


def test_split_too_few():
    with pytest.raises(TooFewScenes):
        data.split_dataset([tiny_bundle(scene_id=f"s{k}") for k in range(9)], 0)


def test_split_deterministic_and_order_free():
    bundles = [tiny_bundle(scene_id=f"s{k:03d}", seed=k) for k in range(30)]
    a = data.split_dataset(bundles, seed=4)
    b = data.split_dataset(bundles[::-1], seed=4)
    assert a.split == b.split
    assert sorted(a.split) == sorted(b.scene_id for b in bundles)
    assert set(a.split.values()) == {"train", "val", "test"}


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400))
def test_split_floor_rule(n):
    tr, va, te = data.split_sizes(n)
    assert va == te == n // 10
    assert tr + va + te == n


def test_manifest_roundtrip(tmp_path, synth_small):
    paths = []
    for b in synth_small:
        p = tmp_path / "scenes" / f"{b.scene_id}.json"
        p.parent.mkdir(exist_ok=True)
        data.save_bundle(b, p)
        paths.append(p)
    data.save_manifest(paths, 9, tmp_path / "manifest.json")
    ds = data.load_dataset(tmp_path / "manifest.json")
    assert ds.split == data.split_dataset(synth_small, 9).split
    assert ds.by_id(synth_small[0].scene_id) == synth_small[0]


def test_bundles_are_immutable(bundle):
    with pytest.raises(ValueError):
        bundle.patch_embeddings[0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        bundle.scene_id = "other"


def test_word_index_must_follow_position():
    b = tiny_bundle(n_words=2)
    w = dataclasses.replace(b.words[1], index=5)
    with pytest.raises(ValidationError, match="word index"):
        _rebuild(b, words=(b.words[0], w))


def test_normalize_roundtrip(bundle):
    g = bundle.gaze()
    assert np.allclose(bundle.to_pixels(bundle.normalize(g)), g, rtol=0, atol=1e-12)
    assert isinstance(bundle.words[0], TimedWord)
