import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ctlab.preprocess import (ChannelBank, DatasetManifest, SlideId, SplitSpec, WindowSpec, assemble_input,
                              assemble_target, build_samples, filter_slides, lint_annotations, resize_nn,
                              split_dataset, window_normalize)
from ctlab.volume_io import DimensionMismatchError, HounsfieldVolume, MaskVolume, write_volume

W1, W2, W3 = ChannelBank().windows


# ---------------------------------------------------------------- resize

def test_resize_identity(rng):
    img = rng.integers(-1000, 1000, size=(320, 320))
    np.testing.assert_array_equal(resize_nn(img, 320), img)


def test_resize_2x2_to_4():
    a, b, c, d = 1, 2, 3, 4
    expected = np.array([[a, a, b, b],
                         [a, a, b, b],
                         [c, c, d, d],
                         [c, c, d, d]])
    np.testing.assert_array_equal(resize_nn(np.array([[a, b], [c, d]]), 4), expected)


def test_resize_constant():
    out = resize_nn(np.full((630, 630), -512), 320)
    assert out.shape == (320, 320) and (out == -512).all()


def test_resize_floor_convention_by_enumeration(rng):
    img = rng.integers(0, 100, size=(7, 5))
    out = resize_nn(img, 3)
    for i in range(3):
        for j in range(3):
            assert out[i, j] == img[int(np.floor(i * 7 / 3)), int(np.floor(j * 5 / 3))]


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20), elements=st.integers(0, 1)),
       st.integers(1, 25))
def test_resize_keeps_values(img, side):
    out = resize_nn(img, side)
    assert set(np.unique(out)) <= set(np.unique(img))


# ---------------------------------------------------------------- windowing

def test_window_examples():
    assert window_normalize(-970, W1) == 0.0
    assert window_normalize(-150, W1) == 1.0
    assert window_normalize(-560, W1) == 0.5
    assert window_normalize(-800, W3) == 0.0
    assert window_normalize(400, W2) == 1.0


def test_window_rejects_empty_interval():
    with pytest.raises(ValueError):
        WindowSpec(-150, -150)


def test_channel_bank_requires_nesting():
    with pytest.raises(ValueError):
        ChannelBank((WindowSpec(-970, -700), WindowSpec(-700, -450), WindowSpec(-450, -150)))
    with pytest.raises(ValueError):
        ChannelBank((W1, W2))


@given(st.integers(-2000, 2000), st.integers(-2000, 2000))
def test_window_monotone_and_bounded(a, b):
    for w in (W1, W2, W3):
        lo, hi = sorted((a, b))
        va, vb = window_normalize(lo, w), window_normalize(hi, w)
        assert 0.0 <= va <= vb <= 1.0


# ---------------------------------------------------------------- assembly

def test_assemble_input_examples():
    x = assemble_input(np.full((4, 4), -970), np.ones((4, 4)))
    assert x.shape == (4, 4, 4)
    for ch, v in enumerate((0, 0, 0, 1)):
        assert (x[ch] == v).all()
    x = assemble_input(np.full((4, 4), -575), np.zeros((4, 4)))
    assert np.allclose(x[1], 0.5) and (x[3] == 0).all()


def test_assemble_input_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        assemble_input(np.zeros((4, 4)), np.zeros((4, 5)))


def test_assemble_input_range(rng):
    x = assemble_input(rng.integers(-3000, 3000, size=(16, 16)), rng.integers(0, 2, size=(16, 16)))
    assert x.min() >= 0 and x.max() <= 1


def test_assemble_target(rng):
    t = assemble_target(np.zeros((3, 3)))
    assert (t[0] == 0).all() and (t[1] == 1).all()
    t = assemble_target(np.ones((3, 3)))
    assert (t[0] == 1).all() and (t[1] == 0).all()
    t = assemble_target(rng.integers(0, 2, size=(8, 8)))
    assert (t.sum(axis=0) == 1).all()
    with pytest.raises(ValueError):
        assemble_target(np.full((2, 2), 3))


# ---------------------------------------------------------------- filtering

def _write_triplet(d, name, lung, lesion, tag="T"):
    lung = np.asarray(lung, dtype=np.uint8)
    ct = HounsfieldVolume.from_array(np.full(lung.shape, -600))
    write_volume(ct, d / f"{name}_ct")
    write_volume(MaskVolume.from_array(lung, "lung"), d / f"{name}_lung")
    write_volume(MaskVolume.from_array(np.asarray(lesion, dtype=np.uint8), "lesion"), d / f"{name}_lesion")
    return {"ct": f"{name}_ct.ctv", "lung": f"{name}_lung.ctv", "lesion": f"{name}_lesion.ctv", "tag": tag}


def test_filter_slides(tmp_path):
    lung = np.zeros((3, 4, 4))
    lung[1, 0, 0] = 1
    lung[2] = 1
    lesion = np.zeros((3, 4, 4))
    lesion[0, 1, 1] = 1       # lesion on a lungless slide
    lesion[2, 2, 2] = 1
    rec = _write_triplet(tmp_path, "v", lung, lesion)
    (tmp_path / "m.json").write_text(json.dumps([rec]))
    kept = filter_slides(DatasetManifest.load(tmp_path / "m.json"))
    assert kept == [(SlideId("T", 0, 1), False), (SlideId("T", 0, 2), True)]


def test_filter_slides_all_empty(tmp_path):
    rec = _write_triplet(tmp_path, "v", np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))
    (tmp_path / "m.json").write_text(json.dumps([rec]))
    assert filter_slides(DatasetManifest.load(tmp_path / "m.json")) == []


def test_manifest_rejects_mismatched_pair(tmp_path):
    rec = _write_triplet(tmp_path, "v", np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))
    write_volume(MaskVolume.from_array(np.zeros((2, 4, 4)), "lesion"), tmp_path / "v_lesion")
    (tmp_path / "m.json").write_text(json.dumps([rec]))
    with pytest.raises(DimensionMismatchError):
        DatasetManifest.load(tmp_path / "m.json")


# ---------------------------------------------------------------- splitting

def _slides(n_les, n_clean):
    out = [(SlideId("A", 0, i), True) for i in range(n_les)]
    out += [(SlideId("A", 1, i), False) for i in range(n_clean)]
    return out


def test_split_counts():
    slides = _slides(10, 10)
    flags = dict(slides)
    tr, va, te = split_dataset(slides, SplitSpec(8, 4, 0.5, seed=3))
    assert sum(flags[s] for s in tr) == 4 and len(tr) == 8
    assert sum(flags[s] for s in va) == 2 and len(va) == 4
    assert len(te) == 8
    assert not (set(tr) & set(va)) and not (set(tr) & set(te)) and not (set(va) & set(te))
    assert set(tr) | set(va) | set(te) == set(flags)


def test_split_deterministic():
    slides = _slides(30, 30)
    assert split_dataset(slides, SplitSpec(10, 6, seed=9)) == split_dataset(slides, SplitSpec(10, 6, seed=9))
    assert split_dataset(slides, SplitSpec(10, 6, seed=9)) != split_dataset(slides, SplitSpec(10, 6, seed=10))


def test_split_insufficient():
    with pytest.raises(ValueError, match="lesion"):
        split_dataset(_slides(5, 20), SplitSpec(6, 0, 1.0))
    with pytest.raises(ValueError, match="non-lesion"):
        split_dataset(_slides(20, 2), SplitSpec(8, 0, 0.5))


def test_split_rounds_half_up():
    slides = _slides(10, 10)
    flags = dict(slides)
    tr, va, _ = split_dataset(slides, SplitSpec(5, 3, 0.5))
    assert sum(flags[s] for s in tr) == 3 and sum(flags[s] for s in va) == 2


def test_split_holdout_volumes():
    slides = _slides(10, 10) + [(SlideId("A", 2, i), i % 2 == 0) for i in range(6)]
    tr, va, te = split_dataset(slides, SplitSpec(8, 4, holdout_volumes=(2,)))
    assert all(s.volume != 2 for s in tr + va)
    assert {s for s in te if s.volume == 2} == {SlideId("A", 2, i) for i in range(6)}


@settings(max_examples=30, deadline=None)
@given(st.integers(6, 20), st.integers(6, 20), st.integers(0, 6), st.integers(0, 4), st.integers(0, 99))
def test_split_partition_property(n_les, n_clean, n_tr, n_va, seed):
    slides = _slides(n_les, n_clean)
    tr, va, te = split_dataset(slides, SplitSpec(n_tr, n_va, 0.5, seed))
    assert len(tr) + len(va) + len(te) == len(slides)
    assert len(set(tr) | set(va) | set(te)) == len(slides)


# ---------------------------------------------------------------- lint

def _masks(lung, lesion):
    return (MaskVolume.from_array(np.asarray(lung)[None], "lung"),
            MaskVolume.from_array(np.asarray(lesion)[None], "lesion"))


def test_lint_three_pixel_blob():
    lung = np.ones((20, 20), dtype=np.uint8)
    lesion = np.zeros((20, 20), dtype=np.uint8)
    lesion[5, 5] = lesion[5, 6] = lesion[6, 5] = 1
    f = lint_annotations(*_masks(lung, lesion), min_component=10)
    assert len(f) == 1
    assert f[0].kind == "tiny_component" and f[0].pixel_count == 3
    assert f[0].location == (5, 5, 6, 6)


def test_lint_clean_component():
    lung = np.ones((20, 20), dtype=np.uint8)
    lesion = np.zeros((20, 20), dtype=np.uint8)
    lesion[2:12, 3:8] = 1
    assert lint_annotations(*_masks(lung, lesion)) == []


def test_lint_outside_lung_brute_force(rng):
    lung = np.zeros((20, 20), dtype=np.uint8)
    lung[:, :10] = 1
    lesion = np.zeros((20, 20), dtype=np.uint8)
    lesion[4:9, 7:13] = 1                   # straddles the lung border
    outside = sum(1 for r in range(20) for c in range(20) if lesion[r, c] and not lung[r, c])
    f = lint_annotations(*_masks(lung, lesion))
    assert [x.kind for x in f] == ["lesion_outside_lung"]
    assert f[0].pixel_count == outside == 15


def test_lint_diagonal_pixels_are_separate_components():
    lung = np.ones((5, 5), dtype=np.uint8)
    lesion = np.eye(5, dtype=np.uint8)
    f = lint_annotations(*_masks(lung, lesion), min_component=2)
    assert len(f) == 5 and all(x.pixel_count == 1 for x in f)


def test_lint_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        lint_annotations(MaskVolume.from_array(np.zeros((1, 3, 3)), "lung"),
                         MaskVolume.from_array(np.zeros((1, 4, 4)), "lesion"))


# ---------------------------------------------------------------- sample store

def test_build_samples_and_store(small_phantom_dir, tmp_path):
    manifest = DatasetManifest.load(small_phantom_dir / "manifest.json")
    s = build_samples(manifest, "A", 8)
    assert s.inputs.shape[1:] == (4, 8, 8) and s.targets.shape[1:] == (2, 8, 8)
    assert s.inputs.min() >= 0 and s.inputs.max() <= 1
    assert (s.targets.sum(axis=1) == 1).all()
    assert len(s) == len([x for x in filter_slides(manifest) if x[0].tag == "A"])
    s.save(tmp_path / "store")
    back = type(s).load(tmp_path / "store")
    np.testing.assert_array_equal(back.inputs, s.inputs)
    assert back.slide_ids == s.slide_ids
    sub = back.subset(back.slide_ids[:3])
    assert len(sub) == 3 and sub.sample(0).slide_id == back.slide_ids[0]
