import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tlattack.data import (Dataset, SplitSpec, geometric_ramp, load_idx, partition, save_idx, subsample,
                           synth_dataset)
from tlattack.errors import IdxFormatError


def write_idx(tmp_path, pixels, labels, img_magic=0x803, lab_magic=0x801, n_img=None, n_lab=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, r, c = pixels.shape
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", img_magic, n if n_img is None else n_img, r, c) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", lab_magic, len(labels) if n_lab is None else n_lab)
                    + bytes(bytearray(labels)))
    return img, lab


def test_load_idx_fixture(tmp_path):
    pixels = [[[0, 255], [128, 64]], [[255, 255], [0, 0]], [[1, 2], [3, 4]]]
    img, lab = write_idx(tmp_path, pixels, [2, 0, 1])
    ds = load_idx(img, lab)
    assert ds.inputs.shape == (3, 2, 2)
    assert ds.inputs[0, 0, 1] == 1.0 and ds.inputs[0, 1, 0] == pytest.approx(128 / 255)
    assert list(ds.labels) == [2, 0, 1] and ds.class_names == ["0", "1", "2"]


@pytest.mark.parametrize("kw", [dict(img_magic=0x802), dict(lab_magic=0x803), dict(n_lab=2), dict(n_img=4)])
def test_load_idx_rejects_bad_files(tmp_path, kw):
    img, lab = write_idx(tmp_path, np.zeros((3, 2, 2)), [0, 1, 2], **kw)
    with pytest.raises(IdxFormatError):
        load_idx(img, lab)


def test_load_idx_truncated_header(tmp_path):
    img, lab = write_idx(tmp_path, np.zeros((1, 2, 2)), [0])
    img.write_bytes(img.read_bytes()[:6])
    with pytest.raises(IdxFormatError):
        load_idx(img, lab)


def test_idx_round_trip(tmp_path):
    ds = synth_dataset(3, 4, image_side=8, seed=1)
    save_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.inputs - ds.inputs)) <= 0.5 / 255 + 1e-12


def test_synth_is_deterministic_and_valid():
    a = synth_dataset(5, 10, seed=3)
    b = synth_dataset(5, 10, seed=3)
    c = synth_dataset(5, 10, seed=4)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert list(a.class_counts()) == [10] * 5


def test_synth_classes_are_separable():
    train = synth_dataset(15, 20, seed=0)
    test = synth_dataset(15, 20, seed=1)
    cent = np.stack([train.inputs[train.labels == c].mean(0).ravel() for c in range(15)])
    d = ((test.inputs.reshape(len(test), -1)[:, None] - cent[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == test.labels) >= 0.9


def test_templates_do_not_depend_on_class_count():
    small = synth_dataset(10, 20, seed=0)
    big = synth_dataset(15, 20, seed=1)
    cent = np.stack([small.inputs[small.labels == c].mean(0).ravel() for c in range(10)])
    keep = big.labels < 10
    x = big.inputs[keep].reshape(keep.sum(), -1)
    d = ((x[:, None] - cent[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == big.labels[keep]) >= 0.9


def test_partition_relabels_and_splits():
    ds = synth_dataset(6, 12, image_side=8, seed=0)
    spec = SplitSpec((0, 1), (4, 2), {4: 5, 2: 3}, holdout_per_class=2, seed=0)
    teacher, train, hold, pool = partition(ds, spec)
    assert teacher.class_names == ["0", "1"] and len(teacher) == 24
    assert train.class_names == ["4", "2"] and list(train.class_counts()) == [5, 3]
    assert list(hold.class_counts()) == [2, 2]
    assert pool.class_names == ["3", "5"] and len(pool) == 24
    assert not set(train.index) & set(hold.index)
    assert np.array_equal(train.inputs, ds.inputs[train.index])


def test_partition_errors():
    ds = synth_dataset(4, 5, image_side=8)
    with pytest.raises(ValueError):
        partition(ds, SplitSpec((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        partition(ds, SplitSpec((0,), ()))
    with pytest.raises(ValueError):
        partition(ds, SplitSpec((0,), (2,), {2: 4}, holdout_per_class=2))
    with pytest.raises(ValueError):
        partition(ds, SplitSpec((0,), (7,)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.lists(st.integers(0, 6), min_size=3, max_size=3))
def test_subsample_counts_and_determinism(seed, counts):
    ds = synth_dataset(3, 6, image_side=4, seed=0)
    per = dict(enumerate(counts))
    a = subsample(ds, per, seed)
    assert list(a.class_counts()) == counts
    assert np.array_equal(a.index, subsample(ds, per, seed).index)
    assert len(set(a.index)) == len(a)


def test_subsample_too_many():
    with pytest.raises(ValueError):
        subsample(synth_dataset(2, 3, image_side=4), 4, 0)


def test_geometric_ramp():
    assert geometric_ramp(20, 0.5, 4) == [20, 10, 5, 2]
    assert geometric_ramp(3, 0.1, 3) == [3, 1, 1]


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 2, 2), 2.0), [0], ["a"])
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2, 2)), [1], ["a"])
