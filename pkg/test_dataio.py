# 数据模块测试：IDX/RGB 解析、合成数据、分层划分、小批量与增强

import gzip
import struct

import numpy as np
import pytest

from evonas.dataio import (
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    AugmentPolicy,
    BatchStream,
    Dataset,
    Normalizer,
    Split,
    augment,
    crop,
    hflip,
    load_datasets,
    load_idx,
    load_raw_rgb,
    split_80_20,
    split_indices,
    synthetic,
    write_idx,
    write_raw_rgb,
)
from evonas.exceptions import (
    DataError,
    DataFormatError,
    EmptyDatasetError,
    LabelRangeError,
    SplitTagError,
    StratificationError,
)

FOUR_IMAGES = np.array([
    [[0, 255], [128, 64]],
    [[1, 2], [3, 4]],
    [[255, 255], [255, 255]],
    [[10, 20], [30, 40]],
], dtype=np.uint8)
FOUR_LABELS = np.array([0, 1, 2, 1], dtype=np.uint8)


def _idx_pair(tmp_path, suffix=''):
    images = tmp_path / f'images.idx{suffix}'
    labels = tmp_path / f'labels.idx{suffix}'
    write_idx(str(images), str(labels), FOUR_IMAGES, FOUR_LABELS)
    return str(images), str(labels)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_load_idx(tmp_path):
    ds = load_idx(*_idx_pair(tmp_path), classes=3)
    assert ds.images.shape == (4, 1, 2, 2)
    assert ds.images.dtype == np.float32
    np.testing.assert_allclose(ds.images[0, 0], FOUR_IMAGES[0] / 255.0, rtol=1e-6)
    assert ds.labels.tolist() == [0, 1, 2, 1]
    assert ds.split is Split.TRAIN


def test_load_idx_gzip(tmp_path):
    plain = load_idx(*_idx_pair(tmp_path), classes=3)
    packed = load_idx(*_idx_pair(tmp_path, '.gz'), classes=3)
    assert np.array_equal(plain.images, packed.images)
    assert np.array_equal(plain.labels, packed.labels)


def test_load_idx_wrong_magic(tmp_path):
    images, labels = _idx_pair(tmp_path)
    with pytest.raises(DataFormatError) as info:
        load_idx(labels, labels, classes=3)
    assert info.value.offset == 0
    assert labels in str(info.value)


def test_load_idx_truncated_pixels(tmp_path):
    images, labels = _idx_pair(tmp_path)
    with open(images, 'rb') as f:
        raw = f.read()
    with open(images, 'wb') as f:
        f.write(raw[:-3])
    with pytest.raises(DataFormatError):
        load_idx(images, labels, classes=3)


def test_load_idx_count_mismatch(tmp_path):
    images, labels = _idx_pair(tmp_path)
    with open(labels, 'wb') as f:
        f.write(struct.pack('>2I', IDX_LABEL_MAGIC, 3))
        f.write(bytes([0, 1, 2]))
    with pytest.raises(DataFormatError) as info:
        load_idx(images, labels, classes=3)
    assert info.value.offset == 4


def test_load_idx_corrupt_gzip(tmp_path):
    images, labels = _idx_pair(tmp_path)
    bad = tmp_path / 'broken.gz'
    bad.write_bytes(gzip.compress(struct.pack('>I', IDX_IMAGE_MAGIC))[:12])
    with pytest.raises(DataFormatError):
        load_idx(str(bad), labels, classes=3)


def test_missing_file_names_path(tmp_path):
    missing = str(tmp_path / 'nope.idx')
    with pytest.raises(DataError) as info:
        load_idx(missing, missing)
    assert missing in str(info.value)


# ---------------------------------------------------------------------------
# RGB 记录
# ---------------------------------------------------------------------------

def test_load_raw_rgb_two_records(tmp_path):
    pixels = np.arange(2 * 3 * 2 * 2, dtype=np.uint8).reshape(2, 3, 2, 2)
    path = tmp_path / 'batch.bin'
    write_raw_rgb(str(path), pixels, [7, 2])
    raw = path.read_bytes()
    assert len(raw) == 2 * 13
    assert raw[0] == 7 and raw[13] == 2

    ds = load_raw_rgb(str(path), 2, 2, classes=10)
    assert ds.images.shape == (2, 3, 2, 2)
    assert ds.labels.tolist() == [7, 2]
    # 通道优先：前4个像素字节是红色平面
    np.testing.assert_allclose(ds.images[0, 0].ravel(), np.arange(4) / 255.0, rtol=1e-6)
    np.testing.assert_allclose(ds.images[1, 2].ravel(), np.arange(20, 24) / 255.0, rtol=1e-6)


def test_load_raw_rgb_label_out_of_range(tmp_path):
    path = tmp_path / 'batch.bin'
    write_raw_rgb(str(path), np.zeros((2, 3, 2, 2), dtype=np.uint8), [1, 255])
    with pytest.raises(LabelRangeError) as info:
        load_raw_rgb(str(path), 2, 2, classes=10)
    assert '255' in str(info.value)


def test_load_raw_rgb_partial_record(tmp_path):
    path = tmp_path / 'batch.bin'
    path.write_bytes(bytes(13 + 5))
    with pytest.raises(DataFormatError) as info:
        load_raw_rgb(str(path), 2, 2)
    assert info.value.offset == 13


# ---------------------------------------------------------------------------
# 合成数据与划分
# ---------------------------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = synthetic(3, 30, 3, 8, 8)
    b = synthetic(3, 30, 3, 8, 8)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [10, 10, 10]
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not np.array_equal(a.images, synthetic(4, 30, 3, 8, 8).images)


def test_split_is_stratified_and_disjoint():
    labels = np.repeat([0, 1], 50)
    train, valid = split_indices(labels, 2, seed=0)
    assert np.bincount(labels[train]).tolist() == [40, 40]
    assert np.bincount(labels[valid]).tolist() == [10, 10]
    assert not set(train) & set(valid)
    assert sorted(set(train) | set(valid)) == list(range(100))


def test_split_rejects_tiny_class():
    labels = np.array([0] * 10 + [1] * 4)
    with pytest.raises(StratificationError):
        split_indices(labels, 2, seed=0)
    with pytest.raises(StratificationError):
        split_indices(np.array([0, 1, 0, 1]), 2, seed=0)


def test_split_tags():
    ds = synthetic(0, 40, 2, 4, 4)
    train, valid = split_80_20(ds, 1)
    assert train.split is Split.TRAIN and valid.split is Split.VALID
    with pytest.raises(SplitTagError):
        Normalizer.fit(valid)
    with pytest.raises(EmptyDatasetError):
        train.subset([]).require(Split.TRAIN)


def test_dataset_rejects_bad_labels():
    with pytest.raises(LabelRangeError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 3, Split.TRAIN)


def test_load_datasets(tiny_cfg):
    bundle = load_datasets(tiny_cfg)
    assert (len(bundle.train), len(bundle.valid), len(bundle.test)) == (48, 12, 30)
    assert bundle.test.split is Split.TEST
    assert bundle.input_shape == (1, 8, 8)
    assert len(bundle.train_full) == 60
    assert bundle.fingerprints() == load_datasets(tiny_cfg).fingerprints()


def test_load_datasets_requires_paths(tiny_cfg):
    with pytest.raises(DataError):
        load_datasets(tiny_cfg.with_overrides(dataset='idx'))


# ---------------------------------------------------------------------------
# 小批量与增强
# ---------------------------------------------------------------------------

def test_batch_stream_covers_epoch_and_folds_single_tail():
    ds = synthetic(0, 33, 3, 4, 4)
    stream = BatchStream(ds, 16, rng=0)
    batches = stream.epoch_indices()
    assert [len(b) for b in batches] == [16, 17]
    assert len(stream) == 2
    assert sorted(np.concatenate(batches).tolist()) == list(range(33))
    assert sum(len(labels) for _, labels in stream) == 33


def test_batch_stream_keeps_larger_tail():
    stream = BatchStream(synthetic(0, 34, 2, 4, 4), 16, rng=0, shuffle=False)
    assert [len(b) for b in stream.epoch_indices()] == [16, 16, 2]
    assert len(stream) == 3


def test_hflip_is_an_involution(rng):
    images = rng.random((5, 3, 4, 6))
    mask = np.array([True, False, True, True, False])
    flipped = hflip(images, mask)
    assert np.array_equal(flipped[1], images[1])
    assert np.array_equal(flipped[0], images[0][..., ::-1])
    assert np.array_equal(hflip(flipped, mask), images)


def test_crop_with_centre_offset_is_identity(rng):
    images = rng.random((3, 2, 5, 5))
    assert np.array_equal(crop(images, np.full((3, 2), 4), 4), images)
    shifted = crop(images, np.zeros((3, 2), dtype=np.int64), 4)
    assert np.all(shifted[:, :, :4, :] == 0.0)
    assert np.array_equal(shifted[:, :, 4, 4], images[:, :, 0, 0])


def test_augment_eval_only_normalizes(rng):
    ds = synthetic(0, 20, 2, 4, 4)
    normalizer = Normalizer.fit(ds)
    out = augment(ds.images, AugmentPolicy(), normalizer, rng, training=False)
    assert np.array_equal(out, normalizer.apply(ds.images))
    trained = augment(ds.images, AugmentPolicy(), normalizer, rng, training=True)
    assert trained.shape == ds.images.shape
