# -*- mode: python; coding: utf-8; -*-

import gzip
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from momentflow.common import BadMagicError, CountMismatchError, DataError, EmptySplitError, ShapeError, \
    TruncatedFileError
from momentflow.data import (IMAGES_MAGIC, LABELS_MAGIC, MNIST_FILES, Dataset, DatasetStats, dataset_stats,
                             load_idx, load_mnist, make_synthetic_blobs, make_synthetic_images, mnist_available,
                             split_validation)


def _images_bytes(pixels, magic=IMAGES_MAGIC):
    pixels = np.asarray(pixels, dtype=np.uint8)
    return struct.pack('>IIII', magic, *pixels.shape) + pixels.tobytes()


def _labels_bytes(labels, magic=LABELS_MAGIC):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack('>II', magic, labels.size) + labels.tobytes()


@pytest.fixture
def idx_files(tmp_path):
    pixels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    images = tmp_path / 'images-idx3-ubyte'
    labels = tmp_path / 'labels-idx1-ubyte'
    images.write_bytes(_images_bytes(pixels))
    labels.write_bytes(_labels_bytes([7, 2]))
    return str(images), str(labels), pixels


def test_load_idx(idx_files):
    images, labels, pixels = idx_files
    dataset = load_idx(images, labels, 'test')
    assert dataset.images.shape == (2, 1, 3, 4)
    assert_allclose(dataset.images[:, 0], pixels / 255.0)
    assert dataset.labels.tolist() == [7, 2]
    assert dataset.n_classes == 10
    assert dataset.split_sizes() == {'train': 0, 'val': 0, 'test': 2}


def test_load_gzipped_idx(tmp_path, idx_files):
    images, labels, _ = idx_files
    for path in (images, labels):
        with open(path, 'rb') as f, gzip.open(path + '.gz', 'wb') as g:
            g.write(f.read())
    dataset = load_idx(images + '.gz', labels + '.gz')
    assert len(dataset) == 2


def test_idx_bad_magic(tmp_path, idx_files):
    images, labels, pixels = idx_files
    swapped = tmp_path / 'swapped'
    swapped.write_bytes(_images_bytes(pixels, magic=LABELS_MAGIC))
    with pytest.raises(BadMagicError):
        load_idx(str(swapped), labels)
    with pytest.raises(BadMagicError):
        load_idx(images, images)


@pytest.mark.parametrize('cut', [2, 10, 30])
def test_idx_truncated(tmp_path, idx_files, cut):
    images, labels, pixels = idx_files
    short = tmp_path / 'short'
    short.write_bytes(_images_bytes(pixels)[:cut])
    with pytest.raises(TruncatedFileError):
        load_idx(str(short), labels)


def test_idx_count_mismatch(tmp_path, idx_files):
    images, _, _ = idx_files
    labels = tmp_path / 'three-labels'
    labels.write_bytes(_labels_bytes([1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_idx(images, str(labels))


def test_mnist_missing(tmp_path, monkeypatch):
    monkeypatch.delenv('MOMENTFLOW_DATA_DIR', raising=False)
    assert not mnist_available()
    assert not mnist_available(str(tmp_path))
    with pytest.raises(DataError):
        load_mnist()
    with pytest.raises(DataError):
        load_mnist(str(tmp_path))


def test_load_mnist_layout(tmp_path):
    rng = np.random.default_rng(0)
    for split, count in (('train', 20), ('test', 6)):
        images_name, labels_name = MNIST_FILES[split]
        (tmp_path / images_name).write_bytes(_images_bytes(rng.integers(0, 256, size=(count, 28, 28))))
        with gzip.open(str(tmp_path / labels_name) + '.gz', 'wb') as f:
            f.write(_labels_bytes(rng.integers(0, 10, size=count)))
    assert mnist_available(str(tmp_path))
    dataset = load_mnist(str(tmp_path), val_ratio=0.25)
    assert dataset.split_sizes() == {'train': 15, 'val': 5, 'test': 6}
    assert dataset.example_shape == (1, 28, 28)
    limited = load_mnist(str(tmp_path), limit=8, val_ratio=0.25)
    assert limited.split_sizes() == {'train': 6, 'val': 2, 'test': 6}


def test_dataset_validation():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 1], splits=['train', 'holdout'])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 3], n_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2), 2.0), [0, 1])
    assert len(Dataset(np.full((2, 2), 2.0), [0, 1], value_range=None)) == 2


def test_dataset_splits():
    dataset = Dataset(np.zeros((4, 1)), [0, 1, 1, 0], splits=['train', 'test', 'train', 'val'])
    assert dataset.split('train').labels.tolist() == [0, 1]
    assert dataset.split('test').n_classes == 2
    assert len(dataset.subset([3])) == 1


def test_dataset_stats_of_two_pixels():
    dataset = Dataset(np.array([[[[0.0, 1.0]]]]), [0])
    stats = dataset_stats(dataset)
    assert_allclose(stats.mean, [0.5])
    assert_allclose(stats.var, [0.25])
    assert stats.count == 2
    mean, var = stats
    assert mean.shape == var.shape == (1,)


def test_dataset_stats_per_channel(rng):
    images = rng.uniform(size=(50, 3, 4, 4)) * np.array([1.0, 0.5, 0.1])[:, np.newaxis, np.newaxis]
    stats = dataset_stats(Dataset(images, np.zeros(50, dtype=int)), chunk=7)
    pooled = images.transpose(1, 0, 2, 3).reshape(3, -1)
    assert_allclose(stats.mean, pooled.mean(axis=1))
    assert_allclose(stats.var, pooled.var(axis=1))


def test_dataset_stats_of_empty_split():
    with pytest.raises(EmptySplitError):
        dataset_stats(Dataset(np.zeros((2, 2)), [0, 1]), split='val')


def test_dataset_stats_rejects_negative_variance():
    with pytest.raises(ValueError):
        DatasetStats([0.0], [-1.0])


def test_split_validation():
    dataset = make_synthetic_blobs(2, 50, 3, 5.0)
    split = split_validation(dataset, 0.2, seed=1)
    assert split.split_sizes() == {'train': 80, 'val': 20, 'test': 0}
    again = split_validation(dataset, 0.2, seed=1)
    assert (split.splits == again.splits).all()
    assert split_validation(dataset, 0.0).split_sizes()['val'] == 0
    with pytest.raises(ValueError):
        split_validation(dataset, 1.0)


def test_synthetic_blobs():
    dataset = make_synthetic_blobs(3, 40, 3, 8.0, seed=2)
    assert dataset.images.shape == (120, 3)
    assert np.bincount(dataset.labels).tolist() == [40, 40, 40]
    centers = np.array([dataset.images[dataset.labels == k].mean(axis=0) for k in range(3)])
    distances = np.linalg.norm(centers[:, np.newaxis] - centers[np.newaxis], axis=-1)
    assert np.all(distances[~np.eye(3, dtype=bool)] > 6.0)
    line = make_synthetic_blobs(4, 10, 1, 3.0)
    assert line.n_classes == 4
    with pytest.raises(EmptySplitError):
        make_synthetic_blobs(2, 0, 2, 1.0)
    with pytest.raises(ValueError):
        make_synthetic_blobs(2, 5, 2, 0.0)


def test_synthetic_images():
    dataset = make_synthetic_images(4, 10, shape=(1, 8, 8), seed=5)
    assert dataset.images.shape == (40, 1, 8, 8)
    assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
    assert 0.0 < dataset.images.mean() < 0.5
    same = make_synthetic_images(4, 10, shape=(1, 8, 8), seed=5)
    assert_allclose(same.images, dataset.images)
    with pytest.raises(EmptySplitError):
        make_synthetic_images(n_per_class=0)


@pytest.mark.parametrize('error', [BadMagicError, TruncatedFileError, CountMismatchError, EmptySplitError])
def test_data_errors_are_io_errors(error):
    assert issubclass(error, DataError)
    assert issubclass(error, IOError)
    assert error.__doc__ and error.__doc__.strip()
