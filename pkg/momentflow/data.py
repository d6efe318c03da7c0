# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.data` module loads datasets (MNIST in the IDX container format), generates synthetic ones, and
computes per-channel dataset statistics.

IDX files are big-endian. An image file starts with the magic number 2051 (bytes ``00 00 08 03``) followed by the
image count, the row count and the column count, then one unsigned byte per pixel. A label file starts with the magic
number 2049 and the label count, then one unsigned byte per label. Files ending in ``.gz`` are decompressed
transparently.
"""

import gzip
import logging
import os
import struct

import numpy as np

from .common import (BadMagicError, CountMismatchError, DataError, EmptySplitError, RunningMoments, ShapeError,
                     TruncatedFileError)


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
SPLITS = ('train', 'val', 'test')

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


class Dataset(object):
    """
    A labelled dataset whose examples carry a split tag.

    Parameters
    ----------
    images : array_like
        Examples stacked along axis 0, e.g. ``(N, C, H, W)`` images or ``(N, F)`` feature vectors.
    labels : array_like
        Class indices, one per example.
    splits : array_like of str, optional
        One of ``'train'``, ``'val'``, ``'test'`` per example. Defaults to all ``'train'``.
    n_classes : int, optional
        Number of classes. Defaults to one more than the largest label.
    value_range : tuple or None
        Inclusive range every value must lie in; image data uses ``(0, 1)``, ``None`` disables the check.
    """

    def __init__(self, images, labels, splits=None, n_classes=None, value_range=(0.0, 1.0)):
        self.images = np.asarray(images, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError('%d examples but %d labels' % (self.images.shape[0], self.labels.shape[0]))
        if splits is None:
            splits = np.full(self.labels.shape[0], 'train')
        self.splits = np.asarray(splits, dtype='<U5')
        if self.splits.shape != self.labels.shape or not np.all(np.isin(self.splits, SPLITS)):
            raise ValueError('every example needs one of the split tags %s' % (', '.join(SPLITS),))
        if n_classes is None:
            n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        self.n_classes = n_classes
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise ValueError('labels must lie in [0, %d)' % (n_classes,))
        self.value_range = value_range
        if value_range is not None and self.images.size:
            low, high = value_range
            if self.images.min() < low or self.images.max() > high:
                raise ValueError('image values must lie in [%g, %g]' % (low, high))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def example_shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.splits[indices], self.n_classes,
                       self.value_range)

    def split(self, tag):
        """
        Returns the examples tagged ``tag``.
        """
        return self.subset(np.flatnonzero(self.splits == tag))

    def split_sizes(self):
        return {tag: int(np.sum(self.splits == tag)) for tag in SPLITS}

    def __repr__(self):
        return 'Dataset(%d examples, shape=%s, splits=%s)' % (len(self), self.example_shape, self.split_sizes())


class DatasetStats(object):
    """
    Per-channel mean and population variance over the training split and all spatial positions.
    """

    def __init__(self, mean, var, count=0):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var = np.atleast_1d(np.asarray(var, dtype=float))
        if np.any(self.var < 0):
            raise ValueError('variances must be non-negative')
        self.count = count

    def __iter__(self):
        yield self.mean
        yield self.var

    def __repr__(self):
        return 'DatasetStats(mean=%s, var=%s)' % (self.mean, self.var)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith('.gz') else open
    with opener(path, 'rb') as f:
        return f.read()


def _parse_idx(data, expected_magic, ndim, path):
    header = 4 * (ndim + 1)
    if len(data) < 4:
        raise TruncatedFileError('%s: file too short for an IDX header' % (path,))
    magic, = struct.unpack('>I', data[:4])
    if magic != expected_magic:
        raise BadMagicError('%s: bad magic number %d, expected %d' % (path, magic, expected_magic))
    if len(data) < header:
        raise TruncatedFileError('%s: file too short for an IDX header' % (path,))
    dims = struct.unpack('>' + 'I' * ndim, data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFileError('%s: expected %d payload bytes, found %d' % (path, size, len(data) - header))
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split='train'):
    """
    Loads an image and a label IDX file into a :py:class:`Dataset`, scaling pixels to [0, 1] and adding a channel
    axis, so images have shape ``(N, 1, rows, cols)``.

    :raises BadMagicError: if a file has the wrong magic number.
    :raises TruncatedFileError: if a file is shorter than its header declares.
    :raises CountMismatchError: if the two files hold different numbers of items.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError('%s holds %d images but %s holds %d labels' % (images_path, images.shape[0],
                                                                              labels_path, labels.shape[0]))
    log.info('Loaded %d images of %dx%d from %s', images.shape[0], images.shape[1], images.shape[2], images_path)
    return Dataset(images[:, np.newaxis, :, :] / 255.0, labels, np.full(labels.shape[0], split), n_classes=10)


def _find(data_dir, name):
    for candidate in (name, name + '.gz'):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise DataError('cannot find %s (or %s.gz) in %s' % (name, name, data_dir))


def mnist_available(data_dir=None):
    data_dir = data_dir or os.environ.get('MOMENTFLOW_DATA_DIR')
    if not data_dir:
        return False
    try:
        for names in MNIST_FILES.values():
            for name in names:
                _find(data_dir, name)
    except DataError:
        return False
    return True


def load_mnist(data_dir=None, limit=None, val_ratio=0.1, seed=0):
    """
    Loads MNIST from ``data_dir`` (default: ``MOMENTFLOW_DATA_DIR``) with train, validation and test splits.

    :param limit: Keep only the first ``limit`` training and ``limit`` test images.
    :param val_ratio: Fraction of the training images moved to the validation split.
    :raises DataError: if the directory or files are missing.
    """
    data_dir = data_dir or os.environ.get('MOMENTFLOW_DATA_DIR')
    if not data_dir:
        raise DataError('no MNIST directory given and MOMENTFLOW_DATA_DIR is not set')
    parts = []
    for split, (images_name, labels_name) in sorted(MNIST_FILES.items(), reverse=True):
        part = load_idx(_find(data_dir, images_name), _find(data_dir, labels_name), split)
        if limit is not None:
            part = part.subset(np.arange(min(limit, len(part))))
        parts.append(part)
    dataset = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                      np.concatenate([p.splits for p in parts]), n_classes=10)
    return split_validation(dataset, val_ratio, seed)


def split_validation(dataset, ratio=0.1, seed=0):
    """
    Moves ``ratio`` of the training examples to the validation split: the training indices are shuffled with ``seed``
    and the last ``round(ratio * n)`` of them are retagged.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError('validation ratio must lie in [0, 1)')
    train = np.flatnonzero(dataset.splits == 'train')
    order = np.random.default_rng(seed).permutation(train)
    n_val = int(round(ratio * train.size))
    splits = dataset.splits.copy()
    splits[order[train.size - n_val:]] = 'val'
    return Dataset(dataset.images, dataset.labels, splits, dataset.n_classes, dataset.value_range)


def make_synthetic_blobs(n_classes, n_per_class, dim, separation, seed=0, noise=1.0):
    """
    Gaussian blobs with unit-variance (times ``noise``) isotropic noise around class centers whose pairwise distance
    is at least ``separation``. When ``dim >= n_classes`` the centers are the scaled corners of a simplex, otherwise
    they are spaced ``separation`` apart along the first axis.

    :raises EmptySplitError: if ``n_per_class`` is zero.
    """
    if separation <= 0:
        raise ValueError('separation must be positive')
    if n_per_class < 1 or n_classes < 1:
        raise EmptySplitError('synthetic dataset would be empty')
    rng = np.random.default_rng(seed)
    centers = np.zeros((n_classes, dim))
    if dim >= n_classes:
        centers[:, :n_classes] = np.eye(n_classes) * separation / np.sqrt(2.0)
    else:
        centers[:, 0] = np.arange(n_classes) * separation
    labels = np.repeat(np.arange(n_classes), n_per_class)
    points = centers[labels] + noise * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(points[order], labels[order], n_classes=n_classes, value_range=None)


def make_synthetic_images(n_classes=10, n_per_class=100, shape=(1, 28, 28), density=0.15, seed=0):
    """
    Sparse binary-ish images in [0, 1], one random prototype per class, with pixels of each example randomly dropped,
    added and dimmed. Serves as a stand-in for MNIST when the IDX files are not available.
    """
    if n_per_class < 1 or n_classes < 1:
        raise EmptySplitError('synthetic dataset would be empty')
    rng = np.random.default_rng(seed)
    prototypes = (rng.random((n_classes,) + tuple(shape)) < density).astype(float)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    keep = rng.random((labels.size,) + tuple(shape)) >= 0.2
    spurious = rng.random((labels.size,) + tuple(shape)) < 0.02
    intensity = rng.uniform(0.7, 1.0, size=(labels.size,) + (1,) * len(shape))
    images = np.clip(np.maximum(prototypes[labels] * keep, spurious) * intensity, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], n_classes=n_classes)


def dataset_stats(dataset, split='train', chunk=1024):
    """
    Per-channel statistics of the examples in ``split``, computed in a single stable pass. Axis 1 of the examples is
    the channel axis; any further axes are spatial positions of the same channel.

    :raises EmptySplitError: if the split is empty.
    """
    images = dataset.images[dataset.splits == split]
    if images.shape[0] == 0:
        raise EmptySplitError('split %r is empty' % (split,))
    channels = images.shape[1] if images.ndim > 1 else 1
    acc = RunningMoments()
    for start in range(0, images.shape[0], chunk):
        block = images[start:start + chunk].reshape(-1, channels, int(np.prod(images.shape[2:], dtype=int)))
        acc.push_batch(block.transpose(0, 2, 1).reshape(-1, channels))
    return DatasetStats(acc.mean, acc.var, acc.count)
