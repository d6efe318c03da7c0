# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.common` module defines the core data model shared by the rest of the package: the
:py:class:`MomentTensor` that flows between layers, the :py:class:`PropagationMode` selector, the single-pass
:py:class:`RunningMoments` accumulator used by the Monte-Carlo oracle and dataset statistics, and the exception
hierarchy.

.. doctest::

    >>> from momentflow.common import MomentTensor, RunningMoments
    >>> t = MomentTensor([[1.0, 2.0]], [[0.5, 0.0]])
    >>> t.shape
    (1, 2)
    >>> acc = RunningMoments()
    >>> acc.push_batch([[0.0], [1.0]])
    >>> float(acc.mean[0]), float(acc.var[0])
    (0.5, 0.25)
"""

from enum import Enum

import numpy as np


__author__ = 'The MomentFlow Authors'

__all__ = ['MomentFlowError', 'ShapeError', 'ConfigError', 'UnknownActivationError', 'ModeError', 'RecordingError',
           'NumericalError', 'DataError', 'BadMagicError', 'TruncatedFileError', 'CountMismatchError', 'EmptySplitError',
           'PropagationMode', 'MomentTensor', 'RunningMoments']


class MomentFlowError(Exception):
    """
    Base class of every error raised by momentflow.
    """
    pass


class ShapeError(MomentFlowError, ValueError):
    """
    Raised when tensors or parameters do not have compatible shapes.
    """
    pass


class ConfigError(MomentFlowError, ValueError):
    """
    Raised when a network configuration cannot be parsed or is semantically invalid.

    :param message: Description of the problem.
    :param line: 1-based line number of the offending statement, if known.
    :param path: Name of the configuration source, if known.
    """

    def __init__(self, message, line=None, path=None):
        self.message = message
        self.line = line
        self.path = path
        super(ConfigError, self).__init__(str(self))

    def __str__(self):
        if self.line is None:
            return self.message
        return '%s:%d: %s' % (self.path or '<config>', self.line, self.message)


class UnknownActivationError(ConfigError):
    """
    Raised when an activation name is not registered in :py:mod:`momentflow.activations`.
    """
    pass


class ModeError(MomentFlowError, ValueError):
    """
    Raised when an operation is not available in the requested propagation mode.
    """
    pass


class RecordingError(ModeError):
    """
    Raised when a backward pass is requested for a forward pass that did not record its intermediate values.
    """
    pass


class NumericalError(MomentFlowError, ArithmeticError):
    """
    Raised on non-finite losses and on degenerate statistics, such as a channel with zero propagated variance.
    """
    pass


class DataError(MomentFlowError, IOError):
    """
    Base class for dataset ingestion errors.
    """
    pass


class BadMagicError(DataError):
    """
    An IDX file does not start with the expected magic number.
    """
    pass


class TruncatedFileError(DataError):
    """
    An IDX file ends before its header or payload is complete.
    """
    pass


class CountMismatchError(DataError):
    """
    Image and label files disagree on the number of items.
    """
    pass


class EmptySplitError(DataError):
    """
    A dataset split needed for training or statistics has no items.
    """
    pass


class PropagationMode(Enum):
    """
    The three ways a network can be evaluated: mean only (AP1), mean and variance (AP2), or by sampling every source
    of noise (SAMPLE). SAMPLE evaluation always needs a seed.
    """
    AP1 = 'ap1'
    AP2 = 'ap2'
    SAMPLE = 'sample'

    @classmethod
    def parse(cls, value):
        if isinstance(value, PropagationMode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ModeError('Unknown propagation mode %r (expected one of ap1, ap2, sample)' % (value,))

    def __str__(self):
        return self.value


class MomentTensor(object):
    """
    A shaped pair of arrays holding the per-unit means and variances of a layer's output. The leading axis is the
    batch axis.

    Parameters
    ----------
    mean : array_like
        Per-unit means.
    var : array_like, optional
        Per-unit variances with the same shape as ``mean``. Defaults to zeros, i.e. a deterministic tensor.
    """

    __slots__ = ('mean', 'var')

    def __init__(self, mean, var=None):
        mean = np.asarray(mean, dtype=float)
        if var is None:
            var = np.zeros_like(mean)
        else:
            var = np.asarray(var, dtype=float)
        if mean.shape != var.shape:
            raise ShapeError('Mean shape %s does not match variance shape %s' % (mean.shape, var.shape))
        if np.any(var < 0):
            raise ValueError('MomentTensor variances must be non-negative')
        self.mean = mean
        self.var = var

    @property
    def shape(self):
        return self.mean.shape

    @property
    def std(self):
        return np.sqrt(self.var)

    @property
    def batch_size(self):
        return self.mean.shape[0] if self.mean.ndim > 0 else 1

    def reshape(self, *shape):
        return MomentTensor(self.mean.reshape(*shape), self.var.reshape(*shape))

    def __getitem__(self, item):
        return MomentTensor(self.mean[item], self.var[item])

    def __iter__(self):
        yield self.mean
        yield self.var

    def __len__(self):
        return self.batch_size

    def __repr__(self):
        return 'MomentTensor(shape=%s)' % (self.shape,)

    @classmethod
    def deterministic(cls, values):
        return cls(values)


class RunningMoments(object):
    """
    Single-pass accumulator of elementwise means and population variances. Batches are folded in with the pairwise
    (Chan et al.) update, so two accumulators built on disjoint data can be merged exactly with :py:meth:`merge`.
    """

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def push(self, sample):
        """
        Adds a single sample.
        """
        sample = np.asarray(sample, dtype=float)
        self.push_batch(sample[np.newaxis, ...])

    def push_batch(self, samples):
        """
        Adds a batch of samples stacked along axis 0.
        """
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        if n == 0:
            return
        batch = RunningMoments()
        batch.count = n
        batch.mean = samples.mean(axis=0)
        batch.m2 = ((samples - batch.mean) ** 2).sum(axis=0)
        self._absorb(batch)

    def merge(self, other):
        """
        Returns a new accumulator equivalent to having seen the samples of both ``self`` and ``other``.
        """
        result = RunningMoments()
        result._absorb(self)
        result._absorb(other)
        return result

    def _absorb(self, other):
        if other.count == 0:
            return
        if self.count == 0:
            self.count = other.count
            self.mean = np.array(other.mean, dtype=float, copy=True)
            self.m2 = np.array(other.m2, dtype=float, copy=True)
            return
        if np.shape(self.mean) != np.shape(other.mean):
            raise ShapeError('Cannot merge moments of shape %s and %s' % (np.shape(self.mean), np.shape(other.mean)))
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / total)
        self.count = total

    @property
    def var(self):
        if self.count == 0:
            return None
        return self.m2 / self.count

    @property
    def standard_errors(self):
        return np.sqrt(self.var / self.count)
