# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.training` module trains networks under the negative log-likelihood of their class posterior.

Gradients are obtained by a reverse sweep over a recorded forward pass (see :py:meth:`~momentflow.network.Network.forward`):
every layer maps the gradients with respect to its output means and variances to gradients with respect to its input
means and variances and its parameters. In AP2 mode the sweep therefore differentiates through the moment formulas, so
that a network of hard step units has a smooth loss whenever its inputs are noisy.

Checkpoints are stored in a flat binary layout::

    b"MFCK"                  magic
    u32                      format version (1)
    u32                      number of arrays
    per array:
        u16                  length of the name in bytes
        bytes                UTF-8 name, "layer<i>.<parameter>"
        u32                  number of dimensions
        u64 * ndim           extents
    payloads                 all arrays in table order, little-endian float64

All integers are little-endian.
"""

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .common import (BadMagicError, DataError, EmptySplitError, ModeError, MomentTensor, NumericalError,
                     PropagationMode, RecordingError, TruncatedFileError)


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'MFCK'
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ('epoch', 'lr', 'train_loss', 'val_loss', 'val_acc')


def nll_loss(posterior, labels):
    """
    Negative log-likelihood of ``labels`` under ``posterior``, one value per example.

    .. doctest::

        >>> import numpy as np
        >>> from momentflow.moments import ClassPosterior
        >>> round(float(nll_loss(ClassPosterior(np.log([0.7, 0.3])), 1)), 6)
        1.203973

    :raises ValueError: if a label is not a class index of the posterior.
    """
    log_probs = posterior.log_probs
    labels = np.asarray(labels, dtype=int)
    if np.any(labels < 0) or np.any(labels >= posterior.n_classes):
        raise ValueError('labels must lie in [0, %d)' % (posterior.n_classes,))
    if log_probs.ndim == 1:
        return -log_probs[labels]
    return -np.take_along_axis(log_probs, labels.reshape(-1, 1), axis=-1)[:, 0]


class GradientBundle(object):
    """
    Gradients of the loss with respect to every parameter (``param_grads``, a list with one ``dict`` per layer,
    mirroring the parameters) and with respect to the input means and variances (``input_grad``).
    """

    def __init__(self, param_grads, input_grad):
        self.param_grads = param_grads
        self.input_grad = input_grad

    def __repr__(self):
        return 'GradientBundle(%d layers)' % (len(self.param_grads),)


def backward(network, params, record, labels):
    """
    Gradient of the mean negative log-likelihood over the batch of ``record``.

    :param record: The :py:class:`~momentflow.network.ForwardRecord` of an AP1, AP2 or SAMPLE forward pass.
    :raises RecordingError: if ``record`` holds no recording for this network.
    :raises ModeError: for a SAMPLE record that passed through stochastic units.
    """
    if record is None or record.posterior is None or len(record.caches) != len(network.layers):
        raise RecordingError('backward needs a recorded forward pass through a network with a softmax head')
    posterior = record.posterior
    labels = np.asarray(labels, dtype=int).reshape(-1)
    nll_loss(posterior, labels)
    batch = posterior.log_probs.shape[0]
    g_log_probs = np.zeros_like(posterior.log_probs)
    g_log_probs[np.arange(batch), labels] = -1.0 / batch
    g_mean, g_var = g_log_probs, None
    grads = [None] * len(network.layers)
    for index in reversed(range(len(network.layers))):
        layer = network.layers[index]
        g_mean, g_var, grads[index] = layer.backward(params[index], record.caches[index], g_mean, g_var)
    # Inputs of a SAMPLE pass are draws; their variance gradient is not defined.
    if record.mode is PropagationMode.SAMPLE:
        g_var = np.zeros_like(g_mean)
    return GradientBundle(grads, _gradient_tensor(g_mean, g_var))


def _gradient_tensor(g_mean, g_var):
    bundle = MomentTensor(g_mean)
    # MomentTensor rejects negative entries in the variance slot, gradients may be of any sign.
    bundle.var = np.asarray(g_var, dtype=float)
    return bundle


def loss_and_gradients(network, params, x, labels, mode, seed=None, call_index=0):
    """
    Runs a recorded forward pass on ``x`` and returns the mean loss together with its :py:class:`GradientBundle`.
    """
    record = network.forward(params, x, mode, seed, call_index)
    loss = float(np.mean(nll_loss(record.posterior, labels)))
    return loss, backward(network, params, record, labels)


class OptimizerState(object):
    """
    First order optimizer with an exponentially decaying learning rate :math:`\\eta_0 \\gamma^k` in epoch :math:`k`.

    Parameters
    ----------
    kind : str
        ``'adam'`` or ``'sgd'``.
    learning_rate : float
        Learning rate of epoch 0.
    lr_decay : float
        Per-epoch decay factor :math:`\\gamma`.
    """

    KINDS = ('adam', 'sgd')

    def __init__(self, kind='adam', learning_rate=0.001, lr_decay=0.96, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in self.KINDS:
            raise ValueError('unknown optimizer %r (expected one of %s)' % (kind, ', '.join(self.KINDS)))
        if learning_rate < 0 or lr_decay <= 0:
            raise ValueError('learning rate must be non-negative and its decay positive')
        self.kind = kind
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.first = None
        self.second = None

    def learning_rate_at(self, epoch):
        return self.learning_rate * self.lr_decay ** epoch

    def step(self, params, grads, epoch):
        """
        Returns updated copies of ``params`` after one step along ``grads``.
        """
        lr = self.learning_rate_at(epoch)
        self.steps += 1
        if self.kind == 'sgd':
            return [{k: v - lr * g[k] for k, v in p.items()} for p, g in zip(params, grads)]
        if self.first is None:
            self.first = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
            self.second = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        updated = []
        for p, g, m, v in zip(params, grads, self.first, self.second):
            layer = {}
            for key, value in p.items():
                m[key] = self.beta1 * m[key] + (1.0 - self.beta1) * g[key]
                v[key] = self.beta2 * v[key] + (1.0 - self.beta2) * g[key] * g[key]
                layer[key] = value - lr * (m[key] / correction1) / (np.sqrt(v[key] / correction2) + self.eps)
            updated.append(layer)
        return updated


class EpochLog(object):
    """
    One row of the training log.
    """

    __slots__ = LOG_COLUMNS

    def __init__(self, epoch, lr, train_loss, val_loss, val_acc):
        self.epoch = epoch
        self.lr = lr
        self.train_loss = train_loss
        self.val_loss = val_loss
        self.val_acc = val_acc

    def as_row(self):
        return [getattr(self, column) for column in LOG_COLUMNS]

    def __repr__(self):
        return 'EpochLog(%s)' % ', '.join('%s=%s' % (c, getattr(self, c)) for c in LOG_COLUMNS)


class TrainResult(object):
    def __init__(self, params, log):
        self.params = params
        self.log = log


def _inputs(images, input_var):
    if input_var:
        return MomentTensor(images, np.full(images.shape, float(input_var)))
    return MomentTensor(images)


def _batch_step(network, params, images, labels, mode, input_var, seed, call_index, workers):
    if workers <= 1 or images.shape[0] < 2 * workers:
        return loss_and_gradients(network, params, _inputs(images, input_var), labels, mode, seed, call_index)
    pieces = np.array_split(np.arange(images.shape[0]), workers)

    def run(item):
        part, indices = item
        return loss_and_gradients(network, params, _inputs(images[indices], input_var), labels[indices], mode, seed,
                                  call_index * workers + part)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, enumerate(pieces)))
    # Sub-batch sums in index order keep the result independent of scheduling.
    total = images.shape[0]
    loss = 0.0
    grads = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    for indices, (part_loss, bundle) in zip(pieces, results):
        weight = indices.size / total
        loss += part_loss * weight
        for acc, layer in zip(grads, bundle.param_grads):
            for key in acc:
                acc[key] += layer[key] * weight
    return loss, GradientBundle(grads, None)


def evaluate(network, params, dataset, mode='ap1', batch_size=512, input_var=0.0, seed=0):
    """
    Mean loss and accuracy of ``network`` on all examples of ``dataset``.

    :return: ``(loss, accuracy)``, both NaN for an empty dataset.
    """
    mode = PropagationMode.parse(mode)
    if len(dataset) == 0:
        return float('nan'), float('nan')
    losses, correct = 0.0, 0
    for call_index, start in enumerate(range(0, len(dataset), batch_size)):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        record = network.forward(params, _inputs(images, input_var), mode, seed, call_index)
        losses += float(np.sum(nll_loss(record.posterior, labels)))
        correct += int(np.sum(record.posterior.predict() == labels))
    return losses / len(dataset), correct / len(dataset)


def train(network, dataset, mode='ap2', epochs=10, batch_size=128, learning_rate=0.001, lr_decay=0.96,
          optimizer='adam', seed=0, input_var=0.0, workers=1, params=None):
    """
    Mini-batch training of ``network`` on the ``train`` split of ``dataset``, validating after every epoch on the
    ``val`` split. Validation of SAMPLE-mode training runs in AP1 mode.

    :param mode: Propagation mode used for the training loss.
    :param input_var: Variance of the Gaussian noise assumed (AP2) or drawn (SAMPLE) around every input.
    :param workers: Number of threads each mini-batch is split across.
    :param params: Initial parameters; drawn with the configuration seed when not given.
    :return: A :py:class:`TrainResult` with the final parameters and one :py:class:`EpochLog` per epoch.
    :raises EmptySplitError: if the training split is empty.
    :raises NumericalError: if the loss becomes non-finite.
    :raises ModeError: for SAMPLE-mode training through stochastic units.
    """
    mode = PropagationMode.parse(mode)
    if mode is PropagationMode.SAMPLE and any(getattr(layer, 'stochastic', False) for layer in network.layers):
        raise ModeError('SAMPLE-mode training cannot differentiate through stochastic units; use ap1 or ap2')
    train_split = dataset.split('train')
    if len(train_split) == 0:
        raise EmptySplitError('training split is empty')
    val_split = dataset.split('val')
    val_mode = PropagationMode.AP1 if mode is PropagationMode.SAMPLE else mode
    params = network.init_params() if params is None else [dict(p) for p in params]
    state = OptimizerState(optimizer, learning_rate, lr_decay)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_split))
        total, seen = 0.0, 0
        for start in range(0, order.size, batch_size):
            indices = order[start:start + batch_size]
            loss, grads = _batch_step(network, params, train_split.images[indices], train_split.labels[indices],
                                      mode, input_var, seed, step, workers)
            if not np.isfinite(loss):
                raise NumericalError('non-finite training loss in epoch %d, step %d' % (epoch, step))
            params = state.step(params, grads.param_grads, epoch)
            total += loss * indices.size
            seen += indices.size
            step += 1
        val_loss, val_acc = evaluate(network, params, val_split, val_mode, input_var=input_var, seed=seed)
        entry = EpochLog(epoch, state.learning_rate_at(epoch), total / seen, val_loss, val_acc)
        log.info('epoch %d: lr=%g train_loss=%.6g val_loss=%.6g val_acc=%.4f', epoch, entry.lr, entry.train_loss,
                 val_loss, val_acc)
        history.append(entry)
    return TrainResult(params, history)


def write_training_log(path, history):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for entry in history:
            writer.writerow([entry.epoch] + ['%.6g' % value for value in entry.as_row()[1:]])


def save_checkpoint(path, params):
    """
    Writes ``params`` in the checkpoint layout described in the module documentation.
    """
    arrays = [('layer%d.%s' % (index, key), np.asarray(value, dtype='<f8'))
              for index, layer in enumerate(params) for key, value in sorted(layer.items())]
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(arrays)))
        for name, value in arrays:
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<I', value.ndim))
            f.write(struct.pack('<%dQ' % value.ndim, *value.shape))
        for _, value in arrays:
            f.write(np.ascontiguousarray(value).tobytes())
    log.debug('wrote %d arrays to %s', len(arrays), path)


class _Reader(object):
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise TruncatedFileError('%s: checkpoint ends unexpectedly at byte %d' % (self.path, len(self.data)))
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, n_layers=None):
    """
    Reads parameters written by :py:func:`save_checkpoint`.

    :param n_layers: Number of layers of the target network, so that trailing parameterless layers get empty dicts.
    :raises BadMagicError: if the file is not a checkpoint.
    :raises TruncatedFileError: if the file is shorter than its table declares.
    :raises DataError: for an unsupported version.
    """
    with open(path, 'rb') as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError('%s is not a momentflow checkpoint' % (path,))
    version, count = reader.unpack('<II')
    if version != CHECKPOINT_VERSION:
        raise DataError('%s: unsupported checkpoint version %d' % (path, version))
    table = []
    for _ in range(count):
        length, = reader.unpack('<H')
        name = reader.take(length).decode('utf-8')
        ndim, = reader.unpack('<I')
        table.append((name, reader.unpack('<%dQ' % ndim)))
    layers = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=int))
        value = np.frombuffer(reader.take(8 * size), dtype='<f8').reshape(shape).astype(float)
        layer, _, key = name.partition('.')
        layers.setdefault(int(layer[len('layer'):]), {})[key] = value
    n_layers = max(n_layers or 0, max(layers) + 1 if layers else 0)
    return [layers.get(index, {}) for index in range(n_layers)]
