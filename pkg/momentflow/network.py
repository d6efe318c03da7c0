# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.network` module turns a :py:class:`~momentflow.config.NetworkConfig` into a runnable
:py:class:`Network` and implements the whole-network operations: the recorded forward pass in any propagation mode,
the propagation of dataset statistics over channels, and the analytic normalization of parameters.

.. doctest::

    >>> import numpy as np
    >>> from momentflow.config import parse_config
    >>> from momentflow.network import Network
    >>> net = Network(parse_config('input shape=3\\nlinear out=2\\nactivation name=relu\\nsoftmax_head'))
    >>> params = net.init_params(seed=0)
    >>> record = net.forward(params, np.zeros((5, 3)), 'ap2')
    >>> record.posterior.log_probs.shape
    (5, 2)
"""

import logging

import numpy as np

from .common import ConfigError, ModeError, MomentTensor, NumericalError, PropagationMode, ShapeError
from .config import load_config
from .layers import LAYER_KINDS, Conv2d, Linear, Normalize, SoftmaxHead
from .activations import get_activation


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)


def build_layer(spec, defaults=None, use_bias=None):
    """
    Instantiates the layer described by ``spec``, filling unspecified variants from the configuration ``defaults``.

    :raises ConfigError: carrying the line of ``spec`` if its options are invalid.
    """
    defaults = defaults or {}
    options = dict(spec.options)
    if spec.kind == 'activation':
        if 'name' not in options:
            raise ConfigError('activation needs name=', spec.line)
        try:
            activation = get_activation(options['name'])
        except ConfigError as e:
            raise type(e)(e.message, spec.line)
        if 'variant' not in options and activation.variants and options['name'] in defaults:
            options['variant'] = defaults[options['name']]
        if 'var_variant' not in options and defaults.get('var_variant') in activation.var_variants:
            options['var_variant'] = defaults['var_variant']
    elif spec.kind == 'softmax_head':
        options.setdefault('variant', defaults.get('softmax', 'simplified'))
    elif spec.kind == 'maxpool' and defaults.get('var_variant') in ('exact', 'fitted'):
        options.setdefault('var_variant', defaults['var_variant'])
    elif spec.kind in ('linear', 'conv2d') and use_bias is not None:
        options.setdefault('bias', use_bias)
    try:
        return LAYER_KINDS[spec.kind](**options)
    except ConfigError as e:
        raise type(e)(e.message, spec.line)
    except TypeError as e:
        raise ConfigError('%s: %s' % (spec.kind, e), spec.line)


class ForwardRecord(object):
    """
    Everything a forward pass produced.

    Attributes
    ----------
    mode : PropagationMode
    tensors : list[MomentTensor]
        The network input followed by the output of every layer before the softmax head.
    caches : list
        Per-layer state needed by the backward pass.
    posterior : ClassPosterior or None
        Output of the softmax head, if the network has one.
    """

    def __init__(self, mode, tensors, caches, posterior):
        self.mode = mode
        self.tensors = tensors
        self.caches = caches
        self.posterior = posterior

    @property
    def output(self):
        return self.tensors[-1]


class Network(object):
    """
    A feed-forward stack of layers built from a :py:class:`~momentflow.config.NetworkConfig`. Parameters are kept
    outside the network, as a list with one ``dict`` per layer, so that a network object can be shared freely.

    :raises ConfigError: if the configuration is invalid, including layer shapes that do not compose.
    """

    def __init__(self, config):
        self.config = config
        self.layers = []
        self.shapes = [config.input_shape]
        specs = config.layers
        for index, spec in enumerate(specs):
            follows = specs[index + 1].kind if index + 1 < len(specs) else None
            use_bias = False if follows == 'normalize' else None
            layer = build_layer(spec, config.defaults, use_bias)
            try:
                shape = layer.output_shape(self.shapes[-1])
            except ShapeError as e:
                raise ConfigError(str(e), spec.line, config.source)
            if isinstance(layer, SoftmaxHead) and index != len(specs) - 1:
                raise ConfigError('softmax_head must be the last layer', spec.line, config.source)
            self.layers.append(layer)
            self.shapes.append(shape)

    @classmethod
    def from_file(cls, path):
        return cls(load_config(path))

    @property
    def input_shape(self):
        return self.config.input_shape

    @property
    def has_head(self):
        return bool(self.layers) and isinstance(self.layers[-1], SoftmaxHead)

    @property
    def stochastic(self):
        return any(getattr(layer, 'stochastic', False) for layer in self.layers)

    def init_params(self, seed=None):
        """
        Draws initial parameters: weights and biases uniform in :math:`\\pm 1/\\sqrt{\\mathrm{fan\\ in}}`.

        :param seed: Defaults to the configuration seed.
        """
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        return [layer.init_params(shape, rng) for layer, shape in zip(self.layers, self.shapes)]

    def check_params(self, params):
        if len(params) != len(self.layers):
            raise ShapeError('expected parameters for %d layers, got %d' % (len(self.layers), len(params)))
        reference = self.init_params(0)
        for index, (given, expected) in enumerate(zip(params, reference)):
            if set(given) != set(expected):
                raise ShapeError('layer %d expects parameters %s' % (index, sorted(expected)))
            for name, value in expected.items():
                if np.shape(given[name]) != value.shape:
                    raise ShapeError('layer %d parameter %s has shape %s, expected %s' %
                                     (index, name, np.shape(given[name]), value.shape))

    def _as_input(self, x):
        if not isinstance(x, MomentTensor):
            x = MomentTensor(x)
        if x.shape == self.input_shape or x.shape == (int(np.prod(self.input_shape)),):
            x = x.reshape((1,) + self.input_shape)
        expected = int(np.prod(self.input_shape))
        if x.mean.ndim < 1 or int(np.prod(x.shape[1:])) != expected:
            raise ShapeError('network expects inputs of shape %s, got %s' % (self.input_shape, x.shape))
        return x.reshape((x.shape[0],) + self.input_shape)

    def forward(self, params, x, mode, seed=None, call_index=0):
        """
        Runs the network on a batch and records every intermediate tensor.

        In ``SAMPLE`` mode the input itself is first drawn from :math:`N(\\mu, \\sigma^2)` wherever the input variance is
        positive, and all noise is drawn from ``numpy.random.default_rng([seed, call_index])`` so that concurrent calls
        with distinct call indices are reproducible.

        :param x: A :py:class:`~momentflow.common.MomentTensor` or an array of input values.
        :param mode: A :py:class:`~momentflow.common.PropagationMode` or its name.
        :raises ModeError: in ``SAMPLE`` mode without a seed.
        """
        mode = PropagationMode.parse(mode)
        x = self._as_input(x)
        rng = None
        if mode is PropagationMode.SAMPLE:
            if seed is None:
                raise ModeError('SAMPLE propagation requires a seed')
            rng = np.random.default_rng([seed, call_index])
            if np.any(x.var > 0):
                x = MomentTensor(x.mean + np.sqrt(x.var) * rng.standard_normal(x.shape))
        elif mode is PropagationMode.AP1:
            x = MomentTensor(x.mean)
        tensors = [x]
        caches = []
        posterior = None
        current = x
        for layer, layer_params in zip(self.layers, params):
            out, cache = layer.forward(layer_params, current, mode, rng)
            caches.append(cache)
            if isinstance(layer, SoftmaxHead):
                posterior = out
            else:
                tensors.append(out)
                current = out
        return ForwardRecord(mode, tensors, caches, posterior)

    def __repr__(self):
        return 'Network(%s)' % ', '.join(repr(layer) for layer in self.layers)


def network_forward(network, params, x, mode, seed=None, call_index=0):
    """
    Functional form of :py:meth:`Network.forward`.
    """
    return network.forward(params, x, mode, seed, call_index)


def _stats_tensor(stats, channels):
    if isinstance(stats, tuple):
        mean, var = stats
    else:
        mean, var = stats.mean, stats.var
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    if mean.shape == (1,) and channels > 1:
        mean = np.repeat(mean, channels)
        var = np.repeat(var, channels)
    if mean.shape != (channels,):
        raise ShapeError('expected statistics for %d input channels, got %d' % (channels, mean.size))
    return MomentTensor(mean, var)


def propagate_dataset_stats(network, params, dataset_stats):
    """
    Propagates per-channel input statistics through the network in AP2 fashion with every spatial position collapsed:
    each channel is one unit, convolutions become channel-mixing maps using kernel sums for means and squared kernel
    sums for variances.

    :param dataset_stats: A :py:class:`~momentflow.data.DatasetStats`, a ``(mean, var)`` tuple or a
        :py:class:`~momentflow.common.MomentTensor`, with one entry per input channel (or a single entry shared by all).
    :return: A list with the input statistics followed by the statistics after every layer.
    """
    current = _stats_tensor(dataset_stats, network.input_shape[0])
    result = [current]
    for layer, layer_params, shape in zip(network.layers, params, network.shapes):
        current = layer.channel_stats(layer_params, current, shape)
        result.append(current)
    return result


def _copy_params(params):
    return [{name: np.array(value, copy=True) for name, value in layer.items()} for layer in params]


def _normalizer(stats, index, layer):
    std = np.sqrt(stats.var)
    if np.any(std <= 0):
        channel = int(np.argmin(std))
        raise NumericalError('channel %d entering layer %d (%s) has zero propagated variance' % (channel, index,
                                                                                               layer.kind))
    return stats.mean, std


def apply_analytic_normalization(network, params, dataset_stats):
    """
    Re-initializes parameters so that the propagated dataset statistics are zero-mean and unit-variance per channel at
    every normalization point, walking the layers in order and re-estimating the statistics after each step.

    If the network contains ``normalize`` layers those are the normalization points: their scale and shift become
    :math:`1/\\sigma` and :math:`-\\mu/\\sigma`, and the bias of the linear or convolutional layer just before them is
    zeroed. Otherwise every linear and convolutional layer is rescaled in place.

    :return: New parameters; ``params`` is not modified.
    :raises NumericalError: if a channel reaching a normalization point has zero variance.
    """
    params = _copy_params(params)
    normalizers = [i for i, layer in enumerate(network.layers) if isinstance(layer, Normalize)]
    if normalizers:
        for index in normalizers:
            previous = network.layers[index - 1] if index > 0 else None
            if isinstance(previous, (Linear, Conv2d)):
                params[index - 1]['bias'][:] = 0.0
            stats = propagate_dataset_stats(network, params, dataset_stats)[index]
            mean, std = _normalizer(stats, index, network.layers[index])
            params[index]['scale'] = 1.0 / std
            params[index]['shift'] = -mean / std
            log.debug('normalized layer %d: %d channels, propagated std in [%g, %g]', index, std.size, std.min(),
                      std.max())
    else:
        for index, layer in enumerate(network.layers):
            if not isinstance(layer, (Linear, Conv2d)):
                continue
            stats = propagate_dataset_stats(network, params, dataset_stats)[index + 1]
            mean, std = _normalizer(stats, index, layer)
            shape = (-1,) + (1,) * (params[index]['weight'].ndim - 1)
            params[index]['weight'] = params[index]['weight'] / std.reshape(shape)
            params[index]['bias'] = (params[index]['bias'] - mean) / std
            log.debug('rescaled layer %d: %d channels, propagated std in [%g, %g]', index, std.size, std.min(),
                      std.max())
    return params
