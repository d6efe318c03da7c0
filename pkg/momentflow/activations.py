# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.activations` module is the registry of activation types that may appear in an ``activation``
layer. Each :py:class:`ActivationType` bundles the three behaviours a unit needs, one per propagation mode: the moment
map and its Jacobian (AP2), the mean map and its derivative (AP1), and a sampler of the latent variable form (SAMPLE).

Stochastic units are sampled as a step of their input minus independent noise; for instance a logistic Bernoulli unit
fires when :math:`x - Z \\geq 0` with :math:`Z` standard logistic, which happens with probability :math:`S(x)`.

.. doctest::

    >>> from momentflow.activations import get_activation
    >>> act = get_activation('relu')
    >>> act.stochastic
    False
    >>> sorted(act.variants)
    ['logistic', 'normal']
"""

import numpy as np

from . import moments
from .common import ConfigError, UnknownActivationError
from .kernels import logistic_sigmoid, std_normal_cdf, std_normal_pdf


__author__ = 'The MomentFlow Authors'

ACTIVATIONS = {}


class ActivationType(object):
    """
    Describes one kind of activation.

    Parameters
    ----------
    name : str
        The name used in network configurations.
    moments : callable
        ``moments(mean, var, options) -> ScalarMoments``.
    jacobian : callable
        ``jacobian(mean, var, options) -> MomentJacobian``.
    ap1 : callable
        ``ap1(x, options)``, the mean map applied to deterministic inputs.
    ap1_grad : callable
        ``ap1_grad(x, options)``, the derivative of ``ap1``.
    sample : callable
        ``sample(x, rng, options)``, one draw of the unit's output given its input.
    stochastic : bool
        Whether the unit injects its own noise.
    variants, var_variants : tuple[str]
        Accepted values of the ``variant`` and ``var_variant`` options; the first entry is the default.
    has_slope : bool
        Whether the ``alpha`` option is accepted.
    """

    def __init__(self, name, moments, jacobian, ap1, ap1_grad, sample, stochastic=False, variants=(),
                 var_variants=(), has_slope=False):
        self.name = name
        self.moments = moments
        self.jacobian = jacobian
        self.ap1 = ap1
        self.ap1_grad = ap1_grad
        self.sample = sample
        self.stochastic = stochastic
        self.variants = tuple(variants)
        self.var_variants = tuple(var_variants)
        self.has_slope = has_slope

    def options(self, variant=None, var_variant=None, alpha=None):
        """
        Validates and completes the options of an activation layer.

        :raises ConfigError: if an option is not accepted by this activation.
        """
        result = {}
        if variant is not None and variant not in self.variants:
            raise ConfigError('activation %s has no variant %r' % (self.name, variant))
        if self.variants:
            result['variant'] = variant or self.variants[0]
        if var_variant is not None and var_variant not in self.var_variants:
            raise ConfigError('activation %s has no variance variant %r' % (self.name, var_variant))
        if self.var_variants:
            result['var_variant'] = var_variant or self.var_variants[0]
        if alpha is not None and not self.has_slope:
            raise ConfigError('activation %s does not take a slope' % (self.name,))
        if self.has_slope:
            alpha = 0.01 if alpha is None else float(alpha)
            if not 0.0 <= alpha < 1.0:
                raise ConfigError('activation %s slope must lie in [0, 1), got %r' % (self.name, alpha))
            result['alpha'] = alpha
        return result

    def __repr__(self):
        return 'ActivationType(%r)' % (self.name,)


def define_activation(name, *args, **kwargs):
    activation = ActivationType(name, *args, **kwargs)
    ACTIVATIONS[name] = activation
    globals()[name.upper()] = activation
    return activation


def get_activation(name):
    """
    Looks up a registered activation by name.

    :raises UnknownActivationError: if no activation of that name exists.
    """
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UnknownActivationError('unknown activation %r (known: %s)' % (name, ', '.join(sorted(ACTIVATIONS))))


def _step(x):
    return np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))


def _zero_grad(x, options):
    return np.zeros_like(x)


def _sigmoid_grad(x, options):
    s = logistic_sigmoid(x)
    return s * (1.0 - s)


def _deterministic(function):
    return lambda x, rng, options: function(x, options)


def _relu(x, options):
    return np.maximum(x, 0.0)


def _lrelu(x, options):
    return np.where(x >= 0, x, options['alpha'] * x)


def _sigmoid(x, options):
    return logistic_sigmoid(x)


def _normalcdf(x, options):
    return std_normal_cdf(x)


define_activation(
    'relu',
    lambda m, v, o: moments.relu_moments(m, v, o['variant'], o['var_variant']),
    lambda m, v, o: moments.relu_jacobian(m, v, o['variant'], o['var_variant']),
    _relu,
    lambda x, o: (x > 0).astype(float),
    _deterministic(_relu),
    variants=('normal', 'logistic'), var_variants=('exact', 'fitted'))

define_activation(
    'lrelu',
    lambda m, v, o: moments.lrelu_moments(m, v, o['alpha'], o['var_variant']),
    lambda m, v, o: moments.lrelu_jacobian(m, v, o['alpha'], o['var_variant']),
    _lrelu,
    lambda x, o: np.where(x >= 0, 1.0, o['alpha']),
    _deterministic(_lrelu),
    var_variants=('exact', 'fitted'), has_slope=True)

define_activation(
    'heaviside',
    lambda m, v, o: moments.heaviside_moments(m, v, o['variant']),
    lambda m, v, o: moments.heaviside_jacobian(m, v, o['variant']),
    lambda x, o: _step(x),
    _zero_grad,
    lambda x, rng, o: _step(x),
    variants=('normal', 'logistic'))

define_activation(
    'logistic_bernoulli',
    lambda m, v, o: moments.logistic_bernoulli_mean(m, v, o['variant']),
    lambda m, v, o: moments.logistic_bernoulli_jacobian(m, v, o['variant']),
    _sigmoid,
    _sigmoid_grad,
    lambda x, rng, o: (x - rng.logistic(size=np.shape(x)) >= 0).astype(float),
    stochastic=True, variants=('ap2b', 'ap2a', 'ap1', 'pea'))

define_activation(
    'logistic_transform',
    lambda m, v, o: moments.logistic_transform_moments(m, v, o['var_variant']),
    lambda m, v, o: moments.logistic_transform_jacobian(m, v, o['var_variant']),
    _sigmoid,
    _sigmoid_grad,
    _deterministic(_sigmoid),
    var_variants=('heuristic', 'large_sigma'))

define_activation(
    'probit',
    lambda m, v, o: moments.probit_mean(m, v),
    lambda m, v, o: moments.probit_jacobian(m, v),
    _normalcdf,
    lambda x, o: std_normal_pdf(x),
    lambda x, rng, o: (x - rng.standard_normal(size=np.shape(x)) >= 0).astype(float),
    stochastic=True)

define_activation(
    'normalcdf_transform',
    lambda m, v, o: moments.normalcdf_transform_mean(m, v),
    lambda m, v, o: moments.normalcdf_transform_jacobian(m, v),
    _normalcdf,
    lambda x, o: std_normal_pdf(x),
    _deterministic(_normalcdf))

define_activation(
    'abs',
    lambda m, v, o: moments.abs_moments(m, v),
    lambda m, v, o: moments.abs_jacobian(m, v),
    lambda x, o: np.abs(x),
    lambda x, o: np.sign(x),
    lambda x, rng, o: np.abs(x))
