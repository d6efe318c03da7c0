# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.belief` module evaluates single logistic Bernoulli units with independent Bernoulli inputs
exactly, by enumerating all input configurations, and compares the exact firing probability with the approximations
of :py:func:`~momentflow.moments.logistic_bernoulli_mean`.

A logistic unit can implement the AND of two binary inputs up to an error :math:`\\epsilon` with weights
:math:`a = 2\\log((1-\\epsilon)/\\epsilon)` and bias :math:`b = -3\\log((1-\\epsilon)/\\epsilon)`; feeding it
probabilities instead of bits shows how far the expectation of the unit is from the unit of the expectations.

.. doctest::

    >>> from momentflow.belief import derive_and_gate_params
    >>> a, b = derive_and_gate_params(0.05)
    >>> round(a, 4), round(b, 4)
    (5.8889, -8.8333)
"""

import itertools
import logging

import numpy as np
from scipy.special import xlogy

from .kernels import logistic_sigmoid
from .moments import logistic_bernoulli_mean


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

AND_GATE_INPUTS = ((0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.25, 0.25), (0.5, 0.5), (0.75, 0.75))
SWEEP_WEIGHTS = (5.1, 4.6, 3.5, 0.9, 4.3, 7.0, 1.1, 0.7, 3.6, 0.3)
SWEEP_VARIANTS = ('ap1', 'ap2a', 'ap2b', 'pea')
MAX_ENUMERATED_INPUTS = 20


def derive_and_gate_params(epsilon):
    """
    Weight and bias of a logistic unit that outputs :math:`1-\\epsilon` when both binary inputs are on and at most
    :math:`\\epsilon` otherwise.

    :raises ValueError: unless :math:`0 < \\epsilon < 0.5`.
    """
    if not 0.0 < epsilon < 0.5:
        raise ValueError('epsilon must lie in (0, 0.5), got %r' % (epsilon,))
    logit = np.log((1.0 - epsilon) / epsilon)
    return float(2.0 * logit), float(-3.0 * logit)


def bernoulli_expectation(weights, bias, probs, function=logistic_sigmoid):
    """
    :math:`E[f(w^T X + b)]` for independent :math:`X_i \\sim \\mathrm{Bernoulli}(p_i)`, by enumeration of all
    :math:`2^n` configurations.
    """
    weights = np.asarray(weights, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if weights.shape != probs.shape or weights.ndim != 1:
        raise ValueError('weights and probabilities must be vectors of equal length')
    if weights.size > MAX_ENUMERATED_INPUTS:
        raise ValueError('enumeration is limited to %d inputs' % (MAX_ENUMERATED_INPUTS,))
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError('probabilities must lie in [0, 1]')
    configs = np.array(list(itertools.product((0.0, 1.0), repeat=weights.size))).reshape(-1, weights.size)
    likelihood = np.prod(np.where(configs > 0, probs, 1.0 - probs), axis=1)
    return float(np.sum(likelihood * function(configs @ weights + bias)))


def preactivation_moments(weights, bias, probs):
    """
    Mean and variance of :math:`w^T X + b` for independent Bernoulli inputs.
    """
    weights = np.asarray(weights, dtype=float)
    probs = np.asarray(probs, dtype=float)
    return float(weights @ probs + bias), float((weights * weights) @ (probs * (1.0 - probs)))


class AndGateRow(object):
    """
    One input row of the AND gate table.
    """

    def __init__(self, p1, p2, exact_and, exact, ap1, ap2b):
        self.p1 = p1
        self.p2 = p2
        self.exact_and = exact_and
        self.exact = exact
        self.ap1 = ap1
        self.ap2b = ap2b

    def as_row(self):
        return [self.p1, self.p2, self.exact_and, self.exact, self.ap1, self.ap2b]

    def __repr__(self):
        return 'AndGateRow(%s)' % ', '.join('%.4g' % value for value in self.as_row())


AND_GATE_COLUMNS = ('p1', 'p2', 'exact_and', 'exact', 'ap1', 'ap2b')


def and_gate_table(epsilon=0.05, inputs=AND_GATE_INPUTS):
    """
    For each pair of input probabilities: :math:`E[X_1 \\wedge X_2]`, the exact firing probability of the AND unit,
    its AP1 value (the unit applied to the input means) and its AP2b value.
    """
    a, b = derive_and_gate_params(epsilon)
    weights = np.array([a, a])
    rows = []
    for p1, p2 in inputs:
        probs = np.array([p1, p2])
        mean, var = preactivation_moments(weights, b, probs)
        rows.append(AndGateRow(p1, p2, p1 * p2, bernoulli_expectation(weights, b, probs),
                               float(logistic_sigmoid(mean)), float(logistic_bernoulli_mean(mean, var, 'ap2b').mean)))
    return rows


def bernoulli_kl(p, q):
    """
    KL divergence in nats between Bernoulli distributions with success probabilities ``p`` and ``q``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return xlogy(p, p) - xlogy(p, q) + xlogy(1.0 - p, 1.0 - p) - xlogy(1.0 - p, 1.0 - q)


class KLSweep(object):
    """
    Result of :py:func:`logistic_unit_kl_sweep`: the biases, the exact firing probabilities and a dict mapping each
    approximation (and ``'sampling'``) to its KL divergence from the exact output at every bias.
    """

    def __init__(self, n_inputs, biases, exact, kl):
        self.n_inputs = n_inputs
        self.biases = biases
        self.exact = exact
        self.kl = kl

    def rows(self):
        names = sorted(self.kl)
        for index, bias in enumerate(self.biases):
            yield [self.n_inputs, bias, self.exact[index]] + [self.kl[name][index] for name in names]


def logistic_unit_kl_sweep(n_inputs, biases=None, n_samples=50, seed=0, probs=0.5):
    """
    Sweeps the bias of a logistic Bernoulli unit fed by ``n_inputs`` Bernoulli inputs with weights taken from
    :py:data:`SWEEP_WEIGHTS` and measures, at every bias, the KL divergence of the exact output distribution from the
    AP1, AP2a, AP2b and PEA approximations and from a sampling estimate with ``n_samples`` draws.

    :param biases: Defaults to 50 points evenly spaced over [-20, 5].
    """
    if not 1 <= n_inputs <= len(SWEEP_WEIGHTS):
        raise ValueError('n_inputs must lie in [1, %d]' % (len(SWEEP_WEIGHTS),))
    biases = np.linspace(-20.0, 5.0, 50) if biases is None else np.asarray(biases, dtype=float)
    weights = np.array(SWEEP_WEIGHTS[:n_inputs])
    probs = np.full(n_inputs, float(probs))
    rng = np.random.default_rng(seed)
    exact = np.array([bernoulli_expectation(weights, bias, probs) for bias in biases])
    means = np.array([preactivation_moments(weights, bias, probs)[0] for bias in biases])
    var = preactivation_moments(weights, 0.0, probs)[1]
    kl = {}
    for variant in SWEEP_VARIANTS:
        approx = logistic_bernoulli_mean(means, np.full(means.shape, var), variant).mean
        kl[variant] = bernoulli_kl(exact, approx)
    inputs = rng.random((biases.size, n_samples, n_inputs)) < probs
    fired = rng.random((biases.size, n_samples)) < logistic_sigmoid(inputs @ weights + biases[:, np.newaxis])
    estimate = (fired.mean(axis=1) + 1.0 / (10.0 * n_samples)) / (1.0 + 2.0 / (10.0 * n_samples))
    kl['sampling'] = bernoulli_kl(exact, estimate)
    log.debug('KL sweep with %d inputs: mean KL %s', n_inputs,
              ', '.join('%s=%.3g' % (name, np.mean(value)) for name, value in sorted(kl.items())))
    return KLSweep(n_inputs, biases, exact, kl)
