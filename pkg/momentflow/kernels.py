# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.kernels` module collects the scalar special functions and distribution constants that every
moment formula in :py:mod:`momentflow.moments` is written in terms of. All functions are vectorized: they accept Python
scalars or :py:class:`numpy.ndarray` inputs and broadcast like any numpy ufunc.

.. doctest::

    >>> from momentflow.kernels import *
    >>> round(float(std_normal_pdf(0.0)), 6)
    0.398942
    >>> round(float(std_normal_cdf(1.0)), 6)
    0.841345
    >>> round(float(relu_var_R(0.0)), 6)
    0.340845
"""

import numpy as np
from scipy import special


__author__ = 'The MomentFlow Authors'

SIGMA_S_SQ = np.pi ** 2 / 3.0
SIGMA_S = np.pi / np.sqrt(3.0)
T_RELU_FIT = 0.3729

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_PI2_6 = np.pi ** 2 / 6.0


class KernelConstants(object):
    """
    Distribution constants shared by the moment formulas.

    Attributes
    ----------
    sigma_S_sq : float
        Variance of the standard logistic distribution, exactly :math:`\\pi^2/3`.
    sigma_S : float
        Standard deviation of the standard logistic distribution.
    t_relu_fit : float
        Slope constant of the logistic curve that approximates :py:func:`relu_var_R`.
    """
    sigma_S_sq = SIGMA_S_SQ
    sigma_S = SIGMA_S
    t_relu_fit = T_RELU_FIT


def std_normal_pdf(x):
    """
    Density of the standard normal distribution, :math:`\\delta(x)`.
    """
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x, fast=False):
    """
    Cumulative distribution function of the standard normal distribution, :math:`\\Phi(x)`.

    :param x: Point(s) at which to evaluate the cdf. Infinite values are accepted.
    :param fast: If true, use the logistic substitution :math:`\\Phi(x) \\approx S(x\\pi/\\sqrt{3})` instead of the
        accurate evaluation. The substitution deviates from the true cdf by less than 0.023.
    :return: Values in [0, 1].
    """
    x = np.asarray(x, dtype=float)
    if fast:
        return special.expit(x * SIGMA_S)
    return special.ndtr(x)


def log_std_normal_cdf(x):
    """
    Logarithm of :py:func:`std_normal_cdf`, accurate deep into the lower tail.
    """
    return special.log_ndtr(np.asarray(x, dtype=float))


def logistic_sigmoid(x):
    """
    The logistic sigmoid :math:`S(x) = 1/(1+e^{-x})`. Saturates to exactly 0 or 1 without overflow.
    """
    return special.expit(np.asarray(x, dtype=float))


def softplus(x):
    """
    :math:`\\log(1+e^x)`, evaluated without overflow for large positive ``x``.
    """
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


def dilog(x):
    """
    The dilogarithm :math:`\\mathrm{Li}_2(x)` for non-positive real ``x``.

    Arguments in [-1, 0] are handed to :py:func:`scipy.special.spence` directly (``spence(1 - x) = Li2(x)``); arguments
    below -1 are mapped back into that range with the inversion identity
    :math:`\\mathrm{Li}_2(x) = -\\pi^2/6 - \\tfrac{1}{2}\\ln^2(-x) - \\mathrm{Li}_2(1/x)`.

    :raises ValueError: if any argument is positive.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x > 0):
        raise ValueError('dilog is only defined here for non-positive arguments')
    inner = x >= -1.0
    safe_inner = np.where(inner, x, -1.0)
    safe_outer = np.where(inner, -2.0, x)
    near = special.spence(1.0 - safe_inner)
    far = -_PI2_6 - 0.5 * np.log(-safe_outer) ** 2 - special.spence(1.0 - 1.0 / safe_outer)
    return np.where(inner, near, far)


def dilog_neg_exp(z):
    """
    :math:`\\mathrm{Li}_2(-e^{z})` evaluated without forming :math:`e^z` for large ``z``.

    For positive ``z`` the inversion identity gives
    :math:`-\\pi^2/6 - z^2/2 - \\mathrm{Li}_2(-e^{-z})`.
    """
    z = np.asarray(z, dtype=float)
    tail = np.exp(-np.abs(z))
    base = special.spence(1.0 + tail)
    return np.where(z <= 0, base, -_PI2_6 - 0.5 * z * z - base)


def logsumexp(xs, axis=None):
    """
    :math:`\\log \\sum_i e^{x_i}` computed by subtracting the maximum before exponentiation.

    :raises ValueError: on an empty input.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0 or (axis is not None and xs.shape[axis] == 0):
        raise ValueError('logsumexp of an empty sequence')
    return special.logsumexp(xs, axis=axis)


def relu_var_R(a, variant='exact', clamp=True):
    """
    The dimensionless ReLU variance function

    .. math::

        R(a) = a\\delta(a) + (a^2+1)\\Phi(a) - (a\\Phi(a)+\\delta(a))^2

    so that :math:`\\mathrm{Var}[\\max(0, X)] = \\sigma^2 R(\\mu/\\sigma)` for :math:`X \\sim N(\\mu, \\sigma^2)`.

    The exact variant is evaluated in the rearranged form
    :math:`\\Phi(a) + a^2\\Phi(a)\\Phi(-a) + a\\delta(a)(\\Phi(-a)-\\Phi(a)) - \\delta(a)^2`, which keeps the large
    positive ``a`` tail accurate. The cancellation can still go slightly negative, hence the clamp.

    :param a: Ratio :math:`\\mu/\\sigma`.
    :param variant: ``'exact'`` or ``'fitted'`` (the logistic curve :math:`S(a/t)` with ``t = T_RELU_FIT``).
    :param clamp: Clip the exact result to [0, 1].
    """
    a = np.asarray(a, dtype=float)
    if variant == 'fitted':
        return special.expit(a / T_RELU_FIT)
    if variant != 'exact':
        raise ValueError('Unknown R(a) variant %r' % (variant,))
    cdf = special.ndtr(a)
    ccdf = special.ndtr(-a)
    pdf = std_normal_pdf(a)
    r = cdf + a * a * cdf * ccdf + a * pdf * (ccdf - cdf) - pdf * pdf
    if clamp:
        r = np.clip(r, 0.0, 1.0)
    return r
