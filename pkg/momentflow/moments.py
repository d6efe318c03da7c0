# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.moments` module implements the per-unit moment maps: given the mean and variance of a unit's
input it returns the mean and variance of the unit's output. Every map has a companion ``*_jacobian`` function returning
the four partial derivatives of the output moments with respect to the input moments; the training engine chains these
to backpropagate through moment propagation.

All maps are vectorized over numpy arrays. Normal variants assume a Gaussian input, logistic variants a logistic input.
A zero input variance short-circuits to the deterministic limit before any division by :math:`\\sigma`, and the
Jacobians at zero variance are the right limits of the smooth expressions.

.. doctest::

    >>> from momentflow.moments import relu_moments, product_moments
    >>> m, v = relu_moments(0.0, 1.0)
    >>> round(float(m), 6), round(float(v), 6)
    (0.398942, 0.340845)
    >>> m, v = product_moments(2.0, 1.0, 3.0, 4.0)
    >>> float(m), float(v)
    (6.0, 29.0)
"""

import numpy as np

from .kernels import SIGMA_S, SIGMA_S_SQ, T_RELU_FIT, dilog_neg_exp, log_std_normal_cdf, logistic_sigmoid, \
    logsumexp, relu_var_R, softplus, std_normal_cdf, std_normal_pdf


__author__ = 'The MomentFlow Authors'

_LN2 = np.log(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ScalarMoments(object):
    """
    A (mean, variance) pair. The fields may hold arrays, in which case each element is an independent unit.

    ScalarMoments unpacks like a tuple::

        mean, var = relu_moments(0.0, 1.0)
    """

    __slots__ = ('mean', 'var')

    def __init__(self, mean, var=0.0):
        self.mean = np.asarray(mean, dtype=float)[()]
        self.var = np.asarray(var, dtype=float)[()]
        if np.any(np.asarray(self.var) < 0):
            raise ValueError('variance must be non-negative')

    @property
    def std(self):
        return np.sqrt(self.var)

    def __iter__(self):
        yield self.mean
        yield self.var

    def __repr__(self):
        return '%s(mean=%r, var=%r)' % (type(self).__name__, self.mean, self.var)


class BinaryMoments(ScalarMoments):
    """
    Moments of a {0, 1} valued unit. Only the mean is free; the variance is ``mean * (1 - mean)``.
    """

    __slots__ = ()

    def __init__(self, mean):
        mean = np.clip(np.asarray(mean, dtype=float), 0.0, 1.0)
        super(BinaryMoments, self).__init__(mean, mean * (1.0 - mean))


class ClassPosterior(object):
    """
    A discrete distribution over classes stored as natural-log probabilities along the last axis.
    """

    __slots__ = ('log_probs',)

    def __init__(self, log_probs):
        self.log_probs = np.asarray(log_probs, dtype=float)

    @property
    def probs(self):
        return np.exp(self.log_probs)

    @property
    def n_classes(self):
        return self.log_probs.shape[-1]

    def predict(self):
        return np.argmax(self.log_probs, axis=-1)

    def __getitem__(self, item):
        return ClassPosterior(self.log_probs[item])

    def __repr__(self):
        return 'ClassPosterior(%r)' % (self.probs,)


class MomentJacobian(object):
    """
    Partial derivatives of a moment map ``(mean, var) -> (mean', var')``.
    """

    __slots__ = ('dmean_dmean', 'dmean_dvar', 'dvar_dmean', 'dvar_dvar')

    def __init__(self, dmean_dmean, dmean_dvar, dvar_dmean, dvar_dvar):
        self.dmean_dmean = dmean_dmean
        self.dmean_dvar = dmean_dvar
        self.dvar_dmean = dvar_dmean
        self.dvar_dvar = dvar_dvar

    def pullback(self, g_mean, g_var):
        """
        Maps gradients with respect to the outputs to gradients with respect to the inputs.
        """
        return (g_mean * self.dmean_dmean + g_var * self.dvar_dmean,
                g_mean * self.dmean_dvar + g_var * self.dvar_dvar)

    @classmethod
    def binary(cls, mean, dmean_dmean, dmean_dvar):
        """
        Jacobian of a binary unit, whose variance ``m(1-m)`` follows its mean.
        """
        slope = 1.0 - 2.0 * mean
        return cls(dmean_dmean, dmean_dvar, slope * dmean_dmean, slope * dmean_dvar)


def _split(mean, var):
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError('variance must be non-negative')
    mean, var = np.broadcast_arrays(mean, var)
    sigma = np.sqrt(var)
    zero = sigma <= 0
    safe = np.where(zero, 1.0, sigma)
    return mean, var, sigma, safe, zero


def _step(x, low=0.0, high=1.0):
    return np.where(x > 0, high, np.where(x < 0, low, 0.5 * (low + high)))


def _check_choice(name, value, choices):
    if value not in choices:
        raise ValueError('Unknown %s %r (expected one of %s)' % (name, value, ', '.join(choices)))


# Heaviside

def heaviside_moments(mean, var, variant='normal'):
    """
    Moments of :math:`[X \\geq 0]`.

    :param variant: ``'normal'`` gives :math:`\\Phi(\\mu/\\sigma)`, ``'logistic'`` gives :math:`S(\\mu/s)` with
        :math:`s = \\sigma/\\sigma_S`.
    """
    _check_choice('heaviside variant', variant, ('normal', 'logistic'))
    mean, var, sigma, safe, zero = _split(mean, var)
    a = mean / safe
    if variant == 'normal':
        p = std_normal_cdf(a)
    else:
        p = logistic_sigmoid(SIGMA_S * a)
    return BinaryMoments(np.where(zero, _step(mean), p))


def heaviside_jacobian(mean, var, variant='normal'):
    _check_choice('heaviside variant', variant, ('normal', 'logistic'))
    mean, var, sigma, safe, zero = _split(mean, var)
    a = mean / safe
    if variant == 'normal':
        p = std_normal_cdf(a)
        pdf = std_normal_pdf(a)
        dmu = pdf / safe
        dvar = -a * pdf / (2.0 * safe * safe)
    else:
        u = SIGMA_S * a
        p = logistic_sigmoid(u)
        slope = p * (1.0 - p)
        dmu = slope * SIGMA_S / safe
        dvar = -slope * u / (2.0 * safe * safe)
    p = np.where(zero, _step(mean), p)
    return MomentJacobian.binary(p, np.where(zero, 0.0, dmu), np.where(zero, 0.0, dvar))


# ReLU

def relu_moments(mean, var, variant='normal', var_variant='exact'):
    """
    Moments of :math:`\\max(0, X)`.

    The normal variant has mean :math:`\\mu\\Phi(a) + \\sigma\\delta(a)` with :math:`a = \\mu/\\sigma` and variance
    :math:`\\sigma^2 R(a)`, where ``var_variant`` picks the exact :math:`R` or its logistic fit. The logistic variant
    has mean :math:`s\\log(1+e^{\\mu/s})` and second moment :math:`-2s^2\\mathrm{Li}_2(-e^{\\mu/s})`.
    """
    _check_choice('relu variant', variant, ('normal', 'logistic'))
    _check_choice('relu variance variant', var_variant, ('exact', 'fitted'))
    mean, var, sigma, safe, zero = _split(mean, var)
    if variant == 'normal':
        a = mean / safe
        m = mean * std_normal_cdf(a) + safe * std_normal_pdf(a)
        v = safe * safe * relu_var_R(a, var_variant)
    else:
        s = safe / SIGMA_S
        z = mean / s
        m = s * softplus(z)
        v = np.maximum(-2.0 * s * s * dilog_neg_exp(z) - m * m, 0.0)
    return ScalarMoments(np.where(zero, np.maximum(mean, 0.0), m), np.where(zero, 0.0, v))


def relu_jacobian(mean, var, variant='normal', var_variant='exact'):
    _check_choice('relu variant', variant, ('normal', 'logistic'))
    _check_choice('relu variance variant', var_variant, ('exact', 'fitted'))
    mean, var, sigma, safe, zero = _split(mean, var)
    v = safe * safe
    if variant == 'normal':
        a = mean / safe
        cdf = std_normal_cdf(a)
        pdf = std_normal_pdf(a)
        m = mean * cdf + safe * pdf
        dm_dmu = cdf
        dm_dvar = pdf / (2.0 * safe)
        if var_variant == 'exact':
            dv_dmu = 2.0 * m * std_normal_cdf(-a)
            dv_dvar = cdf - pdf * (a * cdf + pdf)
        else:
            fit = logistic_sigmoid(a / T_RELU_FIT)
            fit_slope = fit * (1.0 - fit)
            dv_dmu = safe * fit_slope / T_RELU_FIT
            dv_dvar = fit - a * fit_slope / (2.0 * T_RELU_FIT)
    else:
        s = safe / SIGMA_S
        z = mean / s
        sp = softplus(z)
        sig = logistic_sigmoid(z)
        m = s * sp
        ds_dvar = s / (2.0 * v)
        dm_dmu = sig
        dm_ds = sp - z * sig
        dm_dvar = dm_ds * ds_dvar
        dsecond_ds = -4.0 * s * dilog_neg_exp(z) - 2.0 * mean * sp
        dv_dmu = 2.0 * m * (1.0 - sig)
        dv_dvar = (dsecond_ds - 2.0 * m * dm_ds) * ds_dvar
    step = _step(mean)
    return MomentJacobian(np.where(zero, step, dm_dmu), np.where(zero, 0.0, dm_dvar),
                          np.where(zero, 0.0, dv_dmu), np.where(zero, step, dv_dvar))


# Leaky ReLU

def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ValueError('leaky relu slope must lie in [0, 1), got %r' % (alpha,))


def _max2_correlated(mean1, var1, mean2, var2, cov):
    """
    Mean and variance of :math:`\\max(X_1, X_2)` for jointly normal inputs with covariance ``cov``.
    """
    spread = np.sqrt(np.maximum(var1 + var2 - 2.0 * cov, 0.0))
    zero = spread <= 0
    safe = np.where(zero, 1.0, spread)
    a = (mean1 - mean2) / safe
    cdf = std_normal_cdf(a)
    ccdf = std_normal_cdf(-a)
    pdf = std_normal_pdf(a)
    m = mean1 * cdf + mean2 * ccdf + safe * pdf
    second = (mean1 * mean1 + var1) * cdf + (mean2 * mean2 + var2) * ccdf + (mean1 + mean2) * safe * pdf
    v = np.maximum(second - m * m, 0.0)
    return (np.where(zero, np.maximum(mean1, mean2), m),
            np.where(zero, np.where(mean1 >= mean2, var1, var2), v))


def lrelu_moments(mean, var, alpha=0.01, var_variant='exact'):
    """
    Moments of :math:`\\max(X, \\alpha X)` under a Gaussian input.

    The mean comes from the correlated maximum of :math:`X` and :math:`\\alpha X`; the exact variance is
    :math:`\\sigma^2(\\alpha^2 + 2\\alpha(1-\\alpha)\\Phi(a) + (1-\\alpha)^2 R(a))` and the fitted one
    :math:`\\sigma^2(\\alpha^2 + (1-\\alpha^2)S(a/t))`. With ``alpha=0`` this is :py:func:`relu_moments`.

    :raises ValueError: if ``alpha`` is outside [0, 1).
    """
    _check_alpha(alpha)
    _check_choice('lrelu variance variant', var_variant, ('exact', 'fitted'))
    mean, var, sigma, safe, zero = _split(mean, var)
    v = safe * safe
    m, _ = _max2_correlated(mean, v, alpha * mean, alpha * alpha * v, alpha * v)
    a = mean / safe
    if var_variant == 'exact':
        out_var = v * (alpha * alpha + 2.0 * alpha * (1.0 - alpha) * std_normal_cdf(a) +
                       (1.0 - alpha) ** 2 * relu_var_R(a))
    else:
        out_var = v * (alpha * alpha + (1.0 - alpha * alpha) * logistic_sigmoid(a / T_RELU_FIT))
    return ScalarMoments(np.where(zero, np.where(mean >= 0, mean, alpha * mean), m),
                         np.where(zero, 0.0, out_var))


def lrelu_jacobian(mean, var, alpha=0.01, var_variant='exact'):
    _check_alpha(alpha)
    _check_choice('lrelu variance variant', var_variant, ('exact', 'fitted'))
    mean, var, sigma, safe, zero = _split(mean, var)
    a = mean / safe
    cdf = std_normal_cdf(a)
    pdf = std_normal_pdf(a)
    beta = 1.0 - alpha
    dm_dmu = alpha + beta * cdf
    dm_dvar = beta * pdf / (2.0 * safe)
    if var_variant == 'exact':
        relu_mean = mean * cdf + safe * pdf
        dv_dmu = (2.0 * alpha * beta * safe * pdf +
                  beta * beta * 2.0 * relu_mean * std_normal_cdf(-a))
        dv_dvar = (alpha * alpha + 2.0 * alpha * beta * (cdf - 0.5 * a * pdf) +
                   beta * beta * (cdf - pdf * (a * cdf + pdf)))
    else:
        fit = logistic_sigmoid(a / T_RELU_FIT)
        fit_slope = fit * (1.0 - fit)
        dv_dmu = (1.0 - alpha * alpha) * safe * fit_slope / T_RELU_FIT
        dv_dvar = alpha * alpha + (1.0 - alpha * alpha) * (fit - a * fit_slope / (2.0 * T_RELU_FIT))
    return MomentJacobian(np.where(zero, _step(mean, alpha, 1.0), dm_dmu), np.where(zero, 0.0, dm_dvar),
                          np.where(zero, 0.0, dv_dmu), np.where(zero, _step(mean, alpha * alpha, 1.0), dv_dvar))


# Logistic Bernoulli

LOGISTIC_BERNOULLI_VARIANTS = ('ap2a', 'ap2b', 'ap1', 'pea')


def _laplace_cdf(x):
    # the piecewise exponential surrogate of S(x): Laplace cdf with scale 1/ln 2
    return np.where(x < 0, 0.5 * np.exp(_LN2 * np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-_LN2 * np.maximum(x, 0.0)))


def _pea_terms(mean, var, safe):
    # 2^mu E2 Phi(b1) and 2^-mu E2 Phi(b2), evaluated in the log domain
    half = 0.5 * _LN2 * _LN2 * var
    lower = np.exp(_LN2 * mean + half + log_std_normal_cdf((-mean - _LN2 * var) / safe))
    upper = np.exp(-_LN2 * mean + half + log_std_normal_cdf((mean - _LN2 * var) / safe))
    return lower, upper


def logistic_bernoulli_mean(mean, var, variant='ap2b'):
    """
    Approximate probability that a logistic Bernoulli unit fires, :math:`E[S(X)]`.

    ``'ap2a'``
        :math:`\\Phi(\\mu/\\sqrt{\\sigma^2+\\sigma_S^2})`, assuming a normal input.
    ``'ap2b'``
        :math:`S(\\mu/\\sqrt{\\sigma^2/\\sigma_S^2+1})`, assuming a logistic input.
    ``'ap1'``
        :math:`S(\\mu)`, ignoring the variance.
    ``'pea'``
        The exact expectation of the piecewise exponential surrogate of :math:`S` under a normal input.
    """
    _check_choice('logistic bernoulli variant', variant, LOGISTIC_BERNOULLI_VARIANTS)
    mean, var, sigma, safe, zero = _split(mean, var)
    if variant == 'ap2a':
        p = std_normal_cdf(mean / np.sqrt(var + SIGMA_S_SQ))
    elif variant == 'ap2b':
        p = logistic_sigmoid(mean / np.sqrt(var / SIGMA_S_SQ + 1.0))
    elif variant == 'ap1':
        p = logistic_sigmoid(mean)
    else:
        lower, upper = _pea_terms(mean, var, safe)
        p = std_normal_cdf(mean / safe) + 0.5 * (lower - upper)
        p = np.where(zero, _laplace_cdf(mean), p)
    return BinaryMoments(p)


def logistic_bernoulli_jacobian(mean, var, variant='ap2b'):
    _check_choice('logistic bernoulli variant', variant, LOGISTIC_BERNOULLI_VARIANTS)
    mean, var, sigma, safe, zero = _split(mean, var)
    if variant == 'ap2a':
        c = np.sqrt(var + SIGMA_S_SQ)
        u = mean / c
        p = std_normal_cdf(u)
        pdf = std_normal_pdf(u)
        dmu = pdf / c
        dvar = -pdf * u / (2.0 * c * c)
    elif variant == 'ap2b':
        c = np.sqrt(var / SIGMA_S_SQ + 1.0)
        u = mean / c
        p = logistic_sigmoid(u)
        slope = p * (1.0 - p)
        dmu = slope / c
        dvar = -slope * u / (2.0 * c * c * SIGMA_S_SQ)
    elif variant == 'ap1':
        p = logistic_sigmoid(mean)
        dmu = p * (1.0 - p)
        dvar = np.zeros_like(p)
    else:
        lower, upper = _pea_terms(mean, var, safe)
        p = std_normal_cdf(mean / safe) + 0.5 * (lower - upper)
        dmu = 0.5 * _LN2 * (lower + upper)
        dvar = 0.25 * _LN2 * _LN2 * (lower - upper)
        p = np.where(zero, _laplace_cdf(mean), p)
        dmu = np.where(zero, 0.5 * _LN2 * np.exp(-_LN2 * np.abs(mean)), dmu)
        dvar = np.where(zero, 0.0, dvar)
    return MomentJacobian.binary(p, dmu, dvar)


# Logistic transform

def logistic_transform_moments(mean, var, var_variant='heuristic'):
    """
    Moments of the deterministic sigmoid :math:`S(X)`.

    The mean is the ``'ap2b'`` expression of :py:func:`logistic_bernoulli_mean`. The ``'heuristic'`` variance is
    :math:`4\\sigma^2/(\\sigma^2+4)\\,(\\mu'(1-\\mu'))^2`; ``'large_sigma'`` is
    :math:`\\Phi((\\mu-1)/\\sqrt{\\sigma^2+\\sigma_S^2-1}) - \\mu'^2`, intended for :math:`\\sigma \\geq 2` and clipped to
    :math:`[0, \\mu'(1-\\mu')]`.
    """
    _check_choice('logistic transform variance variant', var_variant, ('heuristic', 'large_sigma'))
    mean, var, sigma, safe, zero = _split(mean, var)
    p = logistic_sigmoid(mean / np.sqrt(var / SIGMA_S_SQ + 1.0))
    bern = p * (1.0 - p)
    if var_variant == 'heuristic':
        v = 4.0 * var / (var + 4.0) * bern * bern
    else:
        v = std_normal_cdf((mean - 1.0) / np.sqrt(var + SIGMA_S_SQ - 1.0)) - p * p
        v = np.where(zero, 0.0, np.clip(v, 0.0, bern))
    return ScalarMoments(p, v)


def logistic_transform_jacobian(mean, var, var_variant='heuristic'):
    _check_choice('logistic transform variance variant', var_variant, ('heuristic', 'large_sigma'))
    mean, var, sigma, safe, zero = _split(mean, var)
    c = np.sqrt(var / SIGMA_S_SQ + 1.0)
    u = mean / c
    p = logistic_sigmoid(u)
    bern = p * (1.0 - p)
    dm_dmu = bern / c
    dm_dvar = -bern * u / (2.0 * c * c * SIGMA_S_SQ)
    if var_variant == 'heuristic':
        h = 4.0 * var / (var + 4.0)
        dh = 16.0 / (var + 4.0) ** 2
        dbern2 = 2.0 * bern * (1.0 - 2.0 * p)
        dv_dmu = h * dbern2 * dm_dmu
        dv_dvar = dh * bern * bern + h * dbern2 * dm_dvar
    else:
        d = np.sqrt(var + SIGMA_S_SQ - 1.0)
        w = (mean - 1.0) / d
        pdf = std_normal_pdf(w)
        raw = std_normal_cdf(w) - p * p
        inside = (raw > 0) & (raw < bern) & ~zero
        dv_dmu = np.where(inside, pdf / d - 2.0 * p * dm_dmu, 0.0)
        dv_dvar = np.where(inside, -pdf * w / (2.0 * d * d) - 2.0 * p * dm_dvar, 0.0)
    return MomentJacobian(dm_dmu, dm_dvar, dv_dmu, dv_dvar)


# Probit and normal cdf transform

def probit_mean(mean, var):
    """
    Firing probability of a probit Bernoulli unit, :math:`\\Phi(\\mu/\\sqrt{\\sigma^2+1})`. Exact for a normal input.
    """
    mean, var, sigma, safe, zero = _split(mean, var)
    return BinaryMoments(std_normal_cdf(mean / np.sqrt(var + 1.0)))


def probit_jacobian(mean, var):
    mean, var, sigma, safe, zero = _split(mean, var)
    c = np.sqrt(var + 1.0)
    u = mean / c
    pdf = std_normal_pdf(u)
    return MomentJacobian.binary(std_normal_cdf(u), pdf / c, -pdf * u / (2.0 * c * c))


def normalcdf_transform_mean(mean, var):
    """
    Moments of the deterministic transform :math:`\\Phi(X)`.

    The mean :math:`\\Phi(\\mu/\\sqrt{\\sigma^2+1})` is exact. The variance is approximate: it reuses the logistic
    transform heuristic after matching the slope of :math:`\\Phi` to the logistic, i.e. with :math:`\\sigma^2` replaced
    by :math:`\\sigma_S^2\\sigma^2`. This variance has not been validated against a reference bound.
    """
    mean, var, sigma, safe, zero = _split(mean, var)
    p = std_normal_cdf(mean / np.sqrt(var + 1.0))
    scaled = SIGMA_S_SQ * var
    bern = p * (1.0 - p)
    return ScalarMoments(p, 4.0 * scaled / (scaled + 4.0) * bern * bern)


def normalcdf_transform_jacobian(mean, var):
    mean, var, sigma, safe, zero = _split(mean, var)
    c = np.sqrt(var + 1.0)
    u = mean / c
    p = std_normal_cdf(u)
    pdf = std_normal_pdf(u)
    dm_dmu = pdf / c
    dm_dvar = -pdf * u / (2.0 * c * c)
    scaled = SIGMA_S_SQ * var
    h = 4.0 * scaled / (scaled + 4.0)
    dh = 16.0 * SIGMA_S_SQ / (scaled + 4.0) ** 2
    bern = p * (1.0 - p)
    dbern2 = 2.0 * bern * (1.0 - 2.0 * p)
    return MomentJacobian(dm_dmu, dm_dvar, h * dbern2 * dm_dmu, dh * bern * bern + h * dbern2 * dm_dvar)


# Max and max pooling

def _max2_parts(mean1, var1, mean2, var2):
    mean1, var1 = np.broadcast_arrays(np.asarray(mean1, dtype=float), np.asarray(var1, dtype=float))
    mean2, var2 = np.broadcast_arrays(np.asarray(mean2, dtype=float), np.asarray(var2, dtype=float))
    if np.any(var1 < 0) or np.any(var2 < 0):
        raise ValueError('variance must be non-negative')
    spread = np.sqrt(var1 + var2)
    zero = spread <= 0
    safe = np.where(zero, 1.0, spread)
    a = (mean1 - mean2) / safe
    return mean1, var1, mean2, var2, safe, zero, a


def max2_moments(mean1, var1, mean2, var2, var_variant='exact'):
    """
    Moments of :math:`\\max(X_1, X_2)` for independent normal inputs.

    With :math:`s^2 = \\sigma_1^2 + \\sigma_2^2` and :math:`a = (\\mu_1-\\mu_2)/s` the mean is
    :math:`\\mu_1\\Phi(a) + \\mu_2\\Phi(-a) + s\\delta(a)`. The ``'fitted'`` variance is
    :math:`\\sigma_1^2 S(a/t) + \\sigma_2^2 S(-a/t)`.
    """
    _check_choice('max variance variant', var_variant, ('exact', 'fitted'))
    mean1, var1, mean2, var2, safe, zero, a = _max2_parts(mean1, var1, mean2, var2)
    cdf = std_normal_cdf(a)
    ccdf = std_normal_cdf(-a)
    pdf = std_normal_pdf(a)
    m = mean1 * cdf + mean2 * ccdf + safe * pdf
    if var_variant == 'exact':
        second = (mean1 * mean1 + var1) * cdf + (mean2 * mean2 + var2) * ccdf + (mean1 + mean2) * safe * pdf
        v = np.maximum(second - m * m, 0.0)
    else:
        v = var1 * logistic_sigmoid(a / T_RELU_FIT) + var2 * logistic_sigmoid(-a / T_RELU_FIT)
    return ScalarMoments(np.where(zero, np.maximum(mean1, mean2), m), np.where(zero, 0.0, v))


def max2_jacobian(mean1, var1, mean2, var2, var_variant='exact'):
    """
    :return: A pair of :py:class:`MomentJacobian`, with respect to the first and to the second input.
    """
    _check_choice('max variance variant', var_variant, ('exact', 'fitted'))
    mean1, var1, mean2, var2, safe, zero, a = _max2_parts(mean1, var1, mean2, var2)
    cdf = std_normal_cdf(a)
    ccdf = std_normal_cdf(-a)
    pdf = std_normal_pdf(a)
    m = mean1 * cdf + mean2 * ccdf + safe * pdf
    dm_dvar = pdf / (2.0 * safe)
    if var_variant == 'exact':
        common = pdf * ((mean1 + mean2) / (2.0 * safe) - a * (var1 - var2) / (2.0 * safe * safe))
        dv_dmu1 = 2.0 * mean1 * cdf + 2.0 * var1 * pdf / safe - 2.0 * m * cdf
        dv_dmu2 = 2.0 * mean2 * ccdf + 2.0 * var2 * pdf / safe - 2.0 * m * ccdf
        dv_dvar1 = cdf + common - 2.0 * m * dm_dvar
        dv_dvar2 = ccdf + common - 2.0 * m * dm_dvar
    else:
        fit = logistic_sigmoid(a / T_RELU_FIT)
        fit_slope = fit * (1.0 - fit)
        shift = (var1 - var2) * fit_slope / T_RELU_FIT
        dv_dmu1 = shift / safe
        dv_dmu2 = -shift / safe
        dv_dvar1 = fit - shift * a / (2.0 * safe * safe)
        dv_dvar2 = (1.0 - fit) - shift * a / (2.0 * safe * safe)
    step = _step(mean1 - mean2)
    first = MomentJacobian(np.where(zero, step, cdf), np.where(zero, 0.0, dm_dvar),
                           np.where(zero, 0.0, dv_dmu1), np.where(zero, step, dv_dvar1))
    second = MomentJacobian(np.where(zero, 1.0 - step, ccdf), np.where(zero, 0.0, dm_dvar),
                            np.where(zero, 0.0, dv_dmu2), np.where(zero, 1.0 - step, dv_dvar2))
    return first, second


def _as_pair(item):
    if isinstance(item, ScalarMoments):
        return item.mean, item.var
    mean, var = item
    return mean, var


def maxpool_moments(window, var_variant='exact'):
    """
    Moments of the maximum of a window of independent units, composed hierarchically from :py:func:`max2_moments`.
    The window is split left-balanced: the left half takes the extra element when the length is odd.

    :param window: Sequence of :py:class:`ScalarMoments` or ``(mean, var)`` pairs.
    :raises ValueError: on an empty window.
    """
    window = [_as_pair(item) for item in window]
    if not window:
        raise ValueError('max pooling over an empty window')
    if len(window) == 1:
        return ScalarMoments(*window[0])
    k = (len(window) + 1) // 2
    left = maxpool_moments(window[:k], var_variant)
    right = maxpool_moments(window[k:], var_variant)
    return max2_moments(left.mean, left.var, right.mean, right.var, var_variant)


def maxpool_pullback(window, g_mean, g_var, var_variant='exact'):
    """
    Backpropagates output gradients of :py:func:`maxpool_moments` to every window element.

    :return: A list of ``(g_mean, g_var)`` pairs, one per window element.
    """
    window = [_as_pair(item) for item in window]
    if len(window) == 1:
        return [(g_mean, g_var)]
    k = (len(window) + 1) // 2
    left = maxpool_moments(window[:k], var_variant)
    right = maxpool_moments(window[k:], var_variant)
    jac_left, jac_right = max2_jacobian(left.mean, left.var, right.mean, right.var, var_variant)
    return (maxpool_pullback(window[:k], *jac_left.pullback(g_mean, g_var), var_variant=var_variant) +
            maxpool_pullback(window[k:], *jac_right.pullback(g_mean, g_var), var_variant=var_variant))


# Product, abs, dropout

def product_moments(mean1, var1, mean2, var2):
    """
    Moments of :math:`X_1 X_2` for independent inputs (exact).
    """
    mean1, var1, _, _, _ = _split(mean1, var1)
    mean2, var2, _, _, _ = _split(mean2, var2)
    return ScalarMoments(mean1 * mean2, var1 * var2 + var1 * mean2 * mean2 + mean1 * mean1 * var2)


def product_jacobian(mean1, var1, mean2, var2):
    mean1, var1, _, _, _ = _split(mean1, var1)
    mean2, var2, _, _, _ = _split(mean2, var2)
    first = MomentJacobian(mean2, np.zeros_like(mean2), 2.0 * mean1 * var2, var2 + mean2 * mean2)
    second = MomentJacobian(mean1, np.zeros_like(mean1), 2.0 * mean2 * var1, var1 + mean1 * mean1)
    return first, second


def abs_moments(mean, var):
    """
    Moments of :math:`|X|` under a normal input: mean :math:`2E[\\max(0,X)] - \\mu`, second moment preserved.
    """
    mean, var, sigma, safe, zero = _split(mean, var)
    a = mean / safe
    m = mean * (2.0 * std_normal_cdf(a) - 1.0) + 2.0 * safe * std_normal_pdf(a)
    v = np.maximum(mean * mean + var - m * m, 0.0)
    return ScalarMoments(np.where(zero, np.abs(mean), m), np.where(zero, 0.0, v))


def abs_jacobian(mean, var):
    mean, var, sigma, safe, zero = _split(mean, var)
    a = mean / safe
    pdf = std_normal_pdf(a)
    dm_dmu = 2.0 * std_normal_cdf(a) - 1.0
    m = mean * dm_dmu + 2.0 * safe * pdf
    dm_dvar = pdf / safe
    return MomentJacobian(np.where(zero, np.sign(mean), dm_dmu), np.where(zero, 0.0, dm_dvar),
                          np.where(zero, 0.0, 2.0 * mean - 2.0 * m * dm_dmu),
                          np.where(zero, 1.0, 1.0 - 2.0 * m * dm_dvar))


def _check_drop(drop_prob):
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError('drop probability must lie in [0, 1), got %r' % (drop_prob,))


def bernoulli_dropout_moments(mean, var, drop_prob, rescale=False):
    """
    Moments of :math:`BX` with :math:`B \\sim \\mathrm{Bernoulli}(1-p)` independent of :math:`X`. With ``rescale`` the
    product is divided by the keep probability so that the mean is preserved.
    """
    _check_drop(drop_prob)
    mean, var, _, _, _ = _split(mean, var)
    keep = 1.0 - drop_prob
    m = keep * mean
    v = keep * var + mean * mean * keep * drop_prob
    if rescale:
        m = m / keep
        v = v / (keep * keep)
    return ScalarMoments(m, v)


def bernoulli_dropout_jacobian(mean, var, drop_prob, rescale=False):
    _check_drop(drop_prob)
    mean, var, _, _, _ = _split(mean, var)
    keep = 1.0 - drop_prob
    scale_m, scale_v = (1.0 / keep, 1.0 / (keep * keep)) if rescale else (1.0, 1.0)
    ones = np.ones_like(mean)
    return MomentJacobian(keep * scale_m * ones, 0.0 * ones,
                          2.0 * mean * keep * drop_prob * scale_v, keep * scale_v * ones)


# Softmax

SOFTMAX_VARIANTS = ('standard', 'normal', 'logistic', 'simplified')


def _softmax_inputs(means, vars_):
    means = np.asarray(means, dtype=float)
    vars_ = np.asarray(vars_, dtype=float)
    means, vars_ = np.broadcast_arrays(means, vars_)
    if means.ndim == 0 or means.shape[-1] < 2:
        raise ValueError('softmax needs at least two classes')
    if np.any(vars_ < 0):
        raise ValueError('variance must be non-negative')
    return means, vars_


def softmax_log_scores(means, vars_, variant='simplified'):
    """
    Log class scores before renormalization. For the ``'standard'`` and ``'simplified'`` variants the scores are already
    normalized; the ``'normal'`` and ``'logistic'`` approximations need the renormalization done by
    :py:func:`softmax_posterior`.
    """
    _check_choice('softmax variant', variant, SOFTMAX_VARIANTS)
    means, vars_ = _softmax_inputs(means, vars_)
    if variant == 'standard':
        return means - logsumexp(means, axis=-1)[..., np.newaxis]
    if variant == 'simplified':
        z = means / np.sqrt(vars_ / SIGMA_S_SQ + 1.0)
        return z - logsumexp(z, axis=-1)[..., np.newaxis]
    # pairwise tables indexed [..., k, y]
    mu_k = means[..., :, np.newaxis]
    mu_y = means[..., np.newaxis, :]
    var_pair = vars_[..., :, np.newaxis] + vars_[..., np.newaxis, :]
    if variant == 'logistic':
        d = (mu_k - mu_y) / np.sqrt(var_pair / SIGMA_S_SQ + 1.0)
        return -logsumexp(d, axis=-2)
    e = (mu_y - mu_k) / np.sqrt(var_pair + SIGMA_S_SQ)
    n = means.shape[-1]
    log_cdf = np.where(np.eye(n, dtype=bool), 0.0, log_std_normal_cdf(e))
    return log_cdf.sum(axis=-2)


def softmax_posterior(means, vars_, variant='simplified'):
    """
    Approximate expectation of the softmax of independent normal inputs, as a normalized :py:class:`ClassPosterior`.
    Classes run along the last axis; leading axes are batch axes.

    ``'standard'``
        softmax of the means, variances ignored.
    ``'simplified'``
        softmax of :math:`\\mu_k/\\sqrt{\\sigma_k^2/\\sigma_S^2+1}`.
    ``'logistic'``
        :math:`-\\mathrm{logsumexp}_k\\,(\\mu_k-\\mu_y)/\\sqrt{(\\sigma_k^2+\\sigma_y^2)/\\sigma_S^2+1}`, renormalized.
    ``'normal'``
        :math:`\\sum_{k\\neq y}\\log\\Phi((\\mu_y-\\mu_k)/\\sqrt{\\sigma_y^2+\\sigma_k^2+\\sigma_S^2})`, renormalized.
        At zero variance this is not the standard softmax.

    :raises ValueError: for fewer than two classes.

    .. doctest::

        >>> from momentflow.moments import softmax_posterior
        >>> q = softmax_posterior([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 'logistic')
        >>> [round(float(p), 6) for p in q.probs]
        [0.333333, 0.333333, 0.333333]
    """
    scores = softmax_log_scores(means, vars_, variant)
    if variant in ('normal', 'logistic'):
        scores = scores - logsumexp(scores, axis=-1)[..., np.newaxis]
    return ClassPosterior(scores)


def softmax_pullback(means, vars_, variant, g_log_probs):
    """
    Backpropagates gradients with respect to the normalized log probabilities of :py:func:`softmax_posterior` to the
    class means and variances.

    :return: ``(g_means, g_vars)``.
    """
    _check_choice('softmax variant', variant, SOFTMAX_VARIANTS)
    means, vars_ = _softmax_inputs(means, vars_)
    g = np.asarray(g_log_probs, dtype=float)
    if variant in ('standard', 'simplified'):
        if variant == 'standard':
            scale = np.ones_like(means)
            z = means
        else:
            scale = np.sqrt(vars_ / SIGMA_S_SQ + 1.0)
            z = means / scale
        probs = np.exp(z - logsumexp(z, axis=-1)[..., np.newaxis])
        g_z = g - probs * g.sum(axis=-1, keepdims=True)
        if variant == 'standard':
            return g_z, np.zeros_like(vars_)
        return g_z / scale, -g_z * z / (2.0 * scale * scale * SIGMA_S_SQ)
    scores = softmax_log_scores(means, vars_, variant)
    q = np.exp(scores - logsumexp(scores, axis=-1)[..., np.newaxis])
    g_raw = g - q * g.sum(axis=-1, keepdims=True)
    mu_k = means[..., :, np.newaxis]
    mu_y = means[..., np.newaxis, :]
    var_pair = vars_[..., :, np.newaxis] + vars_[..., np.newaxis, :]
    if variant == 'logistic':
        c = np.sqrt(var_pair / SIGMA_S_SQ + 1.0)
        d = (mu_k - mu_y) / c
        weights = np.exp(d - logsumexp(d, axis=-2)[..., np.newaxis, :])
        g_d = -g_raw[..., np.newaxis, :] * weights
        g_dmu = g_d / c
        g_dvar = -g_d * d / (2.0 * c * c * SIGMA_S_SQ)
        g_means = g_dmu.sum(axis=-1) - g_dmu.sum(axis=-2)
    else:
        n = means.shape[-1]
        c = np.sqrt(var_pair + SIGMA_S_SQ)
        e = (mu_y - mu_k) / c
        ratio = np.exp(-0.5 * e * e - _LOG_SQRT_2PI - log_std_normal_cdf(e))
        ratio = np.where(np.eye(n, dtype=bool), 0.0, ratio)
        g_e = g_raw[..., np.newaxis, :] * ratio
        g_dmu = g_e / c
        g_dvar = -g_e * e / (2.0 * c * c)
        g_means = g_dmu.sum(axis=-2) - g_dmu.sum(axis=-1)
    g_vars = g_dvar.sum(axis=-1) + g_dvar.sum(axis=-2)
    return g_means, g_vars
