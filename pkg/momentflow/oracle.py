# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.oracle` module provides Monte-Carlo ground truth for the analytic propagation modes and the
metrics used to compare against it:

* :math:`\\varepsilon_\\mu`, the mean absolute error of the means relative to the average MC standard deviation,
* :math:`\\varepsilon_\\sigma`, the geometric mean of the ratios of standard deviations (1 is exact),
* the KL divergence of an approximate class posterior from the MC class posterior, in nats.

Monte-Carlo runs are split into chunks of samples. Chunk ``c`` draws all its noise from
``numpy.random.default_rng([seed, c])`` and the chunk accumulators are merged in chunk order, so the estimates do not
depend on the number of workers.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .common import MomentTensor, PropagationMode, RunningMoments, ShapeError
from .data import DatasetStats
from .moments import ClassPosterior, ScalarMoments


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

CHUNK_SIZE = 64
REPORT_COLUMNS = ('layer_index', 'layer_kind', 'eps_mu_ap1', 'eps_mu_ap2', 'eps_sigma_ap2')


class MCEstimate(object):
    """
    Monte-Carlo estimate of elementwise means and population variances.
    """

    def __init__(self, means, vars, n_samples):
        if n_samples < 2:
            raise ValueError('a Monte-Carlo estimate needs at least two samples')
        self.means = np.asarray(means, dtype=float)
        self.vars = np.maximum(np.asarray(vars, dtype=float), 0.0)
        self.n_samples = n_samples

    @property
    def stds(self):
        return np.sqrt(self.vars)

    @property
    def standard_errors(self):
        return np.sqrt(self.vars / self.n_samples)

    @classmethod
    def from_running(cls, moments):
        return cls(moments.mean, moments.var, moments.count)

    def __repr__(self):
        return 'MCEstimate(shape=%s, n=%d)' % (self.means.shape, self.n_samples)


class MCResult(object):
    """
    Result of :py:func:`mc_propagate`: one :py:class:`MCEstimate` per recorded tensor (the input followed by every
    layer output before the softmax head) and the empirical class posterior.
    """

    def __init__(self, estimates, posterior):
        self.estimates = estimates
        self.posterior = posterior

    def __getitem__(self, item):
        return self.estimates[item]

    def __len__(self):
        return len(self.estimates)


def smooth_posterior(probs, n_samples):
    """
    Laplace smoothing of empirical class frequencies with :math:`\\epsilon = 1/(10 n)`.
    """
    probs = np.asarray(probs, dtype=float)
    eps = 1.0 / (10.0 * n_samples)
    smoothed = probs + eps
    return ClassPosterior(np.log(smoothed / smoothed.sum(axis=-1, keepdims=True)))


def _tile(x, count):
    reps = (count,) + (1,) * (x.mean.ndim - 1)
    return MomentTensor(np.tile(x.mean, reps), np.tile(x.var, reps))


def _mc_chunk(network, params, x, seed, chunk, count):
    record = network.forward(params, _tile(x, count), PropagationMode.SAMPLE, seed, chunk)
    batch = x.mean.shape[0]
    moments = []
    for tensor in record.tensors:
        acc = RunningMoments()
        acc.push_batch(tensor.mean.reshape((count, batch) + tensor.mean.shape[1:]))
        moments.append(acc)
    probs = None
    if record.posterior is not None:
        probs = record.posterior.probs.reshape(count, batch, -1).sum(axis=0)
    return moments, probs


def mc_propagate(network, params, x, n_samples=1000, seed=0, workers=1, chunk_size=CHUNK_SIZE):
    """
    Runs ``n_samples`` SAMPLE-mode forward passes of the batch ``x`` and accumulates per-unit means and variances of
    every recorded tensor. The empirical class posterior is the average of the per-sample softmax outputs, smoothed
    with :py:func:`smooth_posterior`.

    :raises ValueError: if ``n_samples`` is less than 2.
    """
    if n_samples < 2:
        raise ValueError('Monte-Carlo propagation needs at least two samples')
    x = network._as_input(x)
    counts = [min(chunk_size, n_samples - start) for start in range(0, n_samples, chunk_size)]

    def run(item):
        chunk, count = item
        return _mc_chunk(network, params, x, seed, chunk, count)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, enumerate(counts)))
    else:
        results = [run(item) for item in enumerate(counts)]
    totals, prob_sum = None, None
    for chunk, (moments, probs) in enumerate(results):
        totals = moments if totals is None else [a.merge(b) for a, b in zip(totals, moments)]
        if probs is not None:
            prob_sum = probs if prob_sum is None else prob_sum + probs
        log.debug('merged MC chunk %d (%d samples)', chunk, counts[chunk])
    posterior = None if prob_sum is None else smooth_posterior(prob_sum / n_samples, n_samples)
    return MCResult([MCEstimate.from_running(m) for m in totals], posterior)


def mc_softmax_gumbel(means, vars_=None, n_samples=10000, seed=0, chunk_size=10000):
    """
    Independent estimate of the expected softmax: draws :math:`X_k \\sim N(\\mu_k, \\sigma_k^2)` and standard Gumbel
    noise :math:`\\Gamma_k` and counts how often each class attains :math:`\\max_k X_k + \\Gamma_k`.

    :param means: Class score means along the last axis, or a list of :py:class:`~momentflow.moments.ScalarMoments`.
    :return: The smoothed empirical :py:class:`~momentflow.moments.ClassPosterior`.
    """
    if vars_ is None and all(isinstance(m, ScalarMoments) for m in means):
        vars_ = np.array([m.var for m in means], dtype=float)
        means = np.array([m.mean for m in means], dtype=float)
    means = np.asarray(means, dtype=float)
    vars_ = np.zeros_like(means) if vars_ is None else np.asarray(vars_, dtype=float)
    if means.shape != vars_.shape:
        raise ShapeError('means %s and variances %s differ in shape' % (means.shape, vars_.shape))
    if means.shape[-1] < 2:
        raise ValueError('a class posterior needs at least two classes')
    rng = np.random.default_rng(seed)
    counts = np.zeros(means.shape)
    std = np.sqrt(vars_)
    for start in range(0, n_samples, chunk_size):
        count = min(chunk_size, n_samples - start)
        scores = means + std * rng.standard_normal((count,) + means.shape) + rng.gumbel(size=(count,) + means.shape)
        winners = np.argmax(scores, axis=-1)
        counts += (winners[..., np.newaxis] == np.arange(means.shape[-1])).sum(axis=0)
    return smooth_posterior(counts / n_samples, n_samples)


def eps_mu(approx, mc):
    """
    Mean absolute error of ``approx`` relative to the average MC standard deviation.

    .. doctest::

        >>> import numpy as np
        >>> float(eps_mu(np.full(4, 0.5), MCEstimate(np.zeros(4), np.ones(4), 100)))
        0.5

    :raises ValueError: if every MC standard deviation is zero.
    """
    approx = np.asarray(approx, dtype=float)
    if approx.shape != mc.means.shape:
        raise ShapeError('approximation %s and MC estimate %s differ in shape' % (approx.shape, mc.means.shape))
    scale = np.mean(mc.stds)
    if scale <= 0:
        raise ValueError('eps_mu is undefined when every MC standard deviation is zero')
    return float(np.mean(np.abs(approx - mc.means)) / scale)


def eps_sigma(approx_std, mc_std):
    """
    Geometric mean of ``approx_std / mc_std``; 1 means exact.

    :raises ValueError: if any entry is not strictly positive.
    """
    approx_std = np.asarray(approx_std, dtype=float)
    mc_std = np.asarray(mc_std, dtype=float)
    if approx_std.shape != mc_std.shape:
        raise ShapeError('standard deviations %s and %s differ in shape' % (approx_std.shape, mc_std.shape))
    if np.any(approx_std <= 0) or np.any(mc_std <= 0):
        raise ValueError('eps_sigma needs strictly positive standard deviations')
    return float(np.exp(np.mean(np.log(approx_std / mc_std))))


def posterior_kl(p, q):
    """
    :math:`\\sum_y p_y (\\log p_y - \\log q_y)` in nats, computed per example along the last axis.

    :return: A float for single posteriors, an array for batches.
    """
    if p.log_probs.shape != q.log_probs.shape:
        raise ShapeError('posteriors over %s and %s classes' % (p.log_probs.shape, q.log_probs.shape))
    probs = p.probs
    terms = np.where(probs > 0, probs * (p.log_probs - q.log_probs), 0.0)
    kl = np.maximum(terms.sum(axis=-1), 0.0)
    return float(kl) if kl.ndim == 0 else kl


class LayerAccuracy(object):
    """
    Approximation errors at the output of one layer. ``excluded`` counts units left out of ``eps_sigma_ap2`` because
    their MC or AP2 standard deviation is zero.
    """

    def __init__(self, index, kind, eps_mu_ap1, eps_mu_ap2, eps_sigma_ap2, excluded=0):
        self.index = index
        self.kind = kind
        self.eps_mu_ap1 = eps_mu_ap1
        self.eps_mu_ap2 = eps_mu_ap2
        self.eps_sigma_ap2 = eps_sigma_ap2
        self.excluded = excluded

    def __repr__(self):
        return 'LayerAccuracy(%d %s: mu_ap1=%.4g mu_ap2=%.4g sigma_ap2=%.4g)' % (
            self.index, self.kind, self.eps_mu_ap1, self.eps_mu_ap2, self.eps_sigma_ap2)


class AccuracyReport(object):
    """
    Per-layer accuracy of AP1 and AP2 against Monte-Carlo propagation, plus the KL divergence of the simplified and
    the full (logistic) softmax approximations from the MC class posterior. KL values are in nats.
    """

    units = 'nats'

    def __init__(self, layers, kl_simplified, kl_full, n_samples, kl_ap1=None):
        self.layers = layers
        self.kl_simplified = kl_simplified
        self.kl_full = kl_full
        self.kl_ap1 = kl_ap1
        self.n_samples = n_samples

    @staticmethod
    def to_bits(nats):
        return nats / np.log(2.0)

    def rows(self):
        for layer in self.layers:
            yield [layer.index, layer.kind, layer.eps_mu_ap1, layer.eps_mu_ap2, layer.eps_sigma_ap2]

    def __repr__(self):
        return 'AccuracyReport(%d layers, kl_simplified=%.4g)' % (len(self.layers), self.kl_simplified)


def _spread_floor(means, tolerance=1e-9):
    # spreads at round-off level of the values count as zero
    return tolerance * (1.0 + np.abs(means))


def _eps_mu_or_exact(approx, mc, tolerance=1e-9):
    if mc.means.size and np.mean(mc.stds) > np.mean(_spread_floor(mc.means, tolerance)):
        return eps_mu(approx, mc)
    error = np.max(np.abs(np.asarray(approx) - mc.means)) if mc.means.size else 0.0
    return 0.0 if error <= tolerance * (1.0 + np.max(np.abs(mc.means))) else float('inf')


def _eps_sigma_excluding(approx_std, mc_std, floor=0.0):
    keep = (approx_std > floor) & (mc_std > floor)
    excluded = int(keep.size - np.count_nonzero(keep))
    if not np.any(keep):
        return 1.0, excluded
    return eps_sigma(approx_std[keep], mc_std[keep]), excluded


def layerwise_accuracy_report(network, params, x, n_samples=1000, seed=0, workers=1):
    """
    Compares AP1 and AP2 propagation of the batch ``x`` (a :py:class:`~momentflow.common.MomentTensor`, so input
    noise is given by its variances) with :py:func:`mc_propagate` at every layer. Errors are pooled over all units
    of the batch.
    """
    x = network._as_input(x)
    ap1 = network.forward(params, x, PropagationMode.AP1)
    ap2 = network.forward(params, x, PropagationMode.AP2)
    mc = mc_propagate(network, params, x, n_samples, seed, workers)
    layers = []
    for index, layer in enumerate(network.layers):
        if index + 1 >= len(mc):
            break
        estimate = mc[index + 1]
        eps_sigma_ap2, excluded = _eps_sigma_excluding(ap2.tensors[index + 1].std, estimate.stds,
                                                        _spread_floor(estimate.means))
        if excluded:
            log.warning('layer %d (%s): %d units with zero standard deviation left out of eps_sigma', index,
                        layer.kind, excluded)
        layers.append(LayerAccuracy(index, layer.kind, _eps_mu_or_exact(ap1.tensors[index + 1].mean, estimate),
                                    _eps_mu_or_exact(ap2.tensors[index + 1].mean, estimate), eps_sigma_ap2,
                                    excluded))
    kl_simplified = kl_full = kl_ap1 = float('nan')
    if network.has_head:
        head, head_params = network.layers[-1], params[-1]
        scores = ap2.tensors[-1]
        simplified, _ = head.forward(head_params, scores, PropagationMode.AP2, variant='simplified')
        full, _ = head.forward(head_params, scores, PropagationMode.AP2, variant='logistic')
        kl_simplified = float(np.mean(posterior_kl(mc.posterior, simplified)))
        kl_full = float(np.mean(posterior_kl(mc.posterior, full)))
        kl_ap1 = float(np.mean(posterior_kl(mc.posterior, ap1.posterior)))
    return AccuracyReport(layers, kl_simplified, kl_full, n_samples, kl_ap1)


def write_report_csv(stream, report):
    """
    Writes ``report`` as CSV: one row per layer with the columns of :py:data:`REPORT_COLUMNS`, then a final row
    ``kl,nats,<kl_simplified>,<kl_full>,``. Numbers are written with 6 significant digits.
    """
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    for index, kind, mu1, mu2, sigma2 in report.rows():
        writer.writerow([index, kind, '%.6g' % mu1, '%.6g' % mu2, '%.6g' % sigma2])
    writer.writerow(['kl', report.units, '%.6g' % report.kl_simplified, '%.6g' % report.kl_full, ''])


def _channel_values(values):
    if values.ndim <= 2:
        return values.reshape(values.shape[0], -1)
    channels = values.shape[1]
    return values.reshape(values.shape[0], channels, -1).transpose(0, 2, 1).reshape(-1, channels)


def empirical_channel_stats(network, params, images, n_samples=1, seed=0, batch_size=256):
    """
    Per-channel mean and population variance of every recorded tensor, measured by SAMPLE-mode propagation of
    ``images`` (``n_samples`` passes each) and pooled over examples and spatial positions. Serves as the reference for
    :py:func:`~momentflow.network.propagate_dataset_stats`.

    :return: A list of :py:class:`~momentflow.data.DatasetStats`, the input first.
    """
    accumulators = None
    call_index = 0
    for _ in range(n_samples):
        for start in range(0, images.shape[0], batch_size):
            record = network.forward(params, images[start:start + batch_size], PropagationMode.SAMPLE, seed,
                                     call_index)
            call_index += 1
            if accumulators is None:
                accumulators = [RunningMoments() for _ in record.tensors]
            for acc, tensor in zip(accumulators, record.tensors):
                acc.push_batch(_channel_values(tensor.mean))
    return [DatasetStats(acc.mean, acc.var, acc.count) for acc in accumulators]


class StabilityPoint(object):
    def __init__(self, sigma, accuracy, mode):
        self.sigma = sigma
        self.accuracy = accuracy
        self.mode = mode

    def __repr__(self):
        return 'StabilityPoint(sigma=%g, accuracy=%.4f, mode=%s)' % (self.sigma, self.accuracy, self.mode)


def noise_stability_curve(network, params, dataset, noise_sigmas, mode='ap2', seed=0, n_samples=10, batch_size=512):
    """
    Accuracy on ``dataset`` under additive Gaussian input noise of each standard deviation in ``noise_sigmas``.

    The same noisy inputs :math:`\\tilde x = x + \\sigma_0 n` are used for every mode at a given :math:`\\sigma_0`:
    AP1 classifies :math:`\\tilde x`, AP2 classifies the input moments :math:`(\\tilde x, \\sigma_0^2)`, SAMPLE
    averages the class posteriors of ``n_samples`` stochastic passes on :math:`\\tilde x`.
    """
    mode = PropagationMode.parse(mode)
    curve = []
    for point, sigma in enumerate(noise_sigmas):
        rng = np.random.default_rng([seed, point])
        correct = 0
        for call_index, start in enumerate(range(0, len(dataset), batch_size)):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            noisy = images + sigma * rng.standard_normal(images.shape)
            if mode is PropagationMode.SAMPLE:
                if n_samples >= 2:
                    posterior = mc_propagate(network, params, noisy, n_samples, seed + call_index).posterior
                else:
                    posterior = network.forward(params, noisy, mode, seed, call_index).posterior
            elif mode is PropagationMode.AP2:
                posterior = network.forward(params, MomentTensor(noisy, np.full(noisy.shape, sigma * sigma)),
                                            mode).posterior
            else:
                posterior = network.forward(params, noisy, mode).posterior
            correct += int(np.sum(posterior.predict() == labels))
        accuracy = correct / len(dataset) if len(dataset) else float('nan')
        log.info('sigma=%g %s accuracy=%.4f', sigma, mode, accuracy)
        curve.append(StabilityPoint(sigma, accuracy, mode))
    return curve


def write_stability_csv(stream, curve):
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(('sigma', 'mode', 'accuracy'))
    for point in curve:
        writer.writerow(['%.6g' % point.sigma, str(point.mode), '%.6g' % point.accuracy])
