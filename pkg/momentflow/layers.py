# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.layers` module defines the layer kinds a network is assembled from. Every layer works in the
three propagation modes of :py:class:`~momentflow.common.PropagationMode`:

* ``AP2`` maps input means and variances to output means and variances,
* ``AP1`` maps means only and carries explicit zero variances,
* ``SAMPLE`` maps sampled values (carried in the ``mean`` field with zero variance) and draws any noise the layer
  injects from the generator it is handed.

Layers hold their hyper-parameters only. Trainable parameters live in a per-layer ``dict`` created by
:py:meth:`Layer.init_params` and passed to :py:meth:`Layer.forward` and :py:meth:`Layer.backward`, so one layer object
can be shared by concurrent forward passes with different parameters.

Shapes given to and returned from :py:meth:`Layer.output_shape` exclude the batch axis.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .activations import get_activation
from .common import ConfigError, ModeError, MomentTensor, PropagationMode, ShapeError
from .moments import bernoulli_dropout_jacobian, bernoulli_dropout_moments, maxpool_moments, maxpool_pullback, \
    softmax_posterior, softmax_pullback, SOFTMAX_VARIANTS


__author__ = 'The MomentFlow Authors'

AP1 = PropagationMode.AP1
AP2 = PropagationMode.AP2
SAMPLE = PropagationMode.SAMPLE


def _positive_int(kind, key, value):
    if int(value) != value or value < 1:
        raise ConfigError('%s: %s must be a positive integer, got %r' % (kind, key, value))
    return int(value)


def _outputs(mean, var, mode):
    if mode is AP2:
        return MomentTensor(mean, var)
    return MomentTensor(mean)


class Layer(object):
    """
    Base class of all layers.
    """

    kind = None
    has_params = False

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def init_params(self, input_shape, rng):
        return {}

    def forward(self, params, x, mode, rng=None):
        """
        Propagates ``x`` through the layer.

        :param params: The layer's parameter dict.
        :param x: A batched :py:class:`~momentflow.common.MomentTensor`.
        :param mode: The :py:class:`~momentflow.common.PropagationMode`.
        :param rng: A :py:class:`numpy.random.Generator`, required in ``SAMPLE`` mode by layers that inject noise.
        :return: ``(output, cache)`` where ``cache`` is what :py:meth:`backward` needs.
        """
        raise NotImplementedError()

    def backward(self, params, cache, g_mean, g_var):
        """
        Maps gradients with respect to the outputs to gradients with respect to the inputs and the parameters.

        :return: ``(g_mean_in, g_var_in, param_grads)``.
        """
        raise NotImplementedError()

    def channel_stats(self, params, stats, input_shape):
        """
        Propagates per-channel statistics, a :py:class:`~momentflow.common.MomentTensor` with one entry per channel,
        treating every spatial position of a channel as an independent draw from the same distribution.
        """
        raise NotImplementedError()

    def describe(self):
        return self.kind

    def __repr__(self):
        return '%s(%s)' % (type(self).__name__, self.describe())


class Linear(Layer):
    """
    Fully connected layer :math:`y = Wx + b`. Image inputs are flattened in C, H, W order. In AP2 mode output
    variances are :math:`(W \\circ W)\\sigma^2`, i.e. inputs are treated as uncorrelated.
    """

    kind = 'linear'
    has_params = True

    def __init__(self, out, bias=True):
        self.out_features = _positive_int(self.kind, 'out', out)
        self.use_bias = bool(bias)

    def output_shape(self, input_shape):
        return (self.out_features,)

    def init_params(self, input_shape, rng):
        fan_in = int(np.prod(input_shape))
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(self.out_features, fan_in))
        if self.use_bias:
            bias = rng.uniform(-bound, bound, size=self.out_features)
        else:
            bias = np.zeros(self.out_features)
        return {'weight': weight, 'bias': bias}

    def forward(self, params, x, mode, rng=None):
        weight, bias = params['weight'], params['bias']
        batch = x.mean.shape[0]
        mean = x.mean.reshape(batch, -1)
        if mean.shape[1] != weight.shape[1]:
            raise ShapeError('linear layer expects %d inputs, got %d' % (weight.shape[1], mean.shape[1]))
        var = x.var.reshape(batch, -1)
        out_var = var @ (weight * weight).T if mode is AP2 else None
        return _outputs(mean @ weight.T + bias, out_var, mode), (mean, var, x.mean.shape, mode)

    def backward(self, params, cache, g_mean, g_var):
        weight = params['weight']
        mean, var, shape, mode = cache
        grads = {'weight': g_mean.T @ mean,
                 'bias': g_mean.sum(axis=0) if self.use_bias else np.zeros_like(params['bias'])}
        g_in_mean = g_mean @ weight
        if mode is AP2:
            grads['weight'] = grads['weight'] + 2.0 * weight * (g_var.T @ var)
            g_in_var = g_var @ (weight * weight)
        else:
            g_in_var = np.zeros_like(g_in_mean)
        return g_in_mean.reshape(shape), g_in_var.reshape(shape), grads

    def channel_stats(self, params, stats, input_shape):
        repeat = int(np.prod(input_shape[1:])) if len(input_shape) > 1 else 1
        mean = np.repeat(stats.mean, repeat)
        var = np.repeat(stats.var, repeat)
        weight = params['weight']
        return MomentTensor(weight @ mean + params['bias'], (weight * weight) @ var)

    def describe(self):
        return 'out=%d bias=%s' % (self.out_features, str(self.use_bias).lower())


class Conv2d(Layer):
    """
    Two dimensional convolution with square kernels, valid padding and no dilation. Means are convolved with the
    kernel, variances with the elementwise squared kernel.
    """

    kind = 'conv2d'
    has_params = True

    def __init__(self, out, kernel, stride=1, bias=True):
        self.out_channels = _positive_int(self.kind, 'out', out)
        self.kernel = _positive_int(self.kind, 'kernel', kernel)
        self.stride = _positive_int(self.kind, 'stride', stride)
        self.use_bias = bool(bias)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError('conv2d expects a CxHxW input, got %s' % (input_shape,))
        _, height, width = input_shape
        if height < self.kernel or width < self.kernel:
            raise ShapeError('conv2d kernel %d does not fit a %dx%d input' % (self.kernel, height, width))
        return (self.out_channels, (height - self.kernel) // self.stride + 1, (width - self.kernel) // self.stride + 1)

    def init_params(self, input_shape, rng):
        channels = input_shape[0]
        fan_in = channels * self.kernel * self.kernel
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(self.out_channels, channels, self.kernel, self.kernel))
        if self.use_bias:
            bias = rng.uniform(-bound, bound, size=self.out_channels)
        else:
            bias = np.zeros(self.out_channels)
        return {'weight': weight, 'bias': bias}

    def _windows(self, values):
        windows = sliding_window_view(values, (self.kernel, self.kernel), axis=(2, 3))
        return windows[:, :, ::self.stride, ::self.stride]

    def _convolve(self, values, weight):
        # (B, C, Ho, Wo, k, k) x (O, C, k, k) -> (B, O, Ho, Wo)
        out = np.tensordot(self._windows(values), weight, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)

    def forward(self, params, x, mode, rng=None):
        weight, bias = params['weight'], params['bias']
        if x.mean.ndim != 4 or x.mean.shape[1] != weight.shape[1]:
            raise ShapeError('conv2d expects input of shape (B, %d, H, W), got %s' % (weight.shape[1], x.shape))
        self.output_shape(x.mean.shape[1:])
        mean = self._convolve(x.mean, weight) + bias[np.newaxis, :, np.newaxis, np.newaxis]
        out_var = self._convolve(x.var, weight * weight) if mode is AP2 else None
        return _outputs(mean, out_var, mode), (x.mean, x.var, mode)

    def _scatter(self, g_out, weight, shape):
        # transposed convolution: accumulate every kernel tap back onto the input positions it read
        g_windows = np.tensordot(g_out, weight, axes=([1], [0]))
        g_in = np.zeros(shape)
        _, _, out_h, out_w = g_out.shape
        span_h = self.stride * (out_h - 1) + 1
        span_w = self.stride * (out_w - 1) + 1
        for i in range(self.kernel):
            for j in range(self.kernel):
                g_in[:, :, i:i + span_h:self.stride, j:j + span_w:self.stride] += \
                    g_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return g_in

    def backward(self, params, cache, g_mean, g_var):
        weight = params['weight']
        mean, var, mode = cache
        grads = {'weight': np.tensordot(g_mean, self._windows(mean), axes=([0, 2, 3], [0, 2, 3])),
                 'bias': g_mean.sum(axis=(0, 2, 3)) if self.use_bias else np.zeros_like(params['bias'])}
        g_in_mean = self._scatter(g_mean, weight, mean.shape)
        if mode is AP2:
            grads['weight'] = grads['weight'] + 2.0 * weight * np.tensordot(g_var, self._windows(var),
                                                                            axes=([0, 2, 3], [0, 2, 3]))
            g_in_var = self._scatter(g_var, weight * weight, var.shape)
        else:
            g_in_var = np.zeros_like(g_in_mean)
        return g_in_mean, g_in_var, grads

    def channel_stats(self, params, stats, input_shape):
        weight = params['weight']
        return MomentTensor(weight.sum(axis=(2, 3)) @ stats.mean + params['bias'],
                            (weight * weight).sum(axis=(2, 3)) @ stats.var)

    def describe(self):
        return 'out=%d kernel=%d stride=%d bias=%s' % (self.out_channels, self.kernel, self.stride,
                                                      str(self.use_bias).lower())


class Activation(Layer):
    """
    Applies a registered activation unit to every input. See :py:mod:`momentflow.activations`.
    """

    kind = 'activation'

    def __init__(self, name, variant=None, var_variant=None, alpha=None):
        self.activation = get_activation(name)
        self.options = self.activation.options(variant, var_variant, alpha)

    @property
    def stochastic(self):
        return self.activation.stochastic

    def forward(self, params, x, mode, rng=None):
        act = self.activation
        if mode is AP2:
            moments = act.moments(x.mean, x.var, self.options)
            out = MomentTensor(moments.mean, moments.var)
        elif mode is AP1:
            out = MomentTensor(act.ap1(x.mean, self.options))
        else:
            if rng is None and act.stochastic:
                raise ModeError('sampling a %s activation needs a random generator' % (act.name,))
            out = MomentTensor(act.sample(x.mean, rng, self.options))
        return out, (x.mean, x.var, mode)

    def backward(self, params, cache, g_mean, g_var):
        mean, var, mode = cache
        act = self.activation
        if mode is AP2:
            g_in_mean, g_in_var = act.jacobian(mean, var, self.options).pullback(g_mean, g_var)
            return g_in_mean, g_in_var, {}
        if mode is SAMPLE and act.stochastic:
            raise ModeError('cannot backpropagate through sampled %s units' % (act.name,))
        return g_mean * act.ap1_grad(mean, self.options), np.zeros_like(mean), {}

    def channel_stats(self, params, stats, input_shape):
        moments = self.activation.moments(stats.mean, stats.var, self.options)
        return MomentTensor(moments.mean, moments.var)

    def describe(self):
        options = ' '.join('%s=%s' % item for item in sorted(self.options.items()))
        return ('name=%s %s' % (self.activation.name, options)).strip()


class Dropout(Layer):
    """
    Multiplicative Bernoulli noise with drop probability ``p``. AP2 propagates its moments analytically, AP1 scales by
    the keep probability, SAMPLE draws a mask. With ``rescale`` outputs are divided by the keep probability.
    """

    kind = 'dropout'

    def __init__(self, p, rescale=False):
        p = float(p)
        if not 0.0 <= p < 1.0:
            raise ConfigError('dropout: p must lie in [0, 1), got %r' % (p,))
        self.p = p
        self.rescale = bool(rescale)

    @property
    def _scale(self):
        keep = 1.0 - self.p
        return 1.0 if self.rescale else keep

    def forward(self, params, x, mode, rng=None):
        if mode is AP2:
            moments = bernoulli_dropout_moments(x.mean, x.var, self.p, self.rescale)
            return MomentTensor(moments.mean, moments.var), (x.mean, x.var, mode, None)
        if mode is AP1:
            return MomentTensor(x.mean * self._scale), (x.mean, x.var, mode, None)
        if rng is None:
            raise ModeError('sampling dropout needs a random generator')
        mask = (rng.random(x.mean.shape) >= self.p).astype(float)
        if self.rescale:
            mask = mask / (1.0 - self.p)
        return MomentTensor(x.mean * mask), (x.mean, x.var, mode, mask)

    def backward(self, params, cache, g_mean, g_var):
        mean, var, mode, mask = cache
        if mode is AP2:
            jac = bernoulli_dropout_jacobian(mean, var, self.p, self.rescale)
            g_in_mean, g_in_var = jac.pullback(g_mean, g_var)
            return g_in_mean, g_in_var, {}
        if mode is AP1:
            return g_mean * self._scale, np.zeros_like(mean), {}
        return g_mean * mask, np.zeros_like(mean), {}

    def channel_stats(self, params, stats, input_shape):
        moments = bernoulli_dropout_moments(stats.mean, stats.var, self.p, self.rescale)
        return MomentTensor(moments.mean, moments.var)

    def describe(self):
        return 'p=%g rescale=%s' % (self.p, str(self.rescale).lower())


class AvgPool(Layer):
    """
    Non-overlapping average pooling over ``window x window`` blocks, or over the whole plane when ``adaptive``. Output
    variances are the summed input variances divided by the squared window size.
    """

    kind = 'avgpool'

    def __init__(self, window=None, adaptive=False):
        self.adaptive = bool(adaptive)
        if not self.adaptive:
            if window is None:
                raise ConfigError('avgpool needs a window unless adaptive=true')
            window = _positive_int(self.kind, 'window', window)
        self.window = window

    def _window(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError('avgpool expects a CxHxW input, got %s' % (input_shape,))
        _, height, width = input_shape
        if self.adaptive:
            return height, width
        if height % self.window or width % self.window:
            raise ShapeError('avgpool window %d does not divide a %dx%d input' % (self.window, height, width))
        return self.window, self.window

    def output_shape(self, input_shape):
        kh, kw = self._window(input_shape)
        return (input_shape[0], input_shape[1] // kh, input_shape[2] // kw)

    def _blocks(self, values, kh, kw):
        b, c, h, w = values.shape
        return values.reshape(b, c, h // kh, kh, w // kw, kw)

    def forward(self, params, x, mode, rng=None):
        kh, kw = self._window(x.mean.shape[1:])
        n = kh * kw
        mean = self._blocks(x.mean, kh, kw).mean(axis=(3, 5))
        out_var = self._blocks(x.var, kh, kw).sum(axis=(3, 5)) / (n * n) if mode is AP2 else None
        return _outputs(mean, out_var, mode), (kh, kw, mode)

    def backward(self, params, cache, g_mean, g_var):
        kh, kw, mode = cache
        n = kh * kw
        g_in_mean = np.repeat(np.repeat(g_mean, kh, axis=2), kw, axis=3) / n
        if mode is AP2:
            g_in_var = np.repeat(np.repeat(g_var, kh, axis=2), kw, axis=3) / (n * n)
        else:
            g_in_var = np.zeros_like(g_in_mean)
        return g_in_mean, g_in_var, {}

    def channel_stats(self, params, stats, input_shape):
        kh, kw = self._window(input_shape)
        return MomentTensor(stats.mean, stats.var / (kh * kw))

    def describe(self):
        return 'adaptive=true' if self.adaptive else 'window=%d' % self.window


class MaxPool(Layer):
    """
    Non-overlapping max pooling over ``window x window`` blocks. AP2 composes the pairwise maximum of independent normal
    units hierarchically over each window.
    """

    kind = 'maxpool'

    def __init__(self, window, var_variant='exact'):
        self.window = _positive_int(self.kind, 'window', window)
        if var_variant not in ('exact', 'fitted'):
            raise ConfigError('maxpool: unknown var_variant %r' % (var_variant,))
        self.var_variant = var_variant

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError('maxpool expects a CxHxW input, got %s' % (input_shape,))
        c, h, w = input_shape
        if h % self.window or w % self.window:
            raise ShapeError('maxpool window %d does not divide a %dx%d input' % (self.window, h, w))
        return (c, h // self.window, w // self.window)

    def _elements(self, values):
        b, c, h, w = values.shape
        k = self.window
        blocks = values.reshape(b, c, h // k, k, w // k, k)
        return [blocks[:, :, :, i, :, j] for i in range(k) for j in range(k)]

    def _assemble(self, parts, shape):
        b, c, h, w = shape
        k = self.window
        out = np.zeros((b, c, h // k, k, w // k, k))
        for index, part in enumerate(parts):
            out[:, :, :, index // k, :, index % k] = part
        return out.reshape(shape)

    def forward(self, params, x, mode, rng=None):
        self.output_shape(x.mean.shape[1:])
        means = self._elements(x.mean)
        if mode is AP2:
            window = list(zip(means, self._elements(x.var)))
            moments = maxpool_moments(window, self.var_variant)
            return MomentTensor(moments.mean, moments.var), (window, x.mean.shape, mode)
        stacked = np.stack(means, axis=-1)
        winner = np.argmax(stacked, axis=-1)
        return MomentTensor(np.max(stacked, axis=-1)), (winner, x.mean.shape, mode)

    def backward(self, params, cache, g_mean, g_var):
        state, shape, mode = cache
        if mode is AP2:
            grads = maxpool_pullback(state, g_mean, g_var, self.var_variant)
            return (self._assemble([g for g, _ in grads], shape), self._assemble([g for _, g in grads], shape), {})
        parts = [np.where(state == index, g_mean, 0.0) for index in range(self.window * self.window)]
        g_in_mean = self._assemble(parts, shape)
        return g_in_mean, np.zeros_like(g_in_mean), {}

    def channel_stats(self, params, stats, input_shape):
        moments = maxpool_moments([(stats.mean, stats.var)] * (self.window * self.window), self.var_variant)
        return MomentTensor(moments.mean, moments.var)

    def describe(self):
        return 'window=%d' % self.window


class Normalize(Layer):
    """
    Per-channel affine map :math:`y = s_c x + b_c`. The scale and shift are set by
    :py:func:`~momentflow.network.apply_analytic_normalization` and remain trainable afterwards.
    """

    kind = 'normalize'
    has_params = True

    def init_params(self, input_shape, rng):
        channels = input_shape[0]
        return {'scale': np.ones(channels), 'shift': np.zeros(channels)}

    @staticmethod
    def _expand(values, ndim):
        return values.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, params, x, mode, rng=None):
        scale = self._expand(params['scale'], x.mean.ndim)
        shift = self._expand(params['shift'], x.mean.ndim)
        out_var = x.var * scale * scale if mode is AP2 else None
        return _outputs(x.mean * scale + shift, out_var, mode), (x.mean, x.var, mode)

    def backward(self, params, cache, g_mean, g_var):
        mean, var, mode = cache
        axes = (0,) + tuple(range(2, mean.ndim))
        scale = self._expand(params['scale'], mean.ndim)
        g_scale = (g_mean * mean).sum(axis=axes)
        if mode is AP2:
            g_scale = g_scale + (g_var * 2.0 * scale * var).sum(axis=axes)
            g_in_var = g_var * scale * scale
        else:
            g_in_var = np.zeros_like(var)
        return g_mean * scale, g_in_var, {'scale': g_scale, 'shift': g_mean.sum(axis=axes)}

    def channel_stats(self, params, stats, input_shape):
        scale = params['scale']
        return MomentTensor(stats.mean * scale + params['shift'], stats.var * scale * scale)


class SoftmaxHead(Layer):
    """
    Final layer turning class scores into a :py:class:`~momentflow.moments.ClassPosterior`. AP2 uses the configured
    softmax approximation; AP1 and SAMPLE apply the standard softmax to the means or samples.
    """

    kind = 'softmax_head'

    def __init__(self, variant='simplified'):
        if variant not in SOFTMAX_VARIANTS:
            raise ConfigError('softmax_head: unknown variant %r' % (variant,))
        self.variant = variant

    def output_shape(self, input_shape):
        n = int(np.prod(input_shape))
        if n < 2:
            raise ShapeError('softmax_head needs at least two classes')
        return (n,)

    def effective_variant(self, mode):
        return self.variant if mode is AP2 else 'standard'

    def forward(self, params, x, mode, rng=None, variant=None):
        batch = x.mean.shape[0]
        mean = x.mean.reshape(batch, -1)
        var = x.var.reshape(batch, -1)
        variant = variant or self.effective_variant(mode)
        return softmax_posterior(mean, var, variant), (mean, var, x.mean.shape, variant)

    def backward(self, params, cache, g_log_probs, g_unused=None):
        mean, var, shape, variant = cache
        g_mean, g_var = softmax_pullback(mean, var, variant, g_log_probs)
        return g_mean.reshape(shape), g_var.reshape(shape), {}

    def channel_stats(self, params, stats, input_shape):
        return stats

    def describe(self):
        return 'variant=%s' % self.variant


LAYER_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, Activation, Dropout, AvgPool, MaxPool, Normalize,
                                         SoftmaxHead)}
