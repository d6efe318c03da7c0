# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The :py:mod:`momentflow.config` module reads the two configuration formats used by momentflow:

* network configurations, a line oriented text format with one layer per line (see :doc:`config`), and
* runtime settings, a Java ``.properties`` file read with :py:mod:`jprops`.

.. doctest::

    >>> from momentflow.config import parse_config
    >>> cfg = parse_config('''
    ... input shape=4 seed=3
    ... linear out=2   # logits
    ... softmax_head
    ... ''')
    >>> cfg.input_shape, cfg.seed, [spec.kind for spec in cfg.layers]
    ((4,), 3, ['linear', 'softmax_head'])
"""

import logging
import os
import re
from importlib import resources

import jprops

from .common import ConfigError


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

LAYER_KEYS = {
    'linear': {'out', 'bias'},
    'conv2d': {'out', 'kernel', 'stride', 'bias'},
    'activation': {'name', 'variant', 'var_variant', 'alpha'},
    'dropout': {'p', 'rescale'},
    'avgpool': {'window', 'adaptive'},
    'maxpool': {'window', 'var_variant'},
    'normalize': set(),
    'softmax_head': {'variant'},
}

DEFAULT_KEYS = {'relu', 'lrelu', 'heaviside', 'logistic_bernoulli', 'logistic_transform', 'softmax', 'var_variant'}

_INT = re.compile(r'^[+-]?\d+$')
_FLOAT = re.compile(r'^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$')
_IDENT = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')
_SHAPE = re.compile(r'^\d+(x\d+)*$')


class LayerSpec(object):
    """
    Declarative description of one layer: its ``kind`` and the ``key=value`` options given for it.

    Attributes
    ----------
    kind : str
        One of the keys of :py:data:`LAYER_KEYS`.
    options : dict
        Parsed option values (int, float, bool or str).
    line : int or None
        Line of the configuration the layer was declared on.
    """

    def __init__(self, kind, options=None, line=None):
        if kind not in LAYER_KEYS:
            raise ConfigError('unknown layer kind %r' % (kind,), line)
        self.kind = kind
        self.options = dict(options or {})
        self.line = line
        unknown = set(self.options) - LAYER_KEYS[kind]
        if unknown:
            raise ConfigError('%s does not accept %s' % (kind, ', '.join(sorted(unknown))), line)

    def __eq__(self, other):
        return isinstance(other, LayerSpec) and (self.kind, self.options) == (other.kind, other.options)

    def __repr__(self):
        return 'LayerSpec(%r, %r)' % (self.kind, self.options)


class NetworkConfig(object):
    """
    An ordered stack of :py:class:`LayerSpec` together with the input shape (excluding the batch axis), the
    propagation defaults and the parameter initialization seed.
    """

    def __init__(self, input_shape, layers, defaults=None, seed=0, source=None):
        self.input_shape = tuple(int(n) for n in input_shape)
        if not self.input_shape or any(n < 1 for n in self.input_shape):
            raise ConfigError('input shape must have positive extents, got %s' % (input_shape,))
        self.layers = list(layers)
        self.defaults = dict(defaults or {})
        self.seed = seed
        self.source = source

    def __repr__(self):
        return 'NetworkConfig(input=%s, layers=%d)' % ('x'.join(map(str, self.input_shape)), len(self.layers))


def _parse_value(text, line, path):
    lowered = text.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    if _SHAPE.match(text) or _IDENT.match(text):
        return text
    raise ConfigError('cannot parse value %r' % (text,), line, path)


def _parse_shape(value, line, path):
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str) and _SHAPE.match(value):
        return tuple(int(n) for n in value.split('x'))
    raise ConfigError('shape must look like CxHxW or F, got %r' % (value,), line, path)


def parse_config(text, path=None):
    """
    Parses the text of a network configuration.

    :param text: The configuration source.
    :param path: Name used in error messages.
    :raises ConfigError: with the offending line number on any syntax error.
    """
    input_shape = None
    seed = 0
    defaults = {}
    layers = []
    for number, raw in enumerate(text.splitlines(), 1):
        statement = raw.split('#', 1)[0].strip()
        if not statement:
            continue
        tokens = statement.split()
        kind, options = tokens[0], {}
        for token in tokens[1:]:
            key, sep, value = token.partition('=')
            if not sep or not key or not value:
                raise ConfigError('expected key=value, got %r' % (token,), number, path)
            if key in options:
                raise ConfigError('duplicate key %r' % (key,), number, path)
            options[key] = _parse_value(value, number, path)
        if kind == 'input':
            if input_shape is not None:
                raise ConfigError('input declared twice', number, path)
            if layers or defaults:
                raise ConfigError('input must be the first statement', number, path)
            unknown = set(options) - {'shape', 'seed'}
            if unknown or 'shape' not in options:
                raise ConfigError('input takes shape= and optionally seed=', number, path)
            input_shape = _parse_shape(options['shape'], number, path)
            seed = options.get('seed', 0)
            if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
                raise ConfigError('seed must be a non-negative integer', number, path)
        elif kind == 'defaults':
            if input_shape is None:
                raise ConfigError('input must be the first statement', number, path)
            unknown = set(options) - DEFAULT_KEYS
            if unknown:
                raise ConfigError('unknown defaults %s' % (', '.join(sorted(unknown)),), number, path)
            defaults.update(options)
        else:
            if input_shape is None:
                raise ConfigError('input must be the first statement', number, path)
            try:
                layers.append(LayerSpec(kind, options, number))
            except ConfigError as e:
                raise ConfigError(e.message, number, path)
    if input_shape is None:
        raise ConfigError('configuration declares no input', None, path)
    return NetworkConfig(input_shape, layers, defaults, seed, path)


def with_dropout(config, p):
    """
    Returns a copy of ``config`` with a ``dropout p=<p>`` layer after every activation that is followed by a linear or
    convolutional layer.
    """
    layers = []
    for index, spec in enumerate(config.layers):
        layers.append(spec)
        following = config.layers[index + 1].kind if index + 1 < len(config.layers) else None
        if spec.kind == 'activation' and following in ('linear', 'conv2d', 'maxpool', 'avgpool'):
            layers.append(LayerSpec('dropout', {'p': p}, spec.line))
    return NetworkConfig(config.input_shape, layers, config.defaults, config.seed, config.source)


def with_activation(config, old, new):
    """
    Returns a copy of ``config`` whose ``old`` activations are ``new`` activations with default options.
    """
    layers = [LayerSpec('activation', {'name': new}, spec.line)
              if spec.kind == 'activation' and spec.options.get('name') == old else spec
              for spec in config.layers]
    return NetworkConfig(config.input_shape, layers, config.defaults, config.seed, config.source)


def load_config(path):
    """
    Reads a network configuration from ``path``. Names of the configurations shipped with momentflow (``lenet``,
    ``mlp``, ...) are accepted as well.
    """
    if not os.path.exists(path) and shipped_config_exists(path):
        return parse_config(read_shipped_config(path), path)
    with open(path, 'r') as f:
        return parse_config(f.read(), path)


def _shipped_name(name):
    return name if name.endswith('.net') else name + '.net'


def shipped_config_exists(name):
    return resources.files('momentflow').joinpath('configs', _shipped_name(name)).is_file()


def read_shipped_config(name):
    return resources.files('momentflow').joinpath('configs', _shipped_name(name)).read_text()


class Settings(object):
    """
    Runtime settings with their defaults. Values may be overridden by a ``.properties`` file and then by keyword
    arguments (typically command line flags that were given).

    .. doctest::

        >>> Settings(samples=10).samples
        10
        >>> Settings().learning_rate
        0.001
    """

    DEFAULTS = {
        'samples': 1000,
        'seed': 0,
        'batch_size': 128,
        'learning_rate': 0.001,
        'lr_decay': 0.96,
        'epochs': 10,
        'workers': 1,
        'data_dir': '',
    }

    def __init__(self, **overrides):
        self._values = dict(self.DEFAULTS)
        self.update(overrides)

    def update(self, values):
        for key, value in values.items():
            if value is None:
                continue
            if key not in self.DEFAULTS:
                log.warning('Ignoring unknown setting %s', key)
                continue
            kind = type(self.DEFAULTS[key])
            try:
                self._values[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError('setting %s must be of type %s, got %r' % (key, kind.__name__, value))

    @classmethod
    def load(cls, path, **overrides):
        """
        Reads settings from a ``.properties`` file and applies ``overrides`` on top.
        """
        with open(path, 'r') as f:
            properties = jprops.load_properties(f)
        settings = cls()
        settings.update(properties)
        settings.update(overrides)
        return settings

    def data_dir(self, flag=None):
        """
        Resolves the data directory: an explicit flag wins over ``MOMENTFLOW_DATA_DIR``, which wins over the setting.
        """
        return flag or os.environ.get('MOMENTFLOW_DATA_DIR') or self._values['data_dir'] or None

    def __getattr__(self, item):
        try:
            return self.__dict__['_values'][item]
        except KeyError:
            raise AttributeError(item)

    def __repr__(self):
        return 'Settings(%r)' % (self._values,)
