#!/usr/bin/env python
# -*- mode: python; -*-

"""
MomentFlow propagates means and variances through feed-forward neural networks, so that a single analytic pass
approximates the output distribution of a network with noisy inputs, dropout or stochastic units.
"""

from momentflow.common import *
from momentflow.config import load_config, parse_config, Settings
from momentflow.network import apply_analytic_normalization, Network, network_forward, propagate_dataset_stats

__author__ = 'The MomentFlow Authors'
__version__ = '0.1.0'
