# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
Shared helpers of the momentflow test suite: central finite differences and small networks.
"""

import numpy as np
import pytest

from momentflow.config import parse_config
from momentflow.data import mnist_available
from momentflow.network import Network


requires_mnist = pytest.mark.skipif(not mnist_available(), reason='MOMENTFLOW_DATA_DIR does not hold the MNIST files')

FD_STEP = 1e-4


def numerical_grad(f, x, h=FD_STEP):
    """
    Central finite difference gradient of the scalar function ``f`` at the array ``x``. ``x`` is perturbed in place
    and restored.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f()
        flat[i] = saved - h
        down = f()
        flat[i] = saved
        out[i] = (up - down) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def make_network(text):
    return Network(parse_config(text))


MLP = '''
input shape=6 seed=3
linear out=5
activation name=relu
linear out=4
activation name=logistic_transform
linear out=3
softmax_head
'''

LENET_SMALL = '''
input shape=1x12x12 seed=1
conv2d out=4 kernel=3
normalize
activation name=relu
maxpool window=2
conv2d out=6 kernel=3
normalize
activation name=relu
linear out=16
normalize
activation name=relu
linear out=10
softmax_head
'''
