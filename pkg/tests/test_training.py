# -*- mode: python; coding: utf-8; -*-

import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from momentflow.common import BadMagicError, DataError, EmptySplitError, ModeError, MomentTensor, NumericalError, \
    RecordingError, TruncatedFileError
from momentflow.config import load_config, parse_config, with_dropout
from momentflow.data import Dataset, load_mnist, make_synthetic_blobs, split_validation
from momentflow.moments import ClassPosterior
from momentflow.network import Network
from momentflow.training import (LOG_COLUMNS, OptimizerState, backward, evaluate, load_checkpoint,
                                 loss_and_gradients, nll_loss, save_checkpoint, train, write_training_log)

from helpers import LENET_SMALL, MLP, assert_grad_close, make_network, numerical_grad, requires_mnist


LINEAR_CLASSIFIER = 'input shape=2\nlinear out=2\nsoftmax_head'

HEAVISIDE_MLP = '''
input shape=4 seed=6
linear out=5
activation name=heaviside variant=%s
linear out=3
softmax_head
'''

HIDDEN_RELU = '''
input shape=8 seed=5
linear out=16
activation name=relu
linear out=3
softmax_head
'''

BERNOULLI_MLP = '''
input shape=2 seed=2
linear out=6
activation name=logistic_bernoulli
linear out=2
softmax_head
'''


@pytest.mark.parametrize('probs, label, expected', [
    (np.full(10, 0.1), 3, np.log(10.0)),
    ([0.7, 0.3], 1, 1.203973),
    ([0.25, 0.75], 1, -np.log(0.75)),
])
def test_nll_values(probs, label, expected):
    assert nll_loss(ClassPosterior(np.log(probs)), label) == pytest.approx(expected, abs=1e-6)


def test_nll_of_certain_prediction():
    assert nll_loss(ClassPosterior([0.0, -np.inf]), 0) == 0.0


def test_nll_batch_and_bad_labels():
    posterior = ClassPosterior(np.log([[0.5, 0.5], [0.9, 0.1]]))
    assert_allclose(nll_loss(posterior, [0, 1]), [np.log(2.0), np.log(10.0)])
    with pytest.raises(ValueError):
        nll_loss(posterior, [0, 2])
    with pytest.raises(ValueError):
        nll_loss(posterior, [-1, 0])


def _loss(network, params, x, labels, mode):
    return lambda: loss_and_gradients(network, params, x, labels, mode)[0]


@pytest.mark.parametrize('mode', ['ap1', 'ap2'])
def test_parameter_gradients_match_differences(mode, rng):
    network = make_network(MLP)
    params = network.init_params()
    x = MomentTensor(rng.normal(size=(4, 6)), np.full((4, 6), 0.3))
    labels = np.array([0, 2, 1, 2])
    _, bundle = loss_and_gradients(network, params, x, labels, mode)
    for index, layer_params in enumerate(params):
        for key, value in layer_params.items():
            numeric = numerical_grad(_loss(network, params, x, labels, mode), value)
            assert_grad_close(bundle.param_grads[index][key], numeric, rtol=1e-3, atol=1e-6)


def test_input_gradients_match_differences(rng):
    network = make_network(MLP)
    params = network.init_params()
    x = MomentTensor(rng.normal(size=(3, 6)), np.full((3, 6), 0.4))
    labels = np.array([1, 0, 2])
    _, bundle = loss_and_gradients(network, params, x, labels, 'ap2')
    assert_grad_close(bundle.input_grad.mean, numerical_grad(_loss(network, params, x, labels, 'ap2'), x.mean),
                      rtol=1e-3, atol=1e-6)
    assert_grad_close(bundle.input_grad.var, numerical_grad(_loss(network, params, x, labels, 'ap2'), x.var),
                      rtol=1e-3, atol=1e-6)


def test_convolutional_gradients_match_differences(rng):
    network = make_network(LENET_SMALL)
    params = network.init_params()
    x = MomentTensor(rng.uniform(size=(2, 1, 12, 12)), np.full((2, 1, 12, 12), 0.05))
    labels = np.array([3, 7])
    _, bundle = loss_and_gradients(network, params, x, labels, 'ap2')
    for index in (0, 1, 4, 8):
        for key, value in params[index].items():
            if key == 'bias' and not network.layers[index].use_bias:
                assert not np.any(bundle.param_grads[index][key])
                continue
            numeric = numerical_grad(_loss(network, params, x, labels, 'ap2'), value)
            assert_grad_close(bundle.param_grads[index][key], numeric, rtol=1e-3, atol=1e-6)


@pytest.mark.parametrize('variant', ['normal', 'logistic'])
def test_heaviside_network_gradients_match_differences(variant, rng):
    network = make_network(HEAVISIDE_MLP % variant)
    params = network.init_params()
    x = MomentTensor(rng.normal(size=(3, 4)), np.full((3, 4), 0.5))
    labels = np.array([2, 0, 1])
    _, bundle = loss_and_gradients(network, params, x, labels, 'ap2')
    assert np.any(bundle.param_grads[0]['weight'])
    for index in (0, 2):
        for key, value in params[index].items():
            numeric = numerical_grad(_loss(network, params, x, labels, 'ap2'), value)
            assert_grad_close(bundle.param_grads[index][key], numeric, rtol=1e-3, atol=1e-6)
    _, steps = loss_and_gradients(network, params, x.mean, labels, 'ap1')
    assert not np.any(steps.param_grads[0]['weight'])


def test_backward_needs_recording():
    network = make_network(MLP)
    params = network.init_params()
    with pytest.raises(RecordingError):
        backward(network, params, None, [0])
    headless = make_network('input shape=3\nlinear out=2')
    record = headless.forward(headless.init_params(), np.zeros((1, 3)), 'ap2')
    with pytest.raises(RecordingError):
        backward(headless, headless.init_params(), record, [0])


def test_backward_through_sampled_units_fails():
    network = make_network(BERNOULLI_MLP)
    params = network.init_params()
    record = network.forward(params, np.ones((2, 2)), 'sample', seed=1)
    with pytest.raises(ModeError):
        backward(network, params, record, [0, 1])
    with pytest.raises(ModeError):
        train(network, make_synthetic_blobs(2, 10, 2, 4.0), mode='sample', epochs=1)


def test_sample_gradients_of_deterministic_net():
    network = make_network(MLP)
    params = network.init_params()
    x = np.linspace(-1.0, 1.0, 12).reshape(2, 6)
    sampled = loss_and_gradients(network, params, x, [0, 1], 'sample', seed=5)
    plain = loss_and_gradients(network, params, x, [0, 1], 'ap1')
    assert sampled[0] == pytest.approx(plain[0])
    for a, b in zip(sampled[1].param_grads, plain[1].param_grads):
        for key in a:
            assert_allclose(a[key], b[key], atol=1e-12)


@pytest.mark.parametrize('mode, input_var', [('ap1', 0.0), ('ap2', 0.0), ('ap2', 0.5), ('sample', 0.5)])
def test_blobs_are_learned(mode, input_var):
    network = make_network(LINEAR_CLASSIFIER)
    dataset = make_synthetic_blobs(2, 100, 2, 10.0, seed=1)
    result = train(network, dataset, mode=mode, epochs=20, batch_size=20, learning_rate=0.1, input_var=input_var,
                   seed=3)
    assert len(result.log) == 20
    _, accuracy = evaluate(network, result.params, dataset)
    assert accuracy >= 0.99


def _final_val_acc(config, dataset, mode, **kwargs):
    return train(Network(config), dataset, mode=mode, seed=2, **kwargs).log[-1].val_acc


def test_analytic_dropout_is_not_inferior():
    dataset = split_validation(make_synthetic_blobs(3, 100, 8, 10.0, seed=6), 0.3)
    plain = parse_config(HIDDEN_RELU)
    dropout = with_dropout(plain, 0.3)
    options = dict(epochs=20, batch_size=20, learning_rate=0.05)
    analytic = _final_val_acc(dropout, dataset, 'ap2', **options)
    assert analytic >= 0.99
    assert analytic >= _final_val_acc(dropout, dataset, 'sample', **options) - 0.005
    assert analytic >= _final_val_acc(plain, dataset, 'ap2', **options) - 0.005


def test_bernoulli_units_train_in_ap2():
    network = make_network(BERNOULLI_MLP)
    dataset = make_synthetic_blobs(2, 100, 2, 10.0, seed=4)
    result = train(network, dataset, mode='ap2', epochs=20, batch_size=20, learning_rate=0.05)
    assert result.log[-1].train_loss < result.log[0].train_loss
    assert evaluate(network, result.params, dataset, 'ap2')[1] >= 0.95


@pytest.mark.parametrize('optimizer', OptimizerState.KINDS)
def test_zero_learning_rate_keeps_parameters(optimizer):
    network = make_network(MLP)
    params = network.init_params()
    dataset = Dataset(np.random.default_rng(0).uniform(size=(30, 6)), np.arange(30) % 3)
    result = train(network, dataset, epochs=2, batch_size=8, learning_rate=0.0, optimizer=optimizer, params=params)
    for before, after in zip(params, result.params):
        for key in before:
            assert_allclose(after[key], before[key])


def test_optimizer_schedule_and_errors():
    state = OptimizerState('sgd', learning_rate=0.5, lr_decay=0.5)
    assert state.learning_rate_at(0) == 0.5
    assert state.learning_rate_at(3) == 0.0625
    updated = state.step([{'w': np.ones(2)}], [{'w': np.array([1.0, -2.0])}], 1)
    assert_allclose(updated[0]['w'], [0.75, 1.5])
    with pytest.raises(ValueError):
        OptimizerState('rmsprop')
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=-1.0)


def test_adam_first_step_has_learning_rate_size():
    state = OptimizerState('adam', learning_rate=0.01)
    updated = state.step([{'w': np.zeros(3)}], [{'w': np.array([3.0, -0.1, 1e-3])}], 0)
    assert_allclose(updated[0]['w'], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_worker_count_does_not_change_training():
    network = make_network(MLP)
    dataset = Dataset(np.random.default_rng(1).uniform(size=(64, 6)), np.arange(64) % 3)
    kwargs = dict(mode='ap2', epochs=2, batch_size=16, learning_rate=0.1, optimizer='sgd', input_var=0.1)
    single = train(network, dataset, workers=1, **kwargs)
    threaded = train(network, dataset, workers=2, **kwargs)
    for a, b in zip(single.params, threaded.params):
        for key in a:
            assert_allclose(a[key], b[key], rtol=1e-9, atol=1e-12)


def test_train_needs_training_split():
    network = make_network(LINEAR_CLASSIFIER)
    dataset = Dataset(np.zeros((4, 2)), [0, 1, 0, 1], splits=['test'] * 4)
    with pytest.raises(EmptySplitError):
        train(network, dataset, epochs=1)


def test_diverging_training_is_reported():
    network = make_network(LINEAR_CLASSIFIER)
    dataset = make_synthetic_blobs(2, 10, 2, 4.0)
    params = [{'weight': np.full((2, 2), np.inf), 'bias': np.zeros(2)}, {}]
    with pytest.raises(NumericalError):
        train(network, dataset, epochs=1, params=params)


def test_evaluate_empty_dataset():
    network = make_network(LINEAR_CLASSIFIER)
    empty = make_synthetic_blobs(2, 5, 2, 4.0).split('val')
    loss, accuracy = evaluate(network, network.init_params(), empty)
    assert np.isnan(loss) and np.isnan(accuracy)


def test_training_log(tmp_path):
    network = make_network(LINEAR_CLASSIFIER)
    result = train(network, make_synthetic_blobs(2, 20, 2, 6.0), epochs=3, batch_size=10, learning_rate=0.05)
    path = tmp_path / 'log.csv'
    write_training_log(str(path), result.log)
    with open(str(path)) as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [row[0] for row in rows[1:]] == ['0', '1', '2']
    assert float(rows[2][1]) == pytest.approx(0.05 * 0.96, rel=1e-5)
    assert rows[1][3] == 'nan'


def test_checkpoint_round_trip(tmp_path):
    network = make_network(LENET_SMALL)
    params = network.init_params(9)
    path = str(tmp_path / 'net.ckpt')
    save_checkpoint(path, params)
    loaded = load_checkpoint(path, len(network.layers))
    network.check_params(loaded)
    for a, b in zip(params, loaded):
        assert set(a) == set(b)
        for key in a:
            assert_allclose(a[key], b[key], rtol=0, atol=0)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / 'tiny.ckpt'
    save_checkpoint(str(path), [{'bias': np.array([1.5, -2.0])}])
    data = path.read_bytes()
    assert data[:4] == b'MFCK'
    assert data[4:12] == b'\x01\x00\x00\x00\x01\x00\x00\x00'
    assert data[12:14] == b'\x0b\x00'
    assert data[14:25] == b'layer0.bias'
    assert data[25:29] == b'\x01\x00\x00\x00'
    assert data[29:37] == b'\x02' + b'\x00' * 7
    assert np.frombuffer(data[37:], dtype='<f8').tolist() == [1.5, -2.0]


def test_checkpoint_errors(tmp_path):
    good = tmp_path / 'good.ckpt'
    save_checkpoint(str(good), [{'weight': np.ones((2, 3))}])
    data = good.read_bytes()
    bad_magic = tmp_path / 'magic.ckpt'
    bad_magic.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(str(bad_magic))
    truncated = tmp_path / 'short.ckpt'
    truncated.write_bytes(data[:-5])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(str(truncated))
    version = tmp_path / 'version.ckpt'
    version.write_bytes(data[:4] + b'\x02' + data[5:])
    with pytest.raises(DataError):
        load_checkpoint(str(version))


@pytest.mark.slow
@requires_mnist
def test_mnist_perceptron():
    network = Network(load_config('mlp'))
    dataset = load_mnist(limit=5000)
    result = train(network, dataset, mode='ap2', epochs=3, batch_size=64, learning_rate=0.001)
    _, accuracy = evaluate(network, result.params, dataset.split('test'), 'ap2')
    assert accuracy > 0.85


@pytest.mark.slow
@requires_mnist
def test_mnist_analytic_dropout_is_not_inferior():
    config = load_config('mlp_dropout')
    dataset = load_mnist(limit=10000)
    options = dict(epochs=5, batch_size=64, learning_rate=0.001)
    analytic = _final_val_acc(config, dataset, 'ap2', **options)
    assert analytic >= _final_val_acc(config, dataset, 'sample', **options) - 0.005
