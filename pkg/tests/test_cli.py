# -*- mode: python; coding: utf-8; -*-

import csv

import numpy as np
import pytest

from momentflow import cli
from momentflow.network import Network
from momentflow.config import load_config
from momentflow.training import load_checkpoint


SMALL_CONV = '''
input shape=1x8x8
conv2d out=2 kernel=3
activation name=relu
linear out=10
softmax_head
'''


@pytest.fixture(autouse=True)
def no_mnist(monkeypatch):
    monkeypatch.delenv('MOMENTFLOW_DATA_DIR', raising=False)


@pytest.fixture
def small_conv(tmp_path):
    path = tmp_path / 'small.net'
    path.write_text(SMALL_CONV)
    return str(path)


def _read_csv(path):
    with open(str(path)) as f:
        return list(csv.reader(f))


def test_andgate(tmp_path, capsys):
    out = tmp_path / 'andgate.csv'
    assert cli.main(['andgate', '--out', str(out)]) == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert 'exact_and' in printed
    rows = _read_csv(out)
    assert rows[0] == ['p1', 'p2', 'exact_and', 'exact', 'ap1', 'ap2b']
    assert len(rows) == 7
    assert rows[3][:5] == ['1', '1', '1', '0.95', '0.95']
    assert float(rows[5][3]) == pytest.approx(0.262537, abs=1e-6)


def test_csv_output_quotes_text_fields(tmp_path):
    out = tmp_path / 'quoted.csv'
    cli._write_csv(str(out), ['name', 'value'], [('lenet, dropout', 0.123456789), ('mlp', 2.0)])
    assert out.read_text() == 'name,value\n"lenet, dropout",0.123457\nmlp,2\n'
    assert _read_csv(out)[1] == ['lenet, dropout', '0.123457']


def test_andgate_sweep(tmp_path):
    sweep = tmp_path / 'sweep.csv'
    assert cli.main(['andgate', '--sweep-out', str(sweep), '--sweep-samples', '5']) == cli.EXIT_OK
    rows = _read_csv(sweep)
    assert rows[0] == ['n_inputs', 'bias', 'exact', 'ap1', 'ap2a', 'ap2b', 'pea', 'sampling']
    assert len(rows) == 1 + 5 * 50


@pytest.mark.parametrize('argv', [
    [],
    ['andgate', '--epsilon', 'small'],
    ['report', '--mode', 'ap3'],
    ['nonsense'],
])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == cli.EXIT_USAGE
    assert 'usage' in capsys.readouterr().err


def test_invalid_argument_value():
    assert cli.main(['andgate', '--epsilon', '0.7']) == cli.EXIT_USAGE


def test_missing_config(tmp_path):
    assert cli.main(['train', '--config', str(tmp_path / 'missing.net')]) == cli.EXIT_DATA


def test_broken_config(tmp_path):
    path = tmp_path / 'broken.net'
    path.write_text('input shape=4\nlinear out=3\nactivation name=swish\n')
    assert cli.main(['train', '--config', str(path)]) == cli.EXIT_DATA


def test_train_on_synthetic_images(tmp_path, capsys):
    log_path = tmp_path / 'train.csv'
    checkpoint = tmp_path / 'mlp.ckpt'
    status = cli.main(['train', '--config', 'mlp', '--limit', '50', '--epochs', '2', '--batch-size', '16',
                       '--out', str(log_path), '--checkpoint', str(checkpoint)])
    assert status == cli.EXIT_OK
    rows = _read_csv(log_path)
    assert rows[0] == ['epoch', 'lr', 'train_loss', 'val_loss', 'val_acc']
    assert len(rows) == 3
    network = Network(load_config('mlp'))
    network.check_params(load_checkpoint(str(checkpoint), len(network.layers)))
    assert 'train_loss' in capsys.readouterr().out


def test_train_with_settings_file(tmp_path, small_conv):
    settings = tmp_path / 'run.properties'
    settings.write_text('epochs=1\nbatch_size=8\nlearning_rate=0.01\n')
    log_path = tmp_path / 'train.csv'
    status = cli.main(['train', '--config', small_conv, '--settings', str(settings), '--limit', '20', '--normalize',
                       '--mode', 'sample', '--input-var', '0.01', '--out', str(log_path)])
    assert status == cli.EXIT_OK
    assert len(_read_csv(log_path)) == 2


def test_report(tmp_path, small_conv):
    out = tmp_path / 'report.csv'
    status = cli.main(['report', '--config', small_conv, '--limit', '20', '--samples', '20', '--batch', '2',
                       '--out', str(out)])
    assert status == cli.EXIT_OK
    rows = _read_csv(out)
    assert rows[0] == ['layer_index', 'layer_kind', 'eps_mu_ap1', 'eps_mu_ap2', 'eps_sigma_ap2']
    assert [row[1] for row in rows[1:-1]] == ['conv2d', 'activation', 'linear']
    assert rows[-1][:2] == ['kl', 'nats']


def test_stats(tmp_path, small_conv):
    out = tmp_path / 'stats.csv'
    assert cli.main(['stats', '--config', small_conv, '--limit', '20', '--normalize', '--out', str(out)]) == 0
    rows = _read_csv(out)
    assert rows[0] == ['layer', 'kind', 'channel', 'mu_analytic', 'sigma_analytic', 'mu_mc', 'sigma_mc']
    first_linear = [row for row in rows[1:] if row[1] == 'conv2d']
    assert len(first_linear) == 2
    for row in first_linear:
        assert float(row[3]) == pytest.approx(0.0, abs=1e-6)
        assert float(row[4]) == pytest.approx(1.0, abs=1e-6)
        assert np.isfinite(float(row[6]))


def test_stability(tmp_path, small_conv):
    settings = tmp_path / 'run.properties'
    settings.write_text('epochs=1\nbatch_size=8\n')
    out = tmp_path / 'stability.csv'
    status = cli.main(['stability', '--config', small_conv, '--settings', str(settings), '--limit', '20',
                       '--sigmas', '0,1', '--mode', 'ap1', '--out', str(out)])
    assert status == cli.EXIT_OK
    rows = _read_csv(out)
    assert rows[0] == ['sigma', 'mode', 'accuracy']
    assert [row[:2] for row in rows[1:]] == [['0', 'ap1'], ['1', 'ap1']]


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(['--version'])
    assert info.value.code == 0
    assert capsys.readouterr().out.startswith('momentflow ')
