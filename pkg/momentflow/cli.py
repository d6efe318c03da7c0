# -*- mode: python; coding: utf-8; -*-
# Copyright © 2024 The MomentFlow Authors, All rights reserved.

"""
The ``momentflow`` command line tool. Each subcommand prints a human readable table and, with ``--out``, writes the
same numbers as CSV with 6 significant digits.

Exit codes are 0 on success, 1 on usage errors, 2 on data and configuration errors and 3 on numerical failures.
"""

import argparse
import csv
import logging
import sys

import numpy as np

from . import __version__
from .belief import AND_GATE_COLUMNS, and_gate_table, logistic_unit_kl_sweep, SWEEP_VARIANTS
from .common import MomentFlowError, MomentTensor, NumericalError, PropagationMode
from .config import load_config, Settings, with_activation, with_dropout
from .data import dataset_stats, load_mnist, make_synthetic_images, mnist_available, split_validation
from .network import apply_analytic_normalization, Network, propagate_dataset_stats
from .oracle import (empirical_channel_stats, layerwise_accuracy_report, noise_stability_curve, write_report_csv,
                     write_stability_csv)
from .training import evaluate, load_checkpoint, save_checkpoint, train, write_training_log


__author__ = 'The MomentFlow Authors'

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, '%s: error: %s\n' % (self.prog, message))


def _fmt(value):
    return '%.6g' % value


def _open_out(path):
    return open(path, 'w', newline='') if path else None


def _write_csv(path, header, rows):
    if not path:
        return
    with _open_out(path) as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows([v if isinstance(v, str) else _fmt(v) for v in row] for row in rows)
    log.info('wrote %s', path)


def _print_table(header, rows):
    widths = [max(len(h), 10) for h in header]
    print('  '.join(h.rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        print('  '.join((v if isinstance(v, str) else '%.4g' % v).rjust(w) for v, w in zip(row, widths)))


def _settings(args):
    overrides = {'samples': args.samples, 'seed': args.seed, 'workers': args.workers, 'data_dir': args.data_dir}
    if args.settings:
        return Settings.load(args.settings, **overrides)
    return Settings(**overrides)


def _network(args, default):
    config = load_config(args.config or default)
    if getattr(args, 'dropout', None):
        config = with_dropout(config, args.dropout)
    return Network(config)


def _dataset(settings, args, network):
    data_dir = settings.data_dir(args.data_dir)
    if mnist_available(data_dir):
        return load_mnist(data_dir, limit=args.limit, seed=settings.seed)
    log.warning('MNIST not found, using synthetic digit-like images')
    shape = network.input_shape if len(network.input_shape) == 3 else (1, 28, 28)
    per_class = max(1, (args.limit or 1000) // 10)
    return split_validation(make_synthetic_images(10, per_class, shape, seed=settings.seed), 0.1, settings.seed)


def _images(dataset, network):
    return dataset.images.reshape((dataset.images.shape[0],) + network.input_shape)


def cmd_andgate(args):
    rows = [row.as_row() for row in and_gate_table(args.epsilon)]
    _print_table(AND_GATE_COLUMNS, rows)
    _write_csv(args.out, AND_GATE_COLUMNS, rows)
    if args.sweep_out:
        header = ('n_inputs', 'bias', 'exact') + tuple(sorted(SWEEP_VARIANTS + ('sampling',)))
        sweep_rows = []
        for n in range(1, 6):
            sweep_rows.extend(logistic_unit_kl_sweep(n, n_samples=args.sweep_samples, seed=args.seed or 0).rows())
        _write_csv(args.sweep_out, header, sweep_rows)
    return EXIT_OK


def _initial_params(network, settings, dataset):
    params = network.init_params(settings.seed)
    stats = dataset_stats(dataset)
    return apply_analytic_normalization(network, params, stats)


def cmd_report(args):
    settings = _settings(args)
    config = load_config(args.config or 'lenet')
    noise_var = args.noise_var
    if args.scenario == 'dropout':
        config = with_dropout(config, args.dropout)
    elif args.scenario == 'bernoulli':
        config = with_activation(config, 'relu', 'logistic_bernoulli')
    elif noise_var is None:
        noise_var = 0.01
    network = Network(config)
    dataset = _dataset(settings, args, network)
    params = _initial_params(network, settings, dataset)
    test = dataset.split('test') if dataset.split_sizes()['test'] else dataset.split('val')
    images = _images(test, network)[:args.batch]
    x = MomentTensor(images, np.full(images.shape, noise_var or 0.0))
    report = layerwise_accuracy_report(network, params, x, settings.samples, settings.seed, settings.workers)
    rows = list(report.rows())
    _print_table(('layer', 'kind', 'eps_mu_ap1', 'eps_mu_ap2', 'eps_sigma_ap2'),
                 [[str(r[0]), r[1]] + r[2:] for r in rows])
    print('KL simplified: %.4g nats (%.4g bits)' % (report.kl_simplified, report.to_bits(report.kl_simplified)))
    print('KL full:       %.4g nats (%.4g bits)' % (report.kl_full, report.to_bits(report.kl_full)))
    if args.out:
        with _open_out(args.out) as f:
            write_report_csv(f, report)
        log.info('wrote %s', args.out)
    return EXIT_OK


def cmd_train(args):
    settings = _settings(args)
    for key in ('epochs', 'batch_size', 'learning_rate'):
        if getattr(args, key) is not None:
            settings.update({key: getattr(args, key)})
    network = _network(args, 'mlp')
    dataset = _dataset(settings, args, network)
    params = _initial_params(network, settings, dataset) if args.normalize else network.init_params(settings.seed)
    result = train(network, dataset, args.mode, settings.epochs, settings.batch_size, settings.learning_rate,
                   settings.lr_decay, args.optimizer, settings.seed, args.input_var, settings.workers, params)
    rows = [entry.as_row() for entry in result.log]
    _print_table(('epoch', 'lr', 'train_loss', 'val_loss', 'val_acc'), rows)
    if args.out:
        write_training_log(args.out, result.log)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.params)
    test = dataset.split('test')
    if len(test):
        mode = 'ap1' if PropagationMode.parse(args.mode) is PropagationMode.SAMPLE else args.mode
        loss, accuracy = evaluate(network, result.params, test, mode)
        print('test loss %.4g, test accuracy %.4f' % (loss, accuracy))
    return EXIT_OK


def cmd_stats(args):
    settings = _settings(args)
    network = _network(args, 'lenet')
    dataset = _dataset(settings, args, network)
    params = network.init_params(settings.seed)
    stats = dataset_stats(dataset)
    if args.normalize:
        params = apply_analytic_normalization(network, params, stats)
    analytic = propagate_dataset_stats(network, params, stats)
    train_split = dataset.split('train')
    measured = empirical_channel_stats(network, params, _images(train_split, network), 1, settings.seed)
    names = ['input'] + [layer.kind for layer in network.layers]
    rows = []
    for index, (a, m) in enumerate(zip(analytic, measured)):
        for channel in range(a.mean.size):
            rows.append([str(index), names[index], str(channel), a.mean[channel], np.sqrt(a.var[channel]),
                         m.mean[channel], np.sqrt(m.var[channel])])
    header = ('layer', 'kind', 'channel', 'mu_analytic', 'sigma_analytic', 'mu_mc', 'sigma_mc')
    _print_table(header, rows)
    _write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_stability(args):
    settings = _settings(args)
    network = _network(args, 'mlp')
    dataset = _dataset(settings, args, network)
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint, len(network.layers))
        network.check_params(params)
    else:
        params = train(network, dataset, args.mode, settings.epochs, settings.batch_size, settings.learning_rate,
                       settings.lr_decay, 'adam', settings.seed, workers=settings.workers).params
    test = dataset.split('test') if dataset.split_sizes()['test'] else dataset.split('val')
    sigmas = [float(s) for s in args.sigmas.split(',')]
    curve = noise_stability_curve(network, params, test, sigmas, args.mode, settings.seed)
    _print_table(('sigma', 'mode', 'accuracy'), [[p.sigma, str(p.mode), p.accuracy] for p in curve])
    if args.out:
        with _open_out(args.out) as f:
            write_stability_csv(f, curve)
    return EXIT_OK


def _common(parser):
    parser.add_argument('--config', help='network configuration file or shipped name (lenet, mlp, mlp_dropout)')
    parser.add_argument('--data-dir', help='directory with the MNIST IDX files (default: MOMENTFLOW_DATA_DIR)')
    parser.add_argument('--mode', default='ap2', choices=('ap1', 'ap2', 'sample'), help='propagation mode')
    parser.add_argument('--samples', type=int, help='Monte-Carlo samples (default 1000)')
    parser.add_argument('--seed', type=int, help='random seed (default 0)')
    parser.add_argument('--workers', type=int, help='worker threads (default 1)')
    parser.add_argument('--settings', help='.properties file with runtime settings')
    parser.add_argument('--limit', type=int, default=1000, help='images per MNIST split to load')
    parser.add_argument('--out', help='CSV output path')


def build_parser():
    parser = _Parser(prog='momentflow', description='Moment propagation through neural networks.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    parser.add_argument('-v', '--verbose', action='count', default=0, help='log more (repeat for debug output)')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)
    commands.required = True

    andgate = commands.add_parser('andgate', help='AND gate expectation table')
    andgate.add_argument('--epsilon', type=float, default=0.05)
    andgate.add_argument('--out', help='CSV output path')
    andgate.add_argument('--seed', type=int)
    andgate.add_argument('--sweep-out', help='also write the logistic unit KL sweep to this CSV')
    andgate.add_argument('--sweep-samples', type=int, default=50)
    andgate.set_defaults(func=cmd_andgate)

    report = commands.add_parser('report', help='per-layer accuracy of AP1 and AP2 against Monte-Carlo')
    _common(report)
    report.add_argument('--scenario', default='noise', choices=('noise', 'dropout', 'bernoulli'))
    report.add_argument('--noise-var', type=float, help='input noise variance (default 0.01 for the noise scenario)')
    report.add_argument('--dropout', type=float, default=0.2)
    report.add_argument('--batch', type=int, default=8, help='number of test images')
    report.set_defaults(func=cmd_report)

    training = commands.add_parser('train', help='train a network')
    _common(training)
    training.add_argument('--epochs', type=int)
    training.add_argument('--batch-size', type=int)
    training.add_argument('--learning-rate', type=float)
    training.add_argument('--optimizer', default='adam', choices=('adam', 'sgd'))
    training.add_argument('--dropout', type=float, help='insert dropout with this probability after activations')
    training.add_argument('--input-var', type=float, default=0.0)
    training.add_argument('--normalize', action='store_true', help='apply analytic normalization first')
    training.add_argument('--checkpoint', help='write the trained parameters here')
    training.set_defaults(func=cmd_train)

    stats = commands.add_parser('stats', help='analytic versus measured dataset statistics per layer')
    _common(stats)
    stats.add_argument('--normalize', action='store_true', help='apply analytic normalization first')
    stats.set_defaults(func=cmd_stats)

    stability = commands.add_parser('stability', help='accuracy under Gaussian input noise')
    _common(stability)
    stability.add_argument('--sigmas', default='0,0.1,0.3,1.0', help='comma separated noise levels')
    stability.add_argument('--checkpoint', help='trained parameters (default: train first)')
    stability.set_defaults(func=cmd_stability)
    return parser


def main(argv=None):
    """
    Entry point of the ``momentflow`` console script.
    """
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')
    log.info('running %s', args.command)
    try:
        return args.func(args)
    except NumericalError as e:
        log.error('%s', e)
        return EXIT_NUMERICAL
    except (MomentFlowError, IOError) as e:
        log.error('%s', e)
        return EXIT_DATA
    except ValueError as e:
        log.error('%s', e)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
