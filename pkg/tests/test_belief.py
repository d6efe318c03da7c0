# -*- mode: python; coding: utf-8; -*-

import numpy as np
import pytest
from numpy.testing import assert_allclose

from momentflow.belief import (AND_GATE_COLUMNS, SWEEP_VARIANTS, and_gate_table, bernoulli_expectation, bernoulli_kl,
                               derive_and_gate_params, logistic_unit_kl_sweep, preactivation_moments)


def test_and_gate_params():
    a, b = derive_and_gate_params(0.05)
    assert a == pytest.approx(5.8889, abs=1e-4)
    assert b == pytest.approx(-8.8333, abs=1e-4)
    for epsilon in (0.0, 0.5, -0.1):
        with pytest.raises(ValueError):
            derive_and_gate_params(epsilon)


# p1, p2, E[X1 and X2], exact unit output, unit of the means
AND_GATE_VALUES = [
    (0.0, 0.0, 0.0, 0.000146, 0.000146),
    (0.0, 1.0, 0.0, 0.05, 0.05),
    (1.0, 1.0, 1.0, 0.95, 0.95),
    (0.25, 0.25, 0.0625, 0.078207, 0.002762),
    (0.5, 0.5, 0.25, 0.262537, 0.05),
    (0.75, 0.75, 0.5625, 0.553134, 0.5),
]


def test_and_gate_table():
    rows = and_gate_table(0.05)
    assert len(rows) == len(AND_GATE_VALUES)
    assert len(rows[0].as_row()) == len(AND_GATE_COLUMNS)
    for row, (p1, p2, exact_and, exact, ap1) in zip(rows, AND_GATE_VALUES):
        assert (row.p1, row.p2) == (p1, p2)
        assert row.exact_and == pytest.approx(exact_and)
        assert row.exact == pytest.approx(exact, abs=1e-6)
        assert row.ap1 == pytest.approx(ap1, abs=1e-6)
        assert abs(row.ap2b - row.exact) < 0.06


def test_and_gate_ap2b_at_half():
    row = and_gate_table(0.05, inputs=[(0.5, 0.5)])[0]
    assert row.ap2b == pytest.approx(0.2358, abs=1e-3)
    assert abs(row.ap2b - row.exact) < abs(row.ap1 - row.exact)


def test_bernoulli_expectation():
    assert bernoulli_expectation([1.0, 2.0], 0.5, [0.3, 0.6], function=lambda z: z) == pytest.approx(2.0)
    assert bernoulli_expectation([3.0], -1.0, [1.0]) == pytest.approx(1.0 / (1.0 + np.exp(-2.0)))
    mean, var = preactivation_moments([1.0, 2.0], 0.5, [0.3, 0.6])
    assert mean == pytest.approx(2.0)
    assert var == pytest.approx(0.21 + 4.0 * 0.24)


@pytest.mark.parametrize('weights, probs', [
    ([1.0, 2.0], [0.5]),
    (np.ones(21), np.full(21, 0.5)),
    ([1.0], [1.5]),
])
def test_bernoulli_expectation_errors(weights, probs):
    with pytest.raises(ValueError):
        bernoulli_expectation(weights, 0.0, probs)


@pytest.mark.parametrize('p, q, expected', [
    (0.5, 0.5, 0.0),
    (1.0, 0.5, np.log(2.0)),
    (0.0, 0.5, np.log(2.0)),
    (0.8, 0.6, 0.091516),
    (0.6, 0.8, 0.104650),
])
def test_bernoulli_kl(p, q, expected):
    assert bernoulli_kl(p, q) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize('n_inputs', [2, 5, 10])
def test_kl_sweep_favours_second_order(n_inputs):
    sweep = logistic_unit_kl_sweep(n_inputs, seed=n_inputs)
    assert sweep.biases.shape == (50,)
    assert set(sweep.kl) == set(SWEEP_VARIANTS) | {'sampling'}
    for values in sweep.kl.values():
        assert np.all(np.isfinite(values))
        assert np.all(values >= -1e-12)
    assert np.mean(sweep.kl['ap2b']) < np.mean(sweep.kl['ap1'])
    assert np.max(sweep.kl['ap2b']) < np.max(sweep.kl['ap1'])
    assert np.mean(sweep.kl['pea']) < np.mean(sweep.kl['ap1'])
    middle = (sweep.exact >= 0.05) & (sweep.exact <= 0.95)
    assert np.all(sweep.kl['ap2b'][middle] <= sweep.kl['ap1'][middle] + 1e-3)


def test_kl_sweep_rows():
    sweep = logistic_unit_kl_sweep(3, biases=[-5.0, 0.0], n_samples=10)
    rows = list(sweep.rows())
    assert len(rows) == 2
    assert rows[0][:2] == [3, -5.0]
    assert len(rows[0]) == 3 + len(SWEEP_VARIANTS) + 1
    assert_allclose(sweep.exact, [bernoulli_expectation([5.1, 4.6, 3.5], bias, np.full(3, 0.5))
                                  for bias in (-5.0, 0.0)])


def test_kl_sweep_input_count():
    with pytest.raises(ValueError):
        logistic_unit_kl_sweep(0)
    with pytest.raises(ValueError):
        logistic_unit_kl_sweep(11)
