import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfetree.errors import IndexOutOfRange, InvalidParams, ProbabilityLeak
from mfetree.lattice import (Chain, LatticeParams, additive_binomial, build_stock_lattice,
                             forward_joint_distribution, multiplicative_binomial, risk_neutral_up_prob,
                             s_marginals)


def params(n=48):
    return LatticeParams.from_sigma(n, 2.0, 0.025, 0.15)


def test_returns_and_scaling():
    lp = params()
    dt = 2.0 / 48
    beta = math.exp(0.025 * dt)
    up = math.exp(0.15 * math.sqrt(dt))
    assert lp.dt == pytest.approx(dt, rel=1e-15)
    assert lp.u == pytest.approx(up - beta, rel=1e-14)
    assert lp.d == pytest.approx(1 / up - beta, rel=1e-14)
    assert lp.gamma_scale(48) == 1.0
    assert lp.gamma_scale(0) == pytest.approx(math.exp(0.025 * 2.0), rel=1e-13)


def test_risk_neutral_probability_makes_discounted_stock_a_martingale():
    lp = params()
    p = risk_neutral_up_prob(lp)
    assert p * lp.u_tilde + (1 - p) * lp.d_tilde == pytest.approx(lp.beta, rel=1e-15)
    # value quoted for the standard tree (0.509357) is a rounded approximation; direct arithmetic gives 0.50936249
    assert p == pytest.approx(0.509357, abs=1e-5)


def test_first_up_node_value():
    lat = build_stock_lattice(params())
    # s_{1,1}: one up-move from 1.0; approximately 1.0310915 (direct arithmetic gives 1.03109219)
    assert lat.node_values[1][1] == pytest.approx(math.exp(0.15 * math.sqrt(2 / 48)), rel=1e-15)
    assert lat.node_values[1][1] == pytest.approx(1.0310915, abs=1e-5)


def test_invalid_lattice_parameters():
    with pytest.raises(InvalidParams):
        LatticeParams(4, 1.0, 0.5, 1.01, 0.99)  # beta above u_tilde
    with pytest.raises(InvalidParams):
        LatticeParams(0, 1.0, 0.0, 1.1, 0.9)
    with pytest.raises(InvalidParams):
        LatticeParams.from_sigma(4, 1.0, 0.0, 0.0)
    with pytest.raises(InvalidParams):
        LatticeParams(4, -1.0, 0.0, 1.1, 0.9)


def test_recombination_and_children():
    lat = build_stock_lattice(params(6))
    for n in range(6):
        v = lat.values(n)
        assert v.shape == (n + 1,)
        np.testing.assert_allclose(lat.values(n + 1)[lat.up_child(n)], v * lat.params.u_tilde, rtol=1e-14)
        np.testing.assert_allclose(lat.values(n + 1)[lat.down_child(n)], v * lat.params.d_tilde, rtol=1e-14)


def test_path_mode_indexing():
    lat = build_stock_lattice(params(5), path_mode=True)
    assert lat.size(3) == 8
    # index bits record the moves, first move most significant
    assert list(lat.node_index(3)) == [bin(j).count("1") for j in range(8)]
    ud = lat.params.u_tilde
    assert lat.values(2)[0b11] == pytest.approx(ud ** 2)
    assert lat.values(2)[0b10] == pytest.approx(1.0)
    assert list(lat.up_child(2)) == [1, 3, 5, 7]


def test_chain_validation():
    with pytest.raises(InvalidParams):
        Chain(([0.0], [0.0, 1.0]), (np.array([[0.5, 0.4]]),))
    with pytest.raises(InvalidParams):
        Chain(([0.0], [0.0, 1.0]), (np.array([[0.5, 0.5, 0.0]]),))
    with pytest.raises(InvalidParams):
        Chain(([0.0, 1.0],), (), initial=np.array([0.7, 0.7]))
    with pytest.raises(InvalidParams):
        additive_binomial(0.0, -1.0, 0.5, 0.1, 3)
    with pytest.raises(InvalidParams):
        multiplicative_binomial(1.0, 0.1, 1.5, 0.1, 3)


def test_binomial_chains():
    y = additive_binomial(1.0, 0.12, 0.3, 0.25, 4)
    h = 0.12 * 0.5
    np.testing.assert_allclose(y.states[2], [1 - 2 * h, 1.0, 1 + 2 * h])
    assert y.transitions[1][1, 2] == 0.3 and y.transitions[1][1, 1] == 0.7
    z = multiplicative_binomial(2.0, 0.12, 0.5, 0.25, 4)
    np.testing.assert_allclose(z.states[1], [2 * math.exp(-h), 2 * math.exp(h)])
    flat = additive_binomial(1.0, 0.0, 0.5, 0.25, 4)
    assert all(s.size == 1 for s in flat.states)


def test_marginals_match_binomial_law():
    y = additive_binomial(0.0, 1.0, 0.3, 1.0, 5)
    expect = [math.comb(5, k) * 0.3 ** k * 0.7 ** (5 - k) for k in range(6)]
    np.testing.assert_allclose(y.marginals[5], expect, rtol=1e-13)


def test_step_expectation_and_errors():
    y = additive_binomial(0.0, 1.0, 0.25, 1.0, 3)
    assert y.step_expectation(1, 1, [10.0, 20.0, 30.0]) == pytest.approx(0.75 * 20 + 0.25 * 30)
    with pytest.raises(IndexOutOfRange):
        y.step_expectation(3, 0, [1.0])
    with pytest.raises(IndexOutOfRange):
        y.step_expectation(1, 5, [1.0, 2.0, 3.0])
    with pytest.raises(IndexOutOfRange):
        y.step_expectation(1, 0, [1.0, 2.0])


def test_forward_law_under_constant_probability_is_binomial():
    lp = params(10)
    lat = build_stock_lattice(lp)
    y = additive_binomial(1.0, 0.1, 0.4, lp.dt, 10)
    p_tab = [np.full((n + 1, n + 1), 0.35) for n in range(10)]
    joint = forward_joint_distribution(lat, y, p_tab)
    s = s_marginals(lat, joint)[-1]
    np.testing.assert_allclose(s, [math.comb(10, k) * 0.35 ** k * 0.65 ** (10 - k) for k in range(11)], rtol=1e-12)
    np.testing.assert_allclose(joint[-1].sum(axis=0), y.marginals[10], rtol=1e-12)


def test_forward_law_path_mode_agrees_with_markov():
    lp = params(6)
    y = additive_binomial(1.0, 0.1, 0.4, lp.dt, 6)
    rng = np.random.default_rng(3)
    p_markov = [rng.uniform(0.2, 0.8, (n + 1, n + 1)) for n in range(6)]
    p_path = [p_markov[n][[bin(j).count("1") for j in range(1 << n)]] for n in range(6)]
    a = s_marginals(build_stock_lattice(lp), forward_joint_distribution(build_stock_lattice(lp), y, p_markov))
    lat_p = build_stock_lattice(lp, path_mode=True)
    b = s_marginals(lat_p, forward_joint_distribution(lat_p, y, p_path))
    for x, z in zip(a, b):
        np.testing.assert_allclose(x, z, atol=1e-15)


def test_forward_law_detects_leak_and_shape():
    lp = params(3)
    lat = build_stock_lattice(lp)
    y = additive_binomial(1.0, 0.1, 0.4, lp.dt, 3)
    bad = [np.full((n + 1, n + 1), 0.5) for n in range(3)]
    bad[1] = np.full((2, 2), np.nan)
    with pytest.raises(ProbabilityLeak):
        forward_joint_distribution(lat, y, bad)
    with pytest.raises(IndexOutOfRange):
        forward_joint_distribution(lat, y, [np.full((1, 2), 0.5)] * 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 0.95), st.floats(0.05, 0.5))
def test_forward_law_conserves_mass(n, p, sigma):
    lp = LatticeParams.from_sigma(n, 1.0, 0.01, sigma)
    lat = build_stock_lattice(lp)
    y = additive_binomial(0.0, 0.2, 0.5, lp.dt, n)
    joint = forward_joint_distribution(lat, y, [np.full((k + 1, k + 1), p) for k in range(n)])
    for pn in joint:
        assert abs(pn.sum() - 1.0) < 1e-12
        assert np.all(pn >= 0)
