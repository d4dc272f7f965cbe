import math

import numpy as np
import pytest
import scipy.optimize
import scipy.stats
from hypothesis import given, settings, strategies as st

from subaudit import accounting
from subaudit.accounting import ADD_REMOVE, SUBSTITUTE


def gaussian_delta(eps, mu):
    """delta(eps) of the Gaussian mechanism with sensitivity/noise ratio mu."""
    cdf = lambda t: 0.5 * math.erfc(-t / math.sqrt(2))
    return cdf(-eps / mu + mu / 2) - math.exp(eps) * cdf(-eps / mu - mu / 2)


def gaussian_eps(delta, mu):
    f = lambda e: math.log(max(gaussian_delta(e, mu), 1e-300)) - math.log(delta)
    return scipy.optimize.brentq(f, 0, 600, xtol=1e-14)


def quadrature_pld(q, sigma, direction, h=2e-3, npts=2_000_001):
    """Single-step PLD by brute-force quadrature in x (independent of the
    accountant's CDF inversion)."""
    x = np.linspace(-14 * sigma - 1, 14 * sigma + 1, npts)
    dx = x[1] - x[0]
    n0 = scipy.stats.norm.logpdf(x, 0, sigma)
    up = scipy.stats.norm.logpdf(x, 1, sigma)
    mix = np.logaddexp(np.log1p(-q) + n0, np.log(q) + up) if q < 1 else up
    if direction == 'substitute':
        down = scipy.stats.norm.logpdf(x, -1, sigma)
        other = np.logaddexp(np.log1p(-q) + n0, np.log(q) + down) if q < 1 else down
        logp, logq = mix, other
    elif direction == 'remove':
        logp, logq = mix, n0
    else:
        logp, logq = n0, mix
    loss = logp - logq
    w = np.exp(logp) * dx
    idx = np.rint(loss / h).astype(np.int64)
    lo = idx.min()
    pmf = np.bincount(idx - lo, weights=w)
    return lo, pmf / pmf.sum(), h


def quadrature_delta(q, sigma, steps, eps, direction):
    lo, pmf, h = quadrature_pld(q, sigma, direction)
    out, out_lo = pmf, lo
    for _ in range(steps - 1):
        out = np.convolve(out, pmf)
        out_lo += lo
    losses = (out_lo + np.arange(out.size)) * h
    keep = losses > eps
    return float(np.sum(out[keep] * -np.expm1(eps - losses[keep])))


@pytest.mark.parametrize('adjacency, sensitivity', [(ADD_REMOVE, 1), (SUBSTITUTE, 2)])
@pytest.mark.parametrize('sigma, steps', [(1.0, 1), (2.0, 10), (4.0, 100), (0.7, 3)])
def test_full_batch_matches_gaussian_mechanism(adjacency, sensitivity, sigma, steps):
    eps = accounting.epsilon_for(1.0, sigma, steps, 1e-5, adjacency)
    mu = sensitivity * math.sqrt(steps) / sigma
    assert eps == pytest.approx(gaussian_eps(1e-5, mu), rel=1e-4)


@pytest.mark.parametrize('q, sigma, steps, direction', [
    (0.25, 1.0, 3, 'substitute'),
    (0.5, 0.8, 2, 'substitute'),
    (0.1, 1.5, 4, 'substitute'),
    (0.3, 1.0, 3, 'remove'),
    (0.3, 1.0, 3, 'add'),
])
def test_subsampled_directions_match_quadrature(q, sigma, steps, direction):
    adjacency = SUBSTITUTE if direction == 'substitute' else ADD_REMOVE
    pld = accounting.account(q, sigma, steps, adjacency)
    grid = pld.directions[{'substitute': 0, 'remove': 0, 'add': 1}[direction]]
    for eps in (0.5, 1.0, 2.0):
        want = quadrature_delta(q, sigma, steps, eps, direction)
        assert grid.delta_at_epsilon(eps) == pytest.approx(want, rel=5e-3, abs=1e-9)


# Reference add/remove values from an independent PLD accountant
# (connect-the-dots, 1e-4 discretization), frozen here.
@pytest.mark.parametrize('q, sigma, steps, eps_ref', [
    (0.25, 2.0, 500, 16.614283),
    (0.0625, 1.0, 500, 9.659916),
])
def test_subsampled_add_remove_frozen_reference(q, sigma, steps, eps_ref):
    assert accounting.epsilon_for(q, sigma, steps, 1e-5, ADD_REMOVE) == \
        pytest.approx(eps_ref, rel=1e-5)


def test_pld_masses_and_inverse_consistency():
    pld = accounting.account(0.3, 1.2, 20, SUBSTITUTE)
    grid = pld.directions[0]
    assert grid.total_mass + grid.tail_mass + grid.infinity_mass == pytest.approx(1, abs=1e-12)
    eps = pld.epsilon_at_delta(1e-5)
    assert pld.delta_at_epsilon(eps) == pytest.approx(1e-5, rel=1e-9)
    # The mean privacy loss is a KL divergence and must be non-negative.
    assert grid.mean() > 0


def test_upper_discretization_is_pessimistic():
    near = accounting.account(0.2, 1.0, 50, SUBSTITUTE)
    up = accounting.account(0.2, 1.0, 50, SUBSTITUTE, discretization='upper')
    assert up.epsilon_at_delta(1e-5) >= near.epsilon_at_delta(1e-5)
    assert up.epsilon_at_delta(1e-5) == pytest.approx(near.epsilon_at_delta(1e-5), rel=0.02)


def test_grid_coarsens_for_long_horizons():
    pld = accounting.account(1.0, 4.0, 2000, SUBSTITUTE, max_points=1 << 18)
    assert pld.directions[0].step > accounting.DEFAULT_GRID_STEP
    mu = 2 * math.sqrt(2000) / 4.0
    assert pld.epsilon_at_delta(1e-5) == pytest.approx(gaussian_eps(1e-5, mu), rel=1e-3)


def test_bad_arguments():
    with pytest.raises(ValueError):
        accounting.pld_per_step(0.0, 1.0, SUBSTITUTE)
    with pytest.raises(ValueError):
        accounting.pld_per_step(0.5, 0.0, SUBSTITUTE)
    with pytest.raises(ValueError, match='adjacency'):
        accounting.pld_per_step(0.5, 1.0, 'swap')
    with pytest.raises(ValueError):
        accounting.account(0.5, 1.0, 3, SUBSTITUTE).epsilon_at_delta(0.0)
    with pytest.raises(ValueError):
        accounting.compose(accounting.pld_per_step(0.5, 1.0, SUBSTITUTE), 0)


def test_group_privacy_conversion():
    out = accounting.group_privacy_convert(1.5, 1e-5)
    assert out.epsilon == 3.0
    assert out.delta == pytest.approx((1 + math.exp(1.5)) * 1e-5)
    assert out.adjacency == SUBSTITUTE


@pytest.mark.parametrize('mu', [0.3, 1.0, 2.5, 6.0])
def test_gdp_curve_matches_gaussian_and_inverts(mu):
    for eps in (0.0, 0.5, 2.0, 5.0):
        assert accounting.gdp_delta_of_eps(mu, eps) == pytest.approx(
            gaussian_delta(eps, mu), rel=1e-9, abs=1e-300)
    eps = accounting.gdp_eps_at_delta(mu, 1e-5)
    assert accounting.gdp_delta_of_eps(mu, eps) == pytest.approx(1e-5, rel=1e-8)


def test_gdp_agrees_with_full_batch_accountant():
    # Two independent routes to the same curve: closed-form GDP and the PLD.
    for sigma, steps in [(1.0, 4), (3.0, 50)]:
        mu = 2 * math.sqrt(steps) / sigma
        pld_eps = accounting.epsilon_for(1.0, sigma, steps, 1e-5, SUBSTITUTE)
        assert accounting.gdp_eps_at_delta(mu, 1e-5) == pytest.approx(pld_eps, rel=1e-4)


def test_gdp_tiny_mu_is_zero_epsilon():
    assert accounting.gdp_eps_at_delta(1e-7, 1e-5) == 0.0


def test_calibrate_sigma_round_trip():
    sigma = accounting.calibrate_sigma(4.0, 1.0, 100, 1e-5)
    assert accounting.epsilon_for(1.0, sigma, 100, 1e-5, SUBSTITUTE) == pytest.approx(4.0, rel=1e-4)
    with pytest.raises(ValueError):
        accounting.calibrate_sigma(0.0, 1.0, 100, 1e-5)


def test_accounted_substitute_never_exceeds_group_bound():
    # The group-privacy bound is a theorem, so the PLD must respect it.
    for q, sigma in [(1.0, 1.0), (0.25, 2.0), (0.0625, 4.0)]:
        eps_ar = accounting.epsilon_for(q, sigma, 100, 1e-5, ADD_REMOVE)
        group = accounting.group_privacy_convert(eps_ar, 1e-5)
        if group.delta < 1:
            pld = accounting.account(q, sigma, 100, SUBSTITUTE)
            assert pld.epsilon_at_delta(group.delta) <= group.epsilon + 1e-9


@settings(max_examples=15)
@given(q=st.sampled_from([1.0, 0.5, 0.1]), sigma=st.floats(0.6, 3.0),
       steps=st.integers(1, 40))
def test_epsilon_monotone_in_noise_steps_and_adjacency(q, sigma, steps):
    eps = lambda s, t, adj: accounting.epsilon_for(q, round(s, 6), t, 1e-5, adj)
    base = eps(sigma, steps, SUBSTITUTE)
    assert eps(sigma * 1.3, steps, SUBSTITUTE) <= base + 1e-9
    assert eps(sigma, steps + 5, SUBSTITUTE) >= base - 1e-9
    assert eps(sigma, steps, ADD_REMOVE) <= base + 1e-9


@settings(max_examples=15)
@given(q=st.floats(0.05, 1.0), sigma=st.floats(0.7, 3.0))
def test_delta_decreases_in_epsilon(q, sigma):
    pld = accounting.account(round(q, 4), round(sigma, 4), 5, SUBSTITUTE)
    deltas = [pld.delta_at_epsilon(e) for e in np.linspace(0, 6, 25)]
    assert all(a >= b - 1e-15 for a, b in zip(deltas, deltas[1:]))
