"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

Privacy-loss distributions (PLDs) are discretized on a uniform grid of loss
values and composed by FFT convolution. Two adjacency relations are covered:

* ``add_remove``: the dominating pairs are ``(1-q) N(0, s^2) + q N(1, s^2)``
  against ``N(0, s^2)`` (remove) and the reverse (add). Both directions are
  composed and the pointwise-larger delta is reported.
* ``substitute``: ``(1-q) N(0, s^2) + q N(1, s^2)`` against
  ``(1-q) N(0, s^2) + q N(-1, s^2)``, where a single inclusion coin decides
  whether the slot contributes ``+1`` or ``-1``. This pair is symmetric, so
  one direction suffices.

All losses are in nats; sensitivities are normalized by the clipping bound.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import scipy.optimize
import scipy.signal

from subaudit import numerics

ADD_REMOVE = 'add_remove'
SUBSTITUTE = 'substitute'
ADJACENCIES = (ADD_REMOVE, SUBSTITUTE)

DEFAULT_GRID_STEP = 1e-4
DEFAULT_MAX_POINTS = 1 << 22
TRUNCATION_MASS = 1e-15
# Input-space half-width (in noise standard deviations) over which a single
# step's loss is discretized; the excluded mass is below 1e-18.
_X_TAIL_SIGMAS = 9.0


@dataclasses.dataclass(frozen=True)
class LossGrid:
    """One direction of a discretized privacy-loss distribution.

    `masses[i]` is the probability of loss value `origin + i * step`.
    `tail_mass` collects probability dropped by truncation and
    `infinity_mass` is the probability of an infinite loss; both count in
    full towards delta.
    """

    origin: float
    step: float
    masses: np.ndarray
    tail_mass: float = 0.0
    infinity_mass: float = 0.0

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f'grid step must be positive, got {self.step}')

    @property
    def losses(self) -> np.ndarray:
        return self.origin + self.step * np.arange(self.masses.size)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum()) + self.tail_mass + self.infinity_mass

    def mean(self) -> float:
        return float(np.dot(self.masses, self.losses) / self.masses.sum())

    def variance(self) -> float:
        w = self.masses / self.masses.sum()
        mu = float(np.dot(w, self.losses))
        return float(np.dot(w, (self.losses - mu) ** 2))

    def compose(self, other: 'LossGrid') -> 'LossGrid':
        if not math.isclose(self.step, other.step, rel_tol=1e-12):
            raise ValueError('cannot compose grids with different spacing')
        masses = scipy.signal.fftconvolve(self.masses, other.masses)
        sa, sb = float(self.masses.sum()), float(other.masses.sum())
        infinity = 1.0 - (1.0 - self.infinity_mass) * (1.0 - other.infinity_mass)
        # Everything neither retained on the grid nor infinite is tail.
        tail = (sa + self.tail_mass) * (sb + other.tail_mass) - sa * sb
        return _truncate(self.origin + other.origin, self.step, masses, tail,
                         infinity)

    def self_compose(self, count: int) -> 'LossGrid':
        if count < 1:
            raise ValueError(f'composition count must be >= 1, got {count}')
        result = None
        base = self
        while True:
            if count & 1:
                result = base if result is None else result.compose(base)
            count >>= 1
            if not count:
                return result
            base = base.compose(base)

    def delta_at_epsilon(self, epsilon: float) -> float:
        losses = self.losses
        above = losses > epsilon
        excess = -np.expm1(epsilon - losses[above])
        tail = float(np.dot(self.masses[above], excess))
        return min(1.0, self.infinity_mass + self.tail_mass + tail)

    def epsilon_at_delta(self, delta: float) -> float:
        """Smallest epsilon >= 0 with delta(epsilon) <= `delta`.

        The delta curve is exactly piecewise of the form a - b * exp(eps)
        between grid points, so the inverse is computed in closed form once the
        bracketing grid cell is located. Returns `inf` when `delta` is below
        the floor set by infinite and truncated mass.
        """
        floor = self.infinity_mass + self.tail_mass
        if delta <= floor:
            return math.inf
        m = self.masses
        n = m.size
        decay = math.exp(-self.step)
        # above[k]: mass strictly above grid point k.
        above = np.concatenate([np.cumsum(m[::-1])[::-1][1:], [0.0]])
        # weighted[k] = sum_{i >= k} m_i exp(-(l_i - l_k)).
        weighted = scipy.signal.lfilter([1.0], [1.0, -decay], m[::-1])[::-1]
        weighted_above = np.concatenate([weighted[1:] * decay, [0.0]])
        curve = floor + above - weighted_above    # delta at each grid point
        k = int(np.searchsorted(-curve, -delta, side='left'))
        if k >= n:
            k = n - 1
        total_weight = weighted[k]
        mass_from_k = m[k] + above[k]
        if total_weight <= 0.0:
            return max(0.0, float(self.origin + k * self.step))
        ratio = (floor + mass_from_k - delta) / total_weight
        if ratio <= 0.0:
            return 0.0
        eps = self.origin + k * self.step + math.log(ratio)
        return max(0.0, float(eps))


def _truncate(origin, step, masses, tail, infinity) -> LossGrid:
    masses = np.asarray(masses, dtype=np.float64)
    peak = float(masses.max()) if masses.size else 0.0
    noise = masses < 1e-15 * peak
    # FFT roundoff sits at ~1e-16 of the peak; it carries no information.
    tail += float(masses[noise & (masses > 0)].sum())
    masses = np.where(noise, 0.0, masses)
    cum = np.cumsum(masses)
    lo = int(np.searchsorted(cum, TRUNCATION_MASS / 2, side='right'))
    rcum = np.cumsum(masses[::-1])
    hi = masses.size - int(np.searchsorted(rcum, TRUNCATION_MASS / 2,
                                           side='right'))
    if hi <= lo:
        lo, hi = 0, masses.size
    tail += float(cum[lo - 1]) if lo > 0 else 0.0
    tail += float(rcum[masses.size - hi - 1]) if hi < masses.size else 0.0
    return LossGrid(origin + lo * step, step, masses[lo:hi].copy(), tail,
                    infinity)


@dataclasses.dataclass(frozen=True)
class PrivacyLossDistribution:
    """A PLD under a named adjacency; one `LossGrid` per direction."""

    adjacency: str
    directions: tuple[LossGrid, ...]
    q: float
    sigma: float
    steps: int = 1

    def compose(self, count: int) -> 'PrivacyLossDistribution':
        return compose(self, count)

    def delta_at_epsilon(self, epsilon: float) -> float:
        return delta_at_epsilon(self, epsilon)

    def epsilon_at_delta(self, delta: float) -> float:
        return epsilon_at_delta(self, delta)


@dataclasses.dataclass(frozen=True)
class EpsDelta:
    epsilon: float
    delta: float
    adjacency: str

    def __post_init__(self):
        if not (self.epsilon >= 0 and 0 <= self.delta <= 1):
            raise ValueError(f'invalid (epsilon, delta) = {self!r}')


def _check_mechanism(q: float, sigma: float):
    if not 0 < q <= 1:
        raise ValueError(f'sampling probability q must be in (0, 1], got {q}')
    if not sigma > 0:
        raise ValueError(f'noise multiplier must be positive, got {sigma}')


def _log1mq(q):
    return math.log1p(-q) if q < 1 else -math.inf


def _remove_loss_of_x(x, q, sigma):
    shift = (2 * np.asarray(x, dtype=np.float64) - 1) / (2 * (sigma * sigma))
    return np.logaddexp(_log1mq(q), math.log(q) + shift)


def _substitute_loss_of_x(x, q, sigma):
    x = np.asarray(x, dtype=np.float64)
    up = np.logaddexp(_log1mq(q), math.log(q) + (2 * x - 1) / (2 * (sigma * sigma)))
    down = np.logaddexp(_log1mq(q), math.log(q) + (-2 * x - 1) / (2 * (sigma * sigma)))
    return up - down


def _remove_x_of_loss(v, q, sigma):
    """Inverse of the (increasing) remove-direction loss; -inf below range."""
    v = np.asarray(v, dtype=np.float64)
    out = np.full(v.shape, -np.inf)
    ok = v > _log1mq(q)
    vv = v[ok]
    with np.errstate(divide='ignore'):
        log_excess = vv + np.log1p(-np.exp(_log1mq(q) - vv))
    out[ok] = (sigma * sigma) * (log_excess - math.log(q)) + 0.5
    return out


def _log_abs_plus_hypot(log_a, log_b):
    """log(a + sqrt(a^2 + b^2)) for a, b >= 0 given as logs."""
    m = np.maximum(log_a, log_b)
    with np.errstate(divide='ignore', invalid='ignore'):
        a = np.exp(log_a - m)
        b = np.exp(log_b - m)
    return m + np.log(a + np.hypot(a, b))


def _substitute_x_of_loss(v, q, sigma):
    # Solved in log space: for small sigma every linear-scale term underflows.
    v = np.asarray(v, dtype=np.float64)
    log_2qa = math.log(2 * q) - 1.0 / (2 * (sigma * sigma))
    log_1mq = _log1mq(q)
    mag = np.abs(v)
    with np.errstate(divide='ignore'):
        log_a = log_1mq + np.log(-np.expm1(-mag))
    rel = _log_abs_plus_hypot(log_a, log_2qa - mag / 2) - log_2qa
    # The loss is odd in x, so negative losses mirror positive ones.
    out = np.where(v >= 0, v + rel, v - rel)
    return (sigma * sigma) * out


def _mixture_cdf_sf(x, q, sigma):
    """CDF and survival of (1-q) N(0, s^2) + q N(1, s^2) at `x`."""
    cdf = (1 - q) * numerics.std_normal_cdf(x / sigma) + q * numerics.std_normal_cdf(
        (x - 1) / sigma)
    sf = (1 - q) * numerics.std_normal_cdf(-x / sigma) + q * numerics.std_normal_cdf(
        (1 - x) / sigma)
    return cdf, sf


def _direction_cdfs(q, sigma, direction):
    """Returns (cdf_sf(v), v_lo, v_hi) for one direction's loss under P."""
    z = _X_TAIL_SIGMAS
    if direction == 'remove':
        def cdf_sf(v):
            return _mixture_cdf_sf(_remove_x_of_loss(v, q, sigma), q, sigma)
        lo, hi = _remove_loss_of_x([-z * sigma, 1 + z * sigma], q, sigma)
    elif direction == 'add':
        def cdf_sf(v):
            x = _remove_x_of_loss(-np.asarray(v, dtype=np.float64), q, sigma)
            return (numerics.std_normal_cdf(-x / sigma),
                    numerics.std_normal_cdf(x / sigma))
        hi, lo = -_remove_loss_of_x([-z * sigma, z * sigma], q, sigma)
    elif direction == 'substitute':
        def cdf_sf(v):
            return _mixture_cdf_sf(_substitute_x_of_loss(v, q, sigma), q, sigma)
        lo, hi = _substitute_loss_of_x([-z * sigma, 1 + z * sigma], q, sigma)
    else:
        raise ValueError(f'unknown direction {direction!r}')
    return cdf_sf, float(lo), float(hi)


def _discretize(cdf_sf, v_lo, v_hi, step, discretization) -> LossGrid:
    k_lo = math.floor(v_lo / step) - 1
    k_hi = math.ceil(v_hi / step) + 1
    points = np.arange(k_lo, k_hi + 1) * step
    if discretization == 'nearest':
        edges = np.concatenate([points - step / 2, [points[-1] + step / 2]])
    elif discretization == 'upper':
        # Each loss is rounded up to the next grid point (pessimistic).
        edges = np.concatenate([[points[0] - step], points])
    else:
        raise ValueError(f'unknown discretization {discretization!r}')
    cdf, sf = cdf_sf(edges)
    masses = np.where(cdf[1:] <= 0.5, cdf[1:] - cdf[:-1], sf[:-1] - sf[1:])
    masses = np.clip(masses, 0.0, None)
    tail = float(cdf[0] + sf[-1])
    return _truncate(float(points[0]), step, masses, tail, 0.0)


def _directions_for(adjacency):
    if adjacency == ADD_REMOVE:
        return ('remove', 'add')
    if adjacency == SUBSTITUTE:
        return ('substitute',)
    raise ValueError(
        f'unknown adjacency {adjacency!r}; expected one of {ADJACENCIES}')


def pld_per_step(q: float, sigma: float, adjacency: str, *,
                 grid_step: float = DEFAULT_GRID_STEP,
                 discretization: str = 'nearest') -> PrivacyLossDistribution:
    """Discretized single-step PLD of the subsampled Gaussian mechanism.

    Bucket masses are exact probabilities of the loss falling in each cell,
    obtained by mapping cell edges back through the monotone loss function to
    the Gaussian-mixture CDF. `discretization='nearest'` puts each cell's mass
    at its center; `'upper'` rounds every loss up to the next grid point.
    """
    _check_mechanism(q, sigma)
    grids = []
    for direction in _directions_for(adjacency):
        cdf_sf, lo, hi = _direction_cdfs(q, sigma, direction)
        grids.append(_discretize(cdf_sf, lo, hi, grid_step, discretization))
    return PrivacyLossDistribution(adjacency, tuple(grids), q, sigma, 1)


def compose(pld: PrivacyLossDistribution,
            count: int) -> PrivacyLossDistribution:
    """`count`-fold self-composition by repeated squaring of FFT convolutions."""
    if count < 1:
        raise ValueError(f'composition count must be >= 1, got {count}')
    if count == 1:
        return pld
    grids = tuple(g.self_compose(count) for g in pld.directions)
    return dataclasses.replace(pld, directions=grids, steps=pld.steps * count)


def delta_at_epsilon(pld: PrivacyLossDistribution, epsilon: float) -> float:
    return max(g.delta_at_epsilon(epsilon) for g in pld.directions)


def epsilon_at_delta(pld: PrivacyLossDistribution, delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError(f'delta must be in (0, 1), got {delta}')
    return max(g.epsilon_at_delta(delta) for g in pld.directions)


def _grid_step_for(q, sigma, steps, adjacency, grid_step, max_points,
                   discretization):
    """Coarsens the grid so the composed PLD fits in `max_points` cells."""
    # Tiny noise gives a huge single-step loss range; fit that first.
    span = max(hi - lo for _, lo, hi in
               (_direction_cdfs(q, sigma, d) for d in _directions_for(adjacency)))
    if not span < 1e9:
        raise ValueError(f'noise multiplier {sigma} is too small for numerical '
                         'accounting')
    while span / grid_step > max_points / 4:
        grid_step *= 2
    probe = pld_per_step(q, sigma, adjacency, grid_step=grid_step,
                         discretization=discretization)
    width = 0.0
    for g in probe.directions:
        width = max(width, 2 * 9.0 * math.sqrt(steps * g.variance())
                    + g.masses.size * g.step)
    step = grid_step
    while width / step > max_points:
        step *= 2
    return probe, step


def account(q: float, sigma: float, steps: int, adjacency: str, *,
            grid_step: float = DEFAULT_GRID_STEP,
            max_points: int = DEFAULT_MAX_POINTS,
            discretization: str = 'nearest') -> PrivacyLossDistribution:
    """PLD of `steps` compositions of the subsampled Gaussian mechanism.

    The grid spacing starts at `grid_step` and is doubled until the composed
    distribution is predicted to fit within `max_points` cells.
    """
    _check_mechanism(q, sigma)
    probe, step = _grid_step_for(q, sigma, steps, adjacency, grid_step,
                                 max_points, discretization)
    if step != probe.directions[0].step:
        probe = pld_per_step(q, sigma, adjacency, grid_step=step,
                             discretization=discretization)
    return compose(probe, steps)


@functools.lru_cache(maxsize=256)
def epsilon_for(q: float, sigma: float, steps: int, delta: float,
                adjacency: str) -> float:
    return epsilon_at_delta(account(q, sigma, steps, adjacency), delta)


def group_privacy_convert(eps_ar: float, delta_ar: float) -> EpsDelta:
    """Substitute guarantee implied by an add/remove one (group size two)."""
    if eps_ar < 0:
        raise ValueError(f'epsilon must be non-negative, got {eps_ar}')
    # Above one the bound is vacuous; report it as delta = 1.
    log_delta = math.log(delta_ar) + math.log1p(math.exp(min(eps_ar, 700.0)))
    return EpsDelta(2 * eps_ar, math.exp(min(log_delta, 0.0)), SUBSTITUTE)


def gdp_delta_of_eps(mu: float, eps: float) -> float:
    """delta(eps) of a mu-GDP mechanism."""
    if not mu > 0:
        raise ValueError(f'mu must be positive, got {mu}')
    if eps < 0:
        raise ValueError(f'epsilon must be non-negative, got {eps}')
    a = numerics.std_normal_cdf(-eps / mu + mu / 2)
    b = math.exp(eps + numerics.std_normal_logcdf(-eps / mu - mu / 2))
    return max(0.0, float(a - b))


def gdp_eps_at_delta(mu: float, delta: float) -> float:
    """Smallest eps >= 0 such that a mu-GDP mechanism is (eps, delta)-DP."""
    if not mu > 0:
        raise ValueError(f'mu must be positive, got {mu}')
    if not 0 < delta < 1:
        raise ValueError(f'delta must be in (0, 1), got {delta}')
    if gdp_delta_of_eps(mu, 0.0) <= delta:
        return 0.0
    hi = max(1.0, mu * mu)
    while gdp_delta_of_eps(mu, hi) > delta:
        hi *= 2
    # Root-find in log-delta: the curve spans many orders of magnitude.
    def gap(eps):
        d = gdp_delta_of_eps(mu, eps)
        return (math.log(d) if d > 0 else -800.0) - math.log(delta)
    return scipy.optimize.brentq(gap, 0.0, hi, xtol=1e-13, rtol=1e-15,
                                 maxiter=500)


def calibrate_sigma(target_eps: float, q: float, steps: int, delta: float,
                    adjacency: str = SUBSTITUTE, *, rtol: float = 1e-4) -> float:
    """Noise multiplier whose accounted epsilon equals `target_eps`."""
    if not target_eps > 0:
        raise ValueError(f'target epsilon must be positive, got {target_eps}')

    def gap(log_sigma):
        sigma = float(round(math.exp(log_sigma), 12))
        return math.log(epsilon_for(q, sigma, steps, delta, adjacency)) - \
            math.log(target_eps)

    lo, hi = math.log(0.25), math.log(4.0)
    while gap(lo) < 0:
        lo -= math.log(4)
    while gap(hi) > 0:
        hi += math.log(4)
    root = scipy.optimize.brentq(gap, lo, hi, xtol=rtol / 4)
    return float(round(math.exp(root), 12))
