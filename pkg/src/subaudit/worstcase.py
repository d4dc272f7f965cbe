"""Worst-case crafted-dataset game, simulated in its 1-D sufficient statistic.

Every non-canary record contributes a zero gradient and the canary slot
contributes ``+C`` under D and ``-C`` under D'. After T steps the released
gradient sum is ``g_T ~ N(+-k C, T sigma^2 C^2)`` with ``k ~ Binomial(T, q)``
the number of steps that included the canary. The distinguisher scores each
run with the exact log-likelihood ratio of the two binomial-Gaussian mixtures.
"""

from __future__ import annotations

import dataclasses
import functools

import numpy as np
import scipy.special
import scipy.stats

from subaudit import numerics
from subaudit.mechanism import DpParams

# Binomial terms below this fraction of the largest term are dropped.
BINOMIAL_RELATIVE_CUTOFF = 1e-12


@dataclasses.dataclass(frozen=True)
class WorstCaseGame:
    dp: DpParams

    def __post_init__(self):
        if self.dp.steps < 1:
            raise ValueError('the game needs at least one step')
        if not self.dp.sigma > 0:
            raise ValueError('the game needs positive noise')

    @property
    def std(self) -> float:
        return float(np.sqrt(self.dp.steps) * self.dp.sigma * self.dp.clip)

    @functools.cached_property
    def _support(self):
        T, q = self.dp.steps, self.dp.q
        k = np.arange(T + 1)
        if q >= 1:
            return np.array([T]), np.array([0.0])
        logw = scipy.stats.binom.logpmf(k, T, q)
        keep = logw >= logw.max() + np.log(BINOMIAL_RELATIVE_CUTOFF)
        return k[keep], logw[keep]


def sample_final_sum(game: WorstCaseGame, arm, gen: np.random.Generator,
                     size: int | None = None):
    """Draws ``g_T`` for arm 0 (mean ``+kC``) or arm 1 (mean ``-kC``).

    `arm` may be an array, in which case one draw is made per entry.
    """
    arm = np.asarray(arm)
    shape = arm.shape if size is None else (size,)
    if np.any((arm != 0) & (arm != 1)):
        raise ValueError('arm must be 0 or 1')
    k = gen.binomial(game.dp.steps, game.dp.q, size=shape)
    sign = np.where(arm == 0, 1.0, -1.0)
    draw = sign * k * game.dp.clip + game.std * gen.standard_normal(shape)
    return float(draw) if draw.ndim == 0 else draw


def _mixture_logpdf(game: WorstCaseGame, g: np.ndarray, sign: float):
    k, logw = game._support
    means = sign * k * game.dp.clip
    z = (g[:, None] - means[None, :]) / game.std
    return scipy.special.logsumexp(logw[None, :] - 0.5 * z**2, axis=1)


def score_llr(game: WorstCaseGame, g):
    """log Pr(g | D) - log Pr(g | D'); normalizing constants cancel."""
    g_arr = np.atleast_1d(np.asarray(g, dtype=np.float64))
    numerics.check_finite(g_arr, 'gradient sum')
    out = _mixture_logpdf(game, g_arr, 1.0) - _mixture_logpdf(game, g_arr, -1.0)
    return float(out[0]) if np.ndim(g) == 0 else out


def mixture_pdf(game: WorstCaseGame, g, arm: int = 0):
    g_arr = np.atleast_1d(np.asarray(g, dtype=np.float64))
    sign = 1.0 if arm == 0 else -1.0
    log_norm = -np.log(game.std * np.sqrt(2 * np.pi))
    return np.exp(_mixture_logpdf(game, g_arr, sign) + log_norm)


def run_worstcase_audit(game: WorstCaseGame, repeats: int,
                        rng: numerics.RngStream | np.random.Generator,
                        chunk: int = 100_000):
    """R independent plays of the game; bits are fair coins.

    Returns an `AuditOutcome` holding the final-step scores.
    """
    from subaudit.audit import AuditOutcome

    if repeats < 2:
        raise ValueError('need at least two repeats')
    gen = rng.generator() if isinstance(rng, numerics.RngStream) else rng
    bits = gen.integers(0, 2, size=repeats)
    g = sample_final_sum(game, bits, gen)
    scores = np.concatenate([score_llr(game, g[i:i + chunk])
                             for i in range(0, repeats, chunk)])
    return AuditOutcome(scores=scores, bits=bits, step=game.dp.steps,
                        scenario='S1')
