"""The repeated distinguishing game and its conversion into epsilon lower bounds.

A campaign trains R models. Each one gets a fair hidden bit choosing which
canary arm enters the canary slot, and the auditor scores every logged
snapshot. Scores are oriented so that large values point to arm 0. The
estimator sweeps decision thresholds, bounds both error rates with one-sided
Clopper-Pearson limits, converts them to a mu-GDP lower bound and reports the
implied epsilon at the target delta.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses

import numpy as np
import scipy.special

from subaudit import accounting, numerics
from subaudit.canaries import CanarySpec
from subaudit.data import Dataset
from subaudit.mechanism import DpParams, TrainConfig, train_lanes

ALPHA = 0.05
MAX_ABORT_FRACTION = 0.01


class CampaignError(RuntimeError):
    """Too many training repeats failed for the campaign to be meaningful."""


@dataclasses.dataclass
class AuditOutcome:
    """Scores and hidden bits of R repeats at one logged step."""

    scores: np.ndarray
    bits: np.ndarray
    step: int
    scenario: str
    n_aborted: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.scores.shape != self.bits.shape or self.scores.ndim != 1:
            raise ValueError('scores and bits must be equal-length vectors')
        if np.any((self.bits != 0) & (self.bits != 1)):
            raise ValueError('bits must be 0 or 1')

    @property
    def repeats(self) -> int:
        return int(self.bits.size)


@dataclasses.dataclass(frozen=True)
class EpsEstimate:
    fpr_upper: float
    fnr_upper: float
    mu_lower: float
    eps_lower: float
    threshold: float
    step: int
    alpha: float = ALPHA
    flags: tuple[str, ...] = ()


def clopper_pearson_upper(k, n, alpha: float = ALPHA):
    """One-sided ``1 - alpha/2`` upper confidence limit on a binomial rate."""
    k = np.asarray(k)
    n = np.asarray(n)
    if np.any(n < 1) or np.any(k < 0) or np.any(k > n):
        raise ValueError('need 0 <= k <= n and n >= 1')
    if not 0 < alpha < 1:
        raise ValueError(f'alpha must be in (0, 1), got {alpha}')
    full = k >= n
    with np.errstate(invalid='ignore'):
        bound = scipy.special.betaincinv(k + 1, np.where(full, 1, n - k),
                                         1 - alpha / 2)
    out = np.where(full, 1.0, bound)
    return float(out) if out.ndim == 0 else out


def _mu_and_flags(fpr_upper, fnr_upper, n_neg, n_pos):
    a = np.asarray(fpr_upper, dtype=np.float64)
    b = np.asarray(fnr_upper, dtype=np.float64)
    lo_a, lo_b = 0.5 / n_neg, 0.5 / n_pos
    ca = np.clip(a, lo_a, 1 - lo_a)
    cb = np.clip(b, lo_b, 1 - lo_b)
    mu = numerics.std_normal_quantile(1 - ca) - numerics.std_normal_quantile(cb)
    return np.maximum(mu, 0.0), (ca != a) | (cb != b)


def mu_lower_bound(fpr_upper: float, fnr_upper: float, n: int = 10**9) -> float:
    """``Phi^-1(1 - FPR) - Phi^-1(FNR)`` floored at zero.

    Rates at 0 or 1 are moved into the open interval by ``1/(2n)``.
    """
    mu, _ = _mu_and_flags(fpr_upper, fnr_upper, n, n)
    return float(mu)


def estimate_eps(outcome: AuditOutcome, delta: float = 1e-5,
                 alpha: float = ALPHA) -> EpsEstimate:
    """Best epsilon lower bound over all thresholds; ``score >= tau`` guesses
    arm 0."""
    if outcome.repeats < 10:
        raise ValueError(f'need at least 10 repeats, got {outcome.repeats}')
    s0 = np.sort(outcome.scores[outcome.bits == 0])
    s1 = np.sort(outcome.scores[outcome.bits == 1])
    n0, n1 = s0.size, s1.size
    unique = np.unique(outcome.scores)
    if n0 == 0 or n1 == 0 or unique.size < 2:
        flag = 'single_arm' if n0 == 0 or n1 == 0 else 'constant_scores'
        return EpsEstimate(1.0, 1.0, 0.0, 0.0, float('nan'), outcome.step,
                           alpha, (flag,))
    taus = 0.5 * (unique[:-1] + unique[1:])
    false_pos = n1 - np.searchsorted(s1, taus, side='left')
    false_neg = np.searchsorted(s0, taus, side='left')
    fpr_u = clopper_pearson_upper(false_pos, n1, alpha)
    fnr_u = clopper_pearson_upper(false_neg, n0, alpha)
    mu, clamped = _mu_and_flags(fpr_u, fnr_u, n1, n0)
    best = int(np.argmax(mu))
    flags = ('clamped',) if clamped[best] else ()
    m = float(mu[best])
    eps = accounting.gdp_eps_at_delta(m, delta) if m > 0 else 0.0
    return EpsEstimate(float(fpr_u[best]), float(fnr_u[best]), m, eps,
                       float(taus[best]), outcome.step, alpha, flags)


def logged_steps(steps: int, stride: int) -> list[int]:
    out = list(range(stride, steps + 1, stride))
    if not out or out[-1] != steps:
        out.append(steps)
    return out


def _scorer(spec: CanarySpec, arch, clip: float, fixed_class: bool):
    if spec.is_gradient:
        direction = spec.arm(0) / clip

        def score(theta0, thetas):
            # Adding g_z to the gradient moves theta along -g_z.
            return (theta0 - thetas) @ direction
        return score
    z, z_alt = spec.payload
    X = np.stack([z.x, z_alt.x])
    y_alt = z.y if fixed_class else z_alt.y

    def score(theta0, thetas):
        logits = arch.logits_lanes(thetas, X)
        return logits[:, 0, z.y] - logits[:, 1, y_alt]
    return score


@dataclasses.dataclass(frozen=True)
class _Chunk:
    spec: CanarySpec
    arch: object
    dataset: Dataset
    dp: DpParams
    cfg: TrainConfig
    theta0: np.ndarray | None
    fixed_class: bool
    rng: numerics.RngStream
    first: int
    count: int


def _run_chunk(job: _Chunk):
    reps = [job.rng.child(r) for r in range(job.first, job.first + job.count)]
    bits = np.array([int(rep.child(0).generator().integers(0, 2))
                     for rep in reps])
    if job.theta0 is None:
        theta0 = np.stack([job.arch.init_params(rep.child(1).generator())
                           for rep in reps])
    else:
        theta0 = np.broadcast_to(job.theta0, (job.count, job.arch.n_params))
    gens = [rep.child(2).generator() for rep in reps]
    score_fn = _scorer(job.spec, job.arch, job.dp.clip, job.fixed_class)
    scores = []
    result = train_lanes(job.arch, theta0, job.dataset, job.dp, job.cfg, gens,
                         [job.spec.arm(b) for b in bits],
                         observe=lambda t, th: scores.append(score_fn(theta0, th)))
    return bits, np.stack(scores), result.aborted_at


def run_audit_campaign(spec: CanarySpec, arch, dataset: Dataset, dp: DpParams,
                       cfg: TrainConfig, repeats: int, rng: numerics.RngStream,
                       *, theta0: np.ndarray | None = None,
                       fixed_class: bool = False, lanes: int = 250,
                       workers: int = 1) -> list[AuditOutcome]:
    """Runs `repeats` training games and returns one outcome per logged step.

    Args:
        spec: canary pair; arm b enters the canary slot when the bit is b.
        arch: model architecture.
        dataset: base training records (the canary slot is extra).
        dp: mechanism parameters.
        cfg: optimizer settings; `cfg.stride` sets the logged steps.
        repeats: number of games R.
        rng: campaign stream; repeat r uses ``rng.child(r)`` and its children
            0 (bit), 1 (initialization) and 2 (training).
        theta0: fixed initialization; None draws a fresh one per repeat.
        fixed_class: score both input canaries with the target's label logit.
        lanes: repeats trained together in one vectorized batch.
        workers: worker processes; results do not depend on this value.

    Raises:
        CampaignError: if more than 1% of repeats hit a non-finite update.
    """
    if repeats < 2:
        raise ValueError('need at least two repeats')
    if dp.steps < 1:
        raise ValueError('auditing needs at least one training step')
    jobs = [_Chunk(spec, arch, dataset, dp, cfg, theta0, fixed_class, rng,
                   first, min(lanes, repeats - first))
            for first in range(0, repeats, lanes)]
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(job) for job in jobs]
    bits = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts], axis=1)
    aborted = np.concatenate([p[2] for p in parts])
    ok = aborted == 0
    n_bad = int((~ok).sum())
    if n_bad > MAX_ABORT_FRACTION * repeats:
        raise CampaignError(f'{n_bad} of {repeats} training repeats produced '
                            'non-finite updates')
    return [AuditOutcome(scores[i, ok], bits[ok], t, spec.scenario, n_bad)
            for i, t in enumerate(logged_steps(dp.steps, cfg.stride))]


def accounting_overlay(dp: DpParams, step: int) -> dict:
    """Upper bounds after `step` steps: add/remove, substitute and the
    group-privacy substitute bound."""
    eps_ar = accounting.epsilon_for(dp.q, dp.sigma, step, dp.delta_target,
                                    accounting.ADD_REMOVE)
    eps_s = accounting.epsilon_for(dp.q, dp.sigma, step, dp.delta_target,
                                   accounting.SUBSTITUTE)
    group = accounting.group_privacy_convert(eps_ar, dp.delta_target)
    return {'eps_ar_acct': eps_ar, 'eps_s_acct': eps_s,
            'eps_s_group': group.epsilon}


def summarize(values) -> tuple[float, float, float]:
    """Mean and the ``mean -+ 2 SE`` band across campaign repeats."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return mean, mean - 2 * se, mean + 2 * se
