import numpy as np
import pytest
import scipy.stats

from subaudit import accounting, audit, canaries, data, models, numerics, worstcase
from subaudit.data import Sample
from subaudit.mechanism import DpParams, TrainConfig


def cp_oracle(k, n, alpha=0.05):
    """Upper limit by bisection on the binomial CDF: P(X <= k; p) = alpha/2."""
    lo, hi = k / n, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if scipy.stats.binom.cdf(k, n, mid) > alpha / 2:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_clopper_pearson_examples():
    assert audit.clopper_pearson_upper(100, 100) == 1.0
    assert audit.clopper_pearson_upper(0, 100) == pytest.approx(1 - 0.025**0.01, abs=1e-12)
    assert audit.clopper_pearson_upper(0, 100) == pytest.approx(0.03622, abs=1e-5)
    for k, n in [(5, 100), (1, 7), (600, 1250), (1249, 1250)]:
        assert audit.clopper_pearson_upper(k, n) == pytest.approx(cp_oracle(k, n), abs=1e-8)
    np.testing.assert_allclose(audit.clopper_pearson_upper(np.array([0, 5]), 100),
                               [1 - 0.025**0.01, cp_oracle(5, 100)], atol=1e-8)
    with pytest.raises(ValueError):
        audit.clopper_pearson_upper(3, 2)


def test_mu_lower_bound_examples():
    assert audit.mu_lower_bound(0.5, 0.5) == 0.0
    assert audit.mu_lower_bound(0.158655, 0.158655) == pytest.approx(2.0, abs=1e-5)
    assert audit.mu_lower_bound(0.7, 0.6) == 0.0
    assert audit.mu_lower_bound(0.0, 0.0, n=100) == pytest.approx(
        2 * scipy.stats.norm.ppf(1 - 0.005))


def test_constant_scores_give_zero():
    est = audit.estimate_eps(audit.AuditOutcome(np.ones(50), np.arange(50) % 2, 1, 'S2'))
    assert est.eps_lower == 0.0 and 'constant_scores' in est.flags


def test_perfect_separation_chain():
    bits = np.arange(2500) % 2
    out = audit.AuditOutcome(np.where(bits == 0, 1.0, -1.0), bits, 10, 'S2')
    est = audit.estimate_eps(out)
    cp = 1 - 0.025 ** (1 / 1250)
    assert est.fpr_upper == pytest.approx(cp, rel=1e-10)
    assert est.fnr_upper == pytest.approx(cp, rel=1e-10)
    assert cp == pytest.approx(0.00295, abs=1e-5)
    mu = 2 * scipy.stats.norm.ppf(1 - cp)
    assert est.mu_lower == pytest.approx(mu, rel=1e-10)
    assert est.mu_lower == pytest.approx(5.51, abs=0.01)
    assert est.eps_lower == pytest.approx(accounting.gdp_eps_at_delta(mu, 1e-5), rel=1e-10)
    assert est.threshold == 0.0


def test_null_scores_yield_small_epsilon():
    gen = np.random.default_rng(0)
    hits = 0
    for _ in range(20):
        out = audit.AuditOutcome(gen.standard_normal(2500), gen.integers(0, 2, 2500), 1, 'S1')
        hits += audit.estimate_eps(out).eps_lower < 0.2
    assert hits >= 18


def test_zero_epsilon_whenever_bounds_sum_past_one():
    gen = np.random.default_rng(1)
    for _ in range(20):
        out = audit.AuditOutcome(gen.standard_normal(40), gen.integers(0, 2, 40), 1, 'S1')
        est = audit.estimate_eps(out)
        if est.fpr_upper + est.fnr_upper >= 1:
            assert est.eps_lower == 0.0
        assert 0 <= est.fpr_upper <= 1 and 0 <= est.fnr_upper <= 1


def test_sweep_dominates_median_threshold():
    g = worstcase.WorstCaseGame(DpParams(0.5, 1.0, 1.0, 20))
    out = worstcase.run_worstcase_audit(g, 3000, numerics.RngStream(2))
    best = audit.estimate_eps(out)
    tau = np.median(out.scores)
    s0, s1 = out.scores[out.bits == 0], out.scores[out.bits == 1]
    fpr = audit.clopper_pearson_upper(int((s1 >= tau).sum()), s1.size)
    fnr = audit.clopper_pearson_upper(int((s0 < tau).sum()), s0.size)
    mu = audit.mu_lower_bound(fpr, fnr)
    fixed = accounting.gdp_eps_at_delta(mu, 1e-5) if mu > 0 else 0.0
    assert best.eps_lower >= fixed


def test_more_repeats_raise_the_separable_ceiling():
    eps = []
    for R in (250, 500, 1000, 2500):
        bits = np.arange(R) % 2
        eps.append(audit.estimate_eps(audit.AuditOutcome(-bits.astype(float), bits, 1, 'S2')).eps_lower)
    assert all(a <= b for a, b in zip(eps, eps[1:]))


def test_worstcase_epsilon_non_increasing_in_noise():
    medians = []
    for sigma in (1.0, 2.0, 4.0):
        g = worstcase.WorstCaseGame(DpParams(1.0, sigma, 1.0, 10))
        medians.append(np.median([
            audit.estimate_eps(worstcase.run_worstcase_audit(
                g, 2000, numerics.RngStream(s, 9))).eps_lower for s in range(5)]))
    assert medians[0] >= medians[1] >= medians[2]


def _small_problem(n=20):
    ds = data.gen_synthetic(n, 3, 2, 2.0, np.random.default_rng(0))
    arch = models.LinearSoftmax(3, 2)
    g = np.zeros(arch.n_params)
    g[1] = 1.0
    return ds, arch, canaries.CanarySpec('S2', (g, -g))


def test_huge_noise_campaign_is_indistinguishable():
    ds, arch, spec = _small_problem()
    dp = DpParams(1.0, 1e5, 1.0, 5)
    outs = audit.run_audit_campaign(spec, arch, ds, dp, TrainConfig(lr=0.1, stride=5),
                                    1000, numerics.RngStream(3), theta0=np.zeros(arch.n_params))
    assert audit.estimate_eps(outs[-1]).eps_lower < 0.1


def test_noiseless_gradient_campaign_is_separable():
    ds, arch, spec = _small_problem()
    dp = DpParams(1.0, 0.0, 1.0, 4)
    outs = audit.run_audit_campaign(spec, arch, ds, dp, TrainConfig(lr=0.1, stride=2),
                                    200, numerics.RngStream(3), theta0=np.zeros(arch.n_params))
    assert [o.step for o in outs] == [2, 4]
    last = outs[-1]
    assert last.scores[last.bits == 0].min() > last.scores[last.bits == 1].max()
    est = audit.estimate_eps(last)
    n0, n1 = int((last.bits == 0).sum()), int((last.bits == 1).sum())
    assert est.fpr_upper == pytest.approx(audit.clopper_pearson_upper(0, n1))
    assert est.fnr_upper == pytest.approx(audit.clopper_pearson_upper(0, n0))


def test_campaign_is_deterministic_and_worker_independent():
    ds, arch, spec = _small_problem()
    dp = DpParams(0.5, 1.0, 1.0, 6)
    cfg = TrainConfig(lr=0.1, stride=3)
    kw = dict(theta0=np.zeros(arch.n_params), lanes=16)
    a = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 40, numerics.RngStream(5), **kw)
    b = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 40, numerics.RngStream(5), **kw)
    c = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 40, numerics.RngStream(5),
                                 workers=2, **kw)
    d = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 40, numerics.RngStream(5),
                                 theta0=np.zeros(arch.n_params), lanes=40)
    for x, y, z, w in zip(a, b, c, d):
        np.testing.assert_array_equal(x.scores, y.scores)
        np.testing.assert_array_equal(x.scores, z.scores)
        np.testing.assert_array_equal(x.bits, w.bits)
        np.testing.assert_allclose(x.scores, w.scores, rtol=1e-12, atol=1e-15)


def test_input_scores_use_own_label_logits():
    ds, arch, _ = _small_problem()
    z, z2 = Sample([1.0, 0.0, 0.0], 0), Sample([0.0, 1.0, 0.0], 1)
    spec = canaries.CanarySpec('S4', (z, z2))
    dp = DpParams(1.0, 0.5, 1.0, 3)
    cfg = TrainConfig(lr=0.1, stride=3)
    outs = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 12, numerics.RngStream(0),
                                    theta0=np.zeros(arch.n_params))
    fixed = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 12, numerics.RngStream(0),
                                     theta0=np.zeros(arch.n_params), fixed_class=True)
    from subaudit import mechanism
    for r in range(12):
        rep = numerics.RngStream(0).child(r)
        b = int(rep.child(0).generator().integers(0, 2))
        res = mechanism.train(models.Model(arch, np.zeros(arch.n_params)), ds, dp, cfg,
                              rep.child(2), canary=spec.arm(b))
        logits = arch.logits(res.model.params, np.stack([z.x, z2.x]))
        assert outs[0].scores[r] == pytest.approx(logits[0, 0] - logits[1, 1], abs=1e-12)
        assert fixed[0].scores[r] == pytest.approx(logits[0, 0] - logits[1, 0], abs=1e-12)


def test_divergent_campaign_fails():
    ds, arch, spec = _small_problem()
    dp = DpParams(1.0, 1e300, 1.0, 3)
    with pytest.raises(audit.CampaignError):
        audit.run_audit_campaign(spec, arch, ds, dp, TrainConfig(lr=1e10), 20,
                                 numerics.RngStream(0), theta0=np.zeros(arch.n_params))


def test_random_init_differs_per_repeat():
    ds = data.gen_synthetic(10, 3, 2, 2.0, np.random.default_rng(0))
    arch = models.MLP3(3, 2, (4, 4))
    g = np.zeros(arch.n_params)
    g[0] = 1.0
    spec = canaries.CanarySpec('S2', (g, -g))
    dp, cfg = DpParams(1.0, 0.0, 1.0, 2), TrainConfig(lr=0.01, stride=2)
    # Noiseless full-batch training: scores differ only through initialization.
    fresh = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 10, numerics.RngStream(1))
    fixed = audit.run_audit_campaign(spec, arch, ds, dp, cfg, 10, numerics.RngStream(1),
                                     theta0=arch.init_params(np.random.default_rng(0)))
    assert np.unique(np.round(fresh[0].scores, 12)).size == 10
    assert np.unique(np.round(fixed[0].scores, 12)).size == 2


def test_helpers():
    assert audit.logged_steps(500, 125) == [125, 250, 375, 500]
    assert audit.logged_steps(10, 4) == [4, 8, 10]
    mean, lo, hi = audit.summarize([1.0, 2.0, 3.0])
    assert mean == 2.0 and hi - mean == pytest.approx(2 / np.sqrt(3))
    with pytest.raises(ValueError):
        audit.AuditOutcome(np.ones(3), np.array([0, 1, 2]), 1, 'S2')
