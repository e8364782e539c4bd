import numpy as np
import pytest
from scipy import stats

from builders import scenario_text
from msmsim.engine import (
    TERMINAL_CENSORED,
    TERMINAL_FAILURE,
    PanelDataset,
    rank_quantiles,
    run_basic_individual,
    run_extended_individual,
    simulate_cohort,
    simulate_counterfactual,
    simulate_individual,
)
from msmsim.errors import DomainError, EnsembleExtinctionError, HazardDomainError
from msmsim.estimate import empirical_hazard
from msmsim.rng import StreamFactory, substream
from msmsim.scenario import parse_scenario


def build(**kw):
    return parse_scenario(scenario_text(**kw))


# uniform L each visit, so the risk-score CDF among survivors is the identity
UNIFORM_L = dict(confounder='dist = "uniform"\nlo = "0"\nhi = "1"', risk="L1[k]")


def identity_cdf(k, h, x, a):
    return h


# ---- rank quantiles


def test_rank_quantiles_example():
    u, r = rank_quantiles([5.0, 1.0, 3.0], np.random.default_rng(0))
    assert r.tolist() == [3, 1, 2]
    assert u[1] < u[2] < u[0]
    for j in range(3):
        assert (r[j] - 1) / 3 < u[j] < r[j] / 3


def test_rank_quantiles_single():
    u, r = rank_quantiles([7.0], np.random.default_rng(1))
    assert r.tolist() == [1] and 0 < u[0] < 1


def test_rank_quantiles_empty():
    with pytest.raises(DomainError):
        rank_quantiles([], np.random.default_rng(0))


def test_rank_quantiles_ties_are_exchangeable():
    # with all scores tied the rank of clone 0 is uniform on 1..m
    m, reps = 4, 4000
    counts = np.zeros(m)
    for i in range(reps):
        _, r = rank_quantiles(np.zeros(m), np.random.default_rng(i), np.random.default_rng(10 ** 6 + i))
        assert sorted(r.tolist()) == list(range(1, m + 1))
        counts[r[0] - 1] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_rank_quantiles_ks_uniform():
    rng = np.random.default_rng(2024)
    pooled = np.concatenate([rank_quantiles(rng.standard_normal(5), rng)[0] for _ in range(10 ** 5)])
    assert stats.kstest(pooled, "uniform").pvalue > 0.01


# ---- basic algorithm


def test_basic_zero_hazard_survives():
    s = build(K=3, link="identity", intercepts=[0.0] * 4, terms=(), **UNIFORM_L)
    p = run_basic_individual(s, StreamFactory(1, 1), identity_cdf)
    assert p.terminal == TERMINAL_CENSORED and p.time == 4
    assert all(r.y == 1 for r in p.records)


def test_basic_unit_hazard_fails_at_one():
    s = build(K=3, link="identity", intercepts=[1.0] * 4, terms=(), **UNIFORM_L)
    p = run_basic_individual(s, StreamFactory(1, 1), identity_cdf)
    assert p.terminal == TERMINAL_FAILURE and p.time == 1 and p.visits == 1


def test_basic_needs_cdf():
    with pytest.raises(DomainError):
        run_basic_individual(build(**UNIFORM_L), StreamFactory(1, 1), None)


def test_basic_hazard_at_time_one():
    s = build(K=0, terms=(), intercepts=[-2.0], **UNIFORM_L)
    n = 10 ** 5
    fails = sum(run_basic_individual(s, StreamFactory(5, i), identity_cdf).terminal == TERMINAL_FAILURE
                for i in range(1, n + 1))
    g = 1 / (1 + np.exp(2.0))
    p = fails / n
    assert abs(p - g) < 3 * np.sqrt(p * (1 - p) / n)


def _failure_times(paths, K):
    return np.array([p.time if p.terminal == TERMINAL_FAILURE else K + 2 for p in paths])


def _basic_vs_extended(n, m):
    kw = dict(K=4, mode="generalised", treatment='dist = "bernoulli"\np = "0.5"', **UNIFORM_L)
    s = build(m=m, **kw)
    tb = _failure_times([run_basic_individual(s, StreamFactory(1, i), identity_cdf) for i in range(1, n + 1)], 4)
    te = _failure_times([run_extended_individual(s, StreamFactory(2, i)) for i in range(1, n + 1)], 4)
    return stats.ks_2samp(tb, te).pvalue


def test_basic_extended_agreement_reduced():
    assert _basic_vs_extended(3000, 500) > 0.01


@pytest.mark.slow
def test_basic_extended_agreement_full():
    assert _basic_vs_extended(10 ** 5, 5000) > 0.01


# ---- extended algorithm


def test_extended_zero_hazard():
    s = build(K=4, link="identity", intercepts=[0.0] * 5, terms=())
    p = run_extended_individual(s, StreamFactory(3, 1))
    assert p.terminal == TERMINAL_CENSORED and p.visits == 5


def test_strict_identity_link_raises():
    s = build(K=1, link="identity", intercepts=[1.2, 0.1], terms=())
    with pytest.raises(HazardDomainError):
        run_extended_individual(s, StreamFactory(3, 1))


def test_permissive_identity_link_clips_and_counts():
    s = build(K=1, link="identity", intercepts=[1.2, 0.1], terms=(), strict=False)
    p = run_extended_individual(s, StreamFactory(3, 1))
    assert p.clipped == 1 and p.terminal == TERMINAL_FAILURE


def test_y_non_increasing_and_records_stop():
    s = build(K=6, intercepts=[-1.0] * 7)
    for i in range(1, 60):
        p = run_extended_individual(s, StreamFactory(9, i))
        ys = [r.y for r in p.records]
        assert all(y == 1 for y in ys[:-1])
        assert (ys[-1] == 0) == (p.terminal == TERMINAL_FAILURE)
        assert [r.k for r in p.records] == list(range(p.visits))


def test_clone_bookkeeping():
    s = build(K=6, intercepts=[-1.0] * 7, m=50)
    seen = []

    def observer(k, ens, failed):
        assert ens.m == 50 and ens.identity[0] == 1
        assert len(ens.a) == k + 1
        donors = np.flatnonzero(~failed)
        donors = donors[donors > 0]
        for j in np.flatnonzero(failed[1:]) + 1:
            same = [d for d in donors
                    if np.array_equal(ens.b[d], ens.b[j]) and np.array_equal(ens.l[: k + 1, d], ens.l[: k + 1, j])]
            assert same, "replaced clone does not match any survivor"
        seen.append(k)

    for i in range(1, 20):
        simulate_individual(s, StreamFactory(4, i), observer=observer)
    assert seen


def test_generalised_equals_extended_for_gaussian():
    for rho in (-0.9, -0.3, 0.0):
        cop = f'family = "gaussian"\nrho = {rho}'
        ext = build(K=5, copula=cop, mode="extended")
        gen = build(K=5, copula=cop, mode="generalised")
        a = simulate_cohort(ext, 30, 17).frame.to_csv(index=False)
        b = simulate_cohort(gen, 30, 17).frame.to_csv(index=False)
        assert a == b


def test_independence_copula_failure_unrelated_to_risk():
    # constant g: any association with L1 would come from the matching step
    s = build(K=0, copula='family = "gaussian"\nrho = 0.0', intercepts=[-1.5], terms=(), m=100)
    f = simulate_cohort(s, 10 ** 5, 3).frame
    tercile = np.digitize(f["L1"], np.quantile(f["L1"], [1 / 3, 2 / 3]))
    table = np.array([[np.sum((tercile == t) & (f["Y"] == y)) for y in (0, 1)] for t in range(3)])
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_extinction_reports_individual():
    s = build(K=3, link="identity", intercepts=[0.95] * 4, terms=(), m=2)
    with pytest.raises(EnsembleExtinctionError) as info:
        simulate_cohort(s, 200, 1)
    assert info.value.individual is not None and 1 <= info.value.individual <= 200
    assert f"individual {info.value.individual}" in str(info.value)


def test_refresh_rebuilds_ensemble():
    extra = "[algorithm.refresh]\nm_big = 120\nthreshold = 0.5\n"
    s = build(K=5, link="identity", intercepts=[0.4] * 6, terms=(), m=20, extra=extra)
    sizes = []
    refreshed = []
    for i in range(1, 40):
        sizes.clear()
        p = simulate_individual(s, StreamFactory(8, i), observer=lambda k, ens, failed: sizes.append(ens.m))
        if p.refreshed_at is not None:
            refreshed.append(i)
            assert sizes[p.refreshed_at] == 20
            assert all(m == 120 for m in sizes[p.refreshed_at + 1:])
    assert refreshed


# ---- cohorts


def test_cohort_of_one_equals_single_run():
    s = build(K=4)
    ds = simulate_cohort(s, 1, 42)
    p = run_extended_individual(s, substream(42, 1))
    assert len(ds.frame) == p.visits
    assert ds.frame["L1"].tolist() == [float(r.l[0]) for r in p.records]
    assert ds.frame["Y"].tolist() == [r.y for r in p.records]


def test_worker_count_does_not_change_output():
    s = build(K=4)
    one = simulate_cohort(s, 40, 5, workers=1).frame.to_csv(index=False)
    many = simulate_cohort(s, 40, 5, workers=8, chunk=3).frame.to_csv(index=False)
    assert one == many


def test_panel_invariants_and_csv_round_trip(tmp_path):
    s = build(K=4)
    ds = simulate_cohort(s, 50, 2)
    f = ds.frame
    assert sorted(f["id"].unique()) == list(range(1, 51))
    assert list(f.columns) == ds.columns()
    path = tmp_path / "d.csv"
    ds.to_csv(path)
    back = PanelDataset.from_csv(path, s.dims, s.K)
    assert back.frame.equals(f)


def test_counterfactual_zero_hazard():
    s = build(K=3, link="identity", intercepts=[0.0] * 4, terms=())
    f = simulate_counterfactual(s, [1, 0, 1, 0], 50, 1).frame
    assert (f["Y"] == 1).all()
    assert f.groupby("k")["A"].first().tolist() == [1, 0, 1, 0]


def test_counterfactual_regime_length_checked():
    with pytest.raises(DomainError):
        simulate_counterfactual(build(K=3), [1, 0], 10, 1)


def test_counterfactual_stratified_hazards_reduced():
    s = build(K=2, m=200)
    for a in (0.0, 1.0):
        ds = simulate_counterfactual(s, [a] * 3, 4000, 11)
        tab = empirical_hazard(ds, by="X1")
        g = 1 / (1 + np.exp(-(-2.5 + 0.5 * tab["X1"] - 1.0 * a)))
        assert np.all(np.abs(tab["hazard"] - g) < 3.5 * tab["se"])
