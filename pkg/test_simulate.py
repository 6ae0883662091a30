"""
multistop - Tests

Monte Carlo of threshold policies on Poisson samples and discrete sequences.

Key properties:
1. Sampling regions carry the Poisson mass of the intensity
2. Estimates are reproducible from the root seed, whatever the thread count
3. Simulated values agree with the exact DP values and the limit curves
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from functools import lru_cache
from pathlib import Path
import math

import numpy as np
import pytest
from scipy import stats

from multistop.core import NEG_INF, MarkedPointSet, ThresholdFamily, eval_curve
from multistop.dp_oracle import backward_thresholds, execute_index_rule, optimal_value
from multistop.models import (DiscreteModel, frechet_intensity, gumbel_intensity, load_model, make_base,
                              weibull_intensity)
from multistop.schema import ConfigError, DomainError, QuadSpec
from multistop.simulate import (PolicySpec, StudyRow, _region, convergence_study, estimate_value, limit_families,
                                make_rule, read_study_csv, sample_discrete, sample_poisson, stop_discrete,
                                stop_poisson, study_csv)

MODELS = Path(__file__).parent / "models"


def constant_thresholds(level: float) -> ThresholdFamily:
    """gamma^1(t, x) = max(level, x) on a coarse grid."""
    t_grid = np.array([0.0, 0.5, 1.0])
    x_grid = np.array([NEG_INF, 0.0, 10.0])
    gamma = np.full((1, 3, 3), np.nan)
    gamma[0, :-1] = np.maximum(level, np.where(np.isfinite(x_grid), x_grid, level))
    return ThresholdFamily(m=1, c=NEG_INF, t_grid=t_grid, x_grid=x_grid, gamma=gamma)


@lru_cache(maxsize=None)
def gumbel_limit(m):
    return limit_families(gumbel_intensity(), m)


def test_region_mass_and_marks():
    region = _region(gumbel_intensity(), 0.999, 0.0)
    # G(t, y) = e^{-y} above level 0 has unit mass per unit time
    assert region.mass == pytest.approx(0.999, abs=1e-9)
    counts, times, values = region.draw(20000, np.random.default_rng(7))
    assert abs(counts.mean() - region.mass) <= 4 * math.sqrt(region.mass / 20000)
    assert len(times) == counts.sum() == len(values)
    assert np.all((times >= 0) & (times <= 0.999))
    assert np.all(values > 0)
    assert abs(np.mean(values > 1.0) - math.exp(-1.0)) <= 0.02
    print("✓ Poisson region test passed")


def test_sample_poisson_reproducible():
    a = sample_poisson(gumbel_intensity(), 0.999, 0.0, seed=3)
    b = sample_poisson(gumbel_intensity(), 0.999, 0.0, seed=3)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)
    assert np.all(np.diff(a.times) >= 0)
    with pytest.raises(DomainError):
        sample_poisson(frechet_intensity(2.0), 0.9, 0.0)


def test_stop_poisson_first_exceedance():
    points = MarkedPointSet(times=[0.2, 0.5, 0.7], values=[5.0, 3.0, 8.0], time_cutoff=0.999, level_cutoff=0.0)
    result = stop_poisson(points, constant_thresholds(4.0), 1)
    assert result.stops == (0.2,)
    assert result.values == (5.0,)
    assert result.reward == 5.0
    assert result.forced == (False,) and not result.closed
    assert result.ordering_ok() and result.reward_ok()
    print("✓ stop_poisson example test passed")


def test_stop_poisson_empty_keeps_guarantee():
    empty = MarkedPointSet(times=[], values=[], time_cutoff=0.999, level_cutoff=0.0)
    result = stop_poisson(empty, constant_thresholds(4.0), 1, guarantee=1.5)
    assert result.stops == (1.0,)
    assert result.reward == 1.5
    assert result.forced == (True,)


def test_stop_poisson_closure():
    curves, thresholds = gumbel_limit(1)
    empty = MarkedPointSet(times=[], values=[], time_cutoff=0.999, level_cutoff=0.0)
    result = stop_poisson(empty, thresholds, 1, guarantee=0.0, curves=curves)
    # u^1(t, x) = ln(e^x + 1 - t)
    assert result.closed
    assert result.reward == pytest.approx(math.log1p(0.001), abs=1e-6)
    with pytest.raises(ConfigError):
        stop_poisson(empty, thresholds, 2)


def test_degenerate_base_has_zero_se():
    model = DiscreteModel(3, make_base({"family": "degenerate", "value": 2.0}), np.ones(3), np.zeros(3))
    table = backward_thresholds(model, 1)
    report = estimate_value(model, PolicySpec("dp", 1), 100, seed=1, table=table)
    assert report.mean == 2.0
    assert report.se == 0.0
    assert report.ci_lo == report.ci_hi == 2.0


def test_sample_discrete_distribution():
    model = load_model(MODELS / "uniform_neg.yaml").require_discrete().with_n(10000)
    x = sample_discrete(model, seed=11)
    assert x.shape == (10000,)
    assert stats.kstest(x, model.base.cdf).pvalue > 1e-3
    batch = sample_discrete(model.with_n(5), seed=11, size=4)
    assert batch.shape == (4, 5)
    assert np.array_equal(batch, sample_discrete(model.with_n(5), seed=11, size=4))


def test_stop_discrete_dp_policy():
    model = load_model(MODELS / "uniform01.yaml").require_discrete()
    table = backward_thresholds(model, 1)
    result = stop_discrete([0.9, 0.1, 0.1], PolicySpec("dp", 1), model, table=table)
    assert result.stops == (1,) and result.reward == 0.9
    with pytest.raises(ConfigError):
        stop_discrete([0.9, 0.1, 0.1], PolicySpec("dp", 1), model)
    with pytest.raises(ConfigError):
        stop_discrete([0.9, 0.1, 0.1], PolicySpec("limit", 1), model, table=table)


def test_estimate_independent_of_threads():
    model = load_model(MODELS / "uniform01.yaml").require_discrete()
    table = backward_thresholds(model, 1)
    policy = PolicySpec("dp", 1)
    serial = estimate_value(model, policy, 10000, seed=42, table=table, threads=1)
    threaded = estimate_value(model, policy, 10000, seed=42, table=table, threads=3)
    assert serial.mean == threaded.mean and serial.se == threaded.se
    other = estimate_value(model, policy, 10000, seed=43, table=table)
    assert other.mean != serial.mean
    print("✓ Thread independence test passed")


def test_dp_policy_matches_optimal_value():
    model = load_model(MODELS / "uniform01.yaml").require_discrete()
    table = backward_thresholds(model, 1)
    report = estimate_value(model, PolicySpec("dp", 1), 20000, seed=9, table=table)
    assert abs(report.mean - optimal_value(table)) <= 4 * report.se
    assert report.ci_lo < report.mean < report.ci_hi
    assert report.replications == 20000


def test_poisson_estimate_matches_limit_value():
    curves, thresholds = gumbel_limit(1)
    report = estimate_value(gumbel_intensity(), PolicySpec("limit", 1), 20000, seed=5, thresholds=thresholds,
                            curves=curves)
    # u^1(0) = ln(1 - 0) = 0
    assert abs(report.mean) <= 4 * report.se + 1e-3
    print("✓ Poisson limit value test passed")


def test_weibull_domain_rule_close_to_dp():
    model = load_model(MODELS / "uniform_neg.yaml").require_discrete()
    table = backward_thresholds(model, 1, quad=QuadSpec(nodes=16, grid_size=401))
    dp_scaled = model.scaled(optimal_value(table))
    _, thresholds = limit_families(model.limit_intensity(), 1)
    report = estimate_value(model, PolicySpec("domain", 1), 8000, seed=2, thresholds=thresholds)
    scaled = model.scaled(report.mean)
    assert abs(scaled - dp_scaled) <= 0.05 * abs(dp_scaled) + 4 * report.se / model.scale
    print("✓ Weibull domain rule test passed")


def test_convergence_study_rows():
    model = load_model(MODELS / "uniform_neg.yaml").require_discrete()
    rows = convergence_study(model, [20, 50], 1, policies=("dp", "limit"), replications=2000, seed=4,
                             quad=QuadSpec(nodes=16, grid_size=201))
    assert [(r.n, r.policy) for r in rows] == [(20, "dp_exact"), (20, "dp"), (20, "limit"),
                                               (50, "dp_exact"), (50, "dp"), (50, "limit")]
    for r in rows:
        assert r.limit == pytest.approx(-2.0, abs=1e-6)
        assert r.gap == pytest.approx(r.scaled_value - r.limit)
    exact, dp = rows[0], rows[1]
    assert abs(dp.scaled_value - exact.scaled_value) <= 4 * dp.se
    text = study_csv(rows, "seed=4")
    lines = text.splitlines()
    assert lines[0] == "# seed=4"
    assert lines[1] == ",".join(StudyRow.COLUMNS)
    assert len(lines) == 2 + len(rows)


def paired_deficit(model, m, table, thresholds, replications, seed):
    """Scaled dp-minus-domain reward on one shared batch of sequences: (mean, se)."""
    X = sample_discrete(model, seed=seed, size=replications)
    rewards = []
    for rule in (make_rule(model, PolicySpec("dp", m), table=table),
                 make_rule(model, PolicySpec("domain", m), thresholds=thresholds)):
        *_, reward = execute_index_rule(X, m, rule.exceeds)
        rewards.append(reward)
    diff = (rewards[0] - rewards[1]) / model.scale
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(replications))


def test_region_reaches_horizon():
    region = _region(gumbel_intensity(), 1.0, 0.0)
    assert region.mass == pytest.approx(1.0, abs=1e-6)
    points = sample_poisson(gumbel_intensity(), 1.0, 0.0, seed=8)
    assert np.all(np.isfinite(points.values)) and np.all(points.times <= 1.0)
    with pytest.raises(DomainError):
        _region(gumbel_intensity(), 1.5, 0.0)
    # the level y = 1 meets the support boundary y = sqrt(t) only at t = 1
    shifted = frechet_intensity(2.0, d=1.0)
    assert _region(shifted, 0.999, 1.0).mass > 0
    with pytest.raises(DomainError):
        _region(shifted, 1.0, 1.0)


def test_poisson_counts_on_rectangles():
    region = _region(gumbel_intensity(), 0.999, 0.0)
    reps = 20000
    counts, times, values = region.draw(reps, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    inside = 0
    checked = 0
    while checked < 1000:
        t0, t1 = np.sort(rng.uniform(0.0, 0.999, 2))
        y0, y1 = np.sort(rng.uniform(0.0, 3.0, 2))
        # G(t, y) = e^{-y}
        expected = reps * (t1 - t0) * (math.exp(-y0) - math.exp(-y1))
        if expected < 100:
            continue
        hits = np.count_nonzero((times >= t0) & (times < t1) & (values > y0) & (values <= y1))
        inside += abs(hits - expected) <= 3 * math.sqrt(expected)
        checked += 1
    assert inside / checked >= 0.98
    print("✓ Poisson rectangle count test passed")


POISSON_LIMITS = [
    (gumbel_intensity(), 1),
    (gumbel_intensity(), 2),
    (weibull_intensity(1.0), 1),
    (weibull_intensity(1.0), 2),
    (frechet_intensity(3.0), 1),
    (frechet_intensity(3.0), 2),
]


@pytest.mark.parametrize("intensity, m", POISSON_LIMITS)
def test_poisson_value_matches_curve(intensity, m):
    curves, thresholds = limit_families(intensity, m)
    report = estimate_value(intensity, PolicySpec("limit", m), 20000, seed=13, thresholds=thresholds,
                            curves=curves)
    x = curves.c if math.isfinite(curves.c) else NEG_INF
    target = eval_curve(curves, m, 0.0, x)
    assert abs(report.mean - target) <= 4 * report.se + 5e-3, (intensity.name, m, report.mean, target)


def test_gumbel_domain_rule_close_to_dp():
    model = load_model(MODELS / "exponential_gumbel.yaml").require_discrete()
    table = backward_thresholds(model, 2, quad=QuadSpec(nodes=16, grid_size=401))
    _, thresholds = limit_families(model.limit_intensity(), 2)
    mean, se = paired_deficit(model, 2, table, thresholds, 4000, seed=17)
    assert -4 * se - 1e-3 <= mean <= 0.1 + 4 * se
    report = estimate_value(model, PolicySpec("domain", 2), 4000, seed=17, thresholds=thresholds)
    assert abs(model.scaled(report.mean) - model.scaled(optimal_value(table))) <= 0.1 + 4 * report.se
    print("✓ Gumbel domain rule test passed")


def test_weibull_domain_deficit_shrinks():
    model = load_model(MODELS / "uniform_neg.yaml").require_discrete()
    _, thresholds = limit_families(model.limit_intensity(), 1)
    deficits = []
    for n in (100, 1000):
        mod = model.with_n(n)
        table = backward_thresholds(mod, 1, quad=QuadSpec(nodes=16, grid_size=401))
        deficits.append(paired_deficit(mod, 1, table, thresholds, 4000, seed=19))
    (d100, se100), (d1000, se1000) = deficits
    assert d1000 >= -4 * se1000 - 1e-3
    assert d1000 <= d100 + 3 * math.hypot(se100, se1000)


def test_study_csv_reads_back():
    rows = [StudyRow(20, 1, "dp_exact", -0.09, -1.8, -2.0, 0.2, 0.0, -1.8, -1.8),
            StudyRow(20, 1, "domain", -0.0912, -1.824, -2.0, 0.176, 0.0123, -1.85, -1.80)]
    header, back = read_study_csv(study_csv(rows, "config_hash=abc seed=4"))
    assert header == "config_hash=abc seed=4"
    assert back == rows
    with pytest.raises(ConfigError):
        read_study_csv("n,m,policy\n20,1,dp\n")


def test_policy_validation():
    with pytest.raises(ConfigError):
        PolicySpec("bogus", 1)
    with pytest.raises(ConfigError):
        PolicySpec("dp", 0)
    with pytest.raises(ConfigError):
        PolicySpec("limit", 1, delta=1.5)
    model = load_model(MODELS / "uniform01.yaml").require_discrete()
    with pytest.raises(ConfigError):
        estimate_value(model, PolicySpec("dp", 1), 1, table=backward_thresholds(model, 1))


def run_all_tests():
    """Run all tests."""
    print("Running multistop simulation tests...\n")

    test_region_mass_and_marks()
    test_sample_poisson_reproducible()
    test_stop_poisson_first_exceedance()
    test_stop_poisson_empty_keeps_guarantee()
    test_stop_poisson_closure()
    test_degenerate_base_has_zero_se()
    test_sample_discrete_distribution()
    test_stop_discrete_dp_policy()
    test_estimate_independent_of_threads()
    test_dp_policy_matches_optimal_value()
    test_poisson_estimate_matches_limit_value()
    test_weibull_domain_rule_close_to_dp()
    test_convergence_study_rows()
    test_region_reaches_horizon()
    test_poisson_counts_on_rectangles()
    for intensity, m in POISSON_LIMITS:
        test_poisson_value_matches_curve(intensity, m)
    print("✓ Poisson limit consistency test passed")
    test_gumbel_domain_rule_close_to_dp()
    test_weibull_domain_deficit_shrinks()
    test_study_csv_reads_back()
    test_policy_validation()

    print("\n✅ All tests passed!")


if __name__ == "__main__":
    run_all_tests()
