"""
multistop - Tests

Backward ODE engine for the stopping curves of the Poisson limit.

Key properties:
1. The homogeneous reference models are reproduced on [0, 0.99]
2. u^j(1, x) = x and the curves are monotone in t and x
3. The engine agrees with the closed-form classes
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from functools import lru_cache
import math
import warnings

import numpy as np
import pytest
from scipy import integrate

from multistop.closed_form import build_from_tag, eval_u
from multistop.core import NEG_INF, ClassTag, StoppingCurveFamily, eval_curve, eval_threshold
from multistop.models import (ClassIntensity, LogRootV, ShiftedFrechetIntensity, TableH, frechet_intensity,
                              gumbel_intensity, weibull_intensity)
from multistop.ode_solver import invert_level, solve_curve_family, thresholds_from_family
from multistop.schema import ConfigError, SolveSpec


R2_GUMBEL = -math.log1p(-math.exp(-1.0))


def nodes_up_to(fam, t_max):
    """Time nodes of the family in [0, t_max]."""
    return fam.t_grid[fam.t_grid <= t_max]


@lru_cache(maxsize=None)
def gumbel_family():
    return solve_curve_family(gumbel_intensity(), 2)


@lru_cache(maxsize=None)
def frechet_family():
    return solve_curve_family(frechet_intensity(2.0), 1)


@lru_cache(maxsize=None)
def weibull_family():
    return solve_curve_family(weibull_intensity(1.0), 2)


def test_gumbel_reference_curves():
    fam = gumbel_family()
    ts = nodes_up_to(fam, 0.99)
    u1 = np.array([eval_curve(fam, 1, t, NEG_INF) for t in ts])
    u2 = np.array([eval_curve(fam, 2, t, NEG_INF) for t in ts])
    assert np.max(np.abs(u1 - np.log1p(-ts))) <= 1e-5
    assert np.max(np.abs(u2 - (np.log1p(-ts) + R2_GUMBEL))) <= 1e-4
    print("✓ Gumbel reference test passed")


def test_gumbel_with_guarantee():
    fam = gumbel_family()
    # u^1(t, x) = ln(e^x + 1 - t)
    for t in (0.0, 0.5, 0.9):
        for x in (-3.0, 0.0, 2.5):
            assert eval_curve(fam, 1, t, x) == pytest.approx(math.log(math.exp(x) + 1 - t), abs=1e-5)


def test_frechet_reference_curve():
    fam = frechet_family()
    ts = nodes_up_to(fam, 0.99)
    u1 = np.array([eval_curve(fam, 1, t, 0.0) for t in ts])
    assert np.max(np.abs(u1 - np.sqrt(2 * (1 - ts)))) <= 1e-5
    assert fam.c == 0.0
    print("✓ Frechet reference test passed")


def test_boundary_and_invariants():
    fam = gumbel_family()
    fin = np.isfinite(fam.x_grid)
    for j in range(fam.m + 1):
        assert np.array_equal(fam.levels[j, -1, fin], fam.x_grid[fin])
    assert eval_curve(fam, 2, 1.0, 0.3) == 0.3
    assert fam.check_invariants() == []
    assert fam.metadata["engine"] == "ode"
    assert fam.metadata["assumes_uniqueness_condition"]
    assert len(fam.metadata["error_estimate"]) == 2


def test_first_threshold_is_first_curve():
    fam = gumbel_family()
    th = thresholds_from_family(fam)
    expected = np.maximum(fam.levels[1, :-1], fam.x_grid)
    assert np.array_equal(th.gamma[0, :-1], expected)
    assert np.all(np.isnan(th.gamma[:, -1]))
    for t in (0.1, 0.6):
        for x in (-1.0, 0.5):
            assert eval_threshold(th, 2, t, x) >= x
    print("✓ Threshold family test passed")


def test_threshold_equivalence_on_nodes():
    """y > gamma^2(t, x) exactly when u^1(t, y) > u^2(t, x)."""
    fam = gumbel_family()
    th = thresholds_from_family(fam)
    k = 50
    t = float(fam.t_grid[k])
    for x in (-2.0, 0.0, 1.0):
        g = eval_threshold(th, 2, t, x)
        u2 = eval_curve(fam, 2, t, x)
        assert eval_curve(fam, 1, t, g + 1e-3) > u2
        assert eval_curve(fam, 1, t, g - 1e-3) < u2


def test_inverse_round_trip():
    fam = gumbel_family()
    inv = invert_level(fam, 1)
    sel = np.flatnonzero((fam.x_grid >= -5.0) & (fam.x_grid <= 10.0))
    for k in (0, 40, 200):
        t = float(fam.t_grid[k])
        back, flag = inv.eval(np.full(sel.size, t), fam.levels[1, k, sel])
        assert np.allclose(back, fam.x_grid[sel], atol=1e-9)
        assert not flag.any()
    # the guarantee-free value maps back to the lower boundary
    free, _ = inv.eval(0.0, fam.levels[1, 0, 0])
    assert np.isneginf(free)
    assert inv.flat_segments == 0


def test_engine_agrees_with_closed_form():
    checks = [(gumbel_family(), gumbel_intensity(), (NEG_INF, -1.0, 0.0, 2.0)),
              (frechet_family(), frechet_intensity(2.0), (0.0, 0.5, 3.0)),
              (weibull_family(), weibull_intensity(1.0), (NEG_INF, -5.0, -1.0, -0.1))]
    for fam, intensity, xs in checks:
        ts = nodes_up_to(fam, 0.95)[::5]
        sol = build_from_tag(intensity.closed_form, fam.m)
        for j in range(1, fam.m + 1):
            gap = max(abs(eval_curve(fam, j, t, x) - eval_u(sol, j, t, x)) for t in ts for x in xs)
            assert gap <= 1e-3, (intensity.name, j, gap)
    print("✓ Engine agreement test passed")


def test_off_node_reference_curves():
    rng = np.random.default_rng(11)
    ts = rng.uniform(0.0, 0.99, 400)
    g, f = gumbel_family(), frechet_family()
    u1 = np.array([eval_curve(g, 1, t, NEG_INF) for t in ts])
    u2 = np.array([eval_curve(g, 2, t, NEG_INF) for t in ts])
    assert np.max(np.abs(u1 - np.log1p(-ts))) <= 1e-5
    assert np.max(np.abs(u2 - (np.log1p(-ts) + R2_GUMBEL))) <= 1e-4
    v1 = np.array([eval_curve(f, 1, t, 0.0) for t in ts])
    assert np.max(np.abs(v1 - np.sqrt(2 * (1 - ts)))) <= 1e-5
    print("✓ Off-node reference test passed")


@pytest.mark.parametrize("intensity, xs", [
    (gumbel_intensity(), (NEG_INF, -1.0, 0.0, 2.0)),
    (frechet_intensity(2.0), (0.0, 0.5, 3.0)),
    (weibull_intensity(1.0), (NEG_INF, -5.0, -1.0, -0.1)),
])
def test_three_levels_agree_with_closed_form(intensity, xs):
    fam = solve_curve_family(intensity, 3)
    sol = build_from_tag(intensity.closed_form, 3)
    ts = np.random.default_rng(3).uniform(0.0, 0.95, 60)
    for j in range(1, 4):
        gap = max(abs(eval_curve(fam, j, t, x) - eval_u(sol, j, t, x)) for t in ts for x in xs)
        assert gap <= 1e-3, (intensity.name, j, gap)


def test_weibull_three_levels_guarantee_free():
    fam = solve_curve_family(weibull_intensity(1.0), 3)
    assert fam.check_invariants() == []
    for j, r in enumerate((-2.0, -1.1656, -1.0398), start=1):
        assert eval_curve(fam, j, 0.0, NEG_INF) == pytest.approx(r, abs=1e-3)


def test_shifted_frechet_two_levels():
    model = frechet_intensity(2.0, d=0.5)
    assert isinstance(model, ShiftedFrechetIntensity)
    assert model.closed_form is None
    fam = solve_curve_family(model, 2)
    assert fam.check_invariants() == []
    for t in (0.0, 0.3, 0.7, 0.95):
        u1, u2 = eval_curve(fam, 1, t, 0.0), eval_curve(fam, 2, t, 0.0)
        assert u2 >= u1
        assert u1 >= float(model.boundary(t))
    assert eval_curve(fam, 1, 0.0, 0.0) > 0.0


def test_discontinuous_intensity_refused():
    # H drops from 1 to 0 at x = 1
    model = ClassIntensity(ClassTag(3, TableH([0.0, 1.0], [2.0, 1.0]), LogRootV(1.0)))
    assert any("jumps" in p for p in model.validate())
    with pytest.raises(ConfigError):
        solve_curve_family(model, 1)
    smooth = ClassIntensity(ClassTag(3, TableH([0.0, 1.0], [1.0, 0.0]), LogRootV(1.0)))
    assert not any("jumps" in p for p in smooth.validate())


def test_monotonicity_random_pairs():
    fam = gumbel_family()
    rng = np.random.default_rng(5)
    for j in (1, 2):
        t = np.sort(rng.uniform(0.0, 0.99, (1000, 2)), axis=1)
        x = rng.uniform(-5.0, 5.0, 1000)
        early = fam.values(j, t[:, 0], x)
        late = fam.values(j, t[:, 1], x)
        assert np.all(early >= late - 1e-6)
        xx = np.sort(rng.uniform(-5.0, 5.0, (1000, 2)), axis=1)
        tt = rng.uniform(0.0, 0.99, 1000)
        assert np.all(fam.values(j, tt, xx[:, 0]) <= fam.values(j, tt, xx[:, 1]) + 1e-6)
    print("✓ Monotonicity property test passed")


def test_threshold_equivalence_random():
    fam = gumbel_family()
    th = thresholds_from_family(fam)
    rng = np.random.default_rng(9)
    t_idx = np.flatnonzero(fam.t_grid <= 0.99)
    x_idx = np.flatnonzero((fam.x_grid >= -5.0) & (fam.x_grid <= 5.0))
    checked = 0
    while checked < 1000:
        t = float(fam.t_grid[rng.choice(t_idx)])
        x = float(fam.x_grid[rng.choice(x_idx)])
        g = eval_threshold(th, 2, t, x)
        y = g + rng.uniform(-2.0, 2.0)
        if abs(y - g) < 1e-4:
            continue
        assert (y > g) == (eval_curve(fam, 1, t, y) > eval_curve(fam, 2, t, x)), (t, x, y, g)
        checked += 1


def test_slopes_survive_json():
    fam = gumbel_family()
    assert fam.slopes is not None
    back = StoppingCurveFamily.from_json(fam.to_json())
    assert np.array_equal(back.slopes, fam.slopes, equal_nan=True)
    for t in (0.123, 0.777):
        assert eval_curve(back, 2, t, 0.4) == eval_curve(fam, 2, t, 0.4)


def test_solve_is_warning_free():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fam = solve_curve_family(frechet_intensity(2.0), 1)
    noisy = [w for w in caught
             if issubclass(w.category, integrate.IntegrationWarning) or "log1p" in str(w.message)]
    assert noisy == [], [str(w.message) for w in noisy]
    assert np.all(np.isfinite(fam.levels[1]))


def test_bad_inputs():
    with pytest.raises(ConfigError):
        solve_curve_family(gumbel_intensity(), 0)
    with pytest.raises(ConfigError):
        solve_curve_family(gumbel_intensity(), 1, SolveSpec(x_grid=(0.0, -1.0, 2.0)))
    with pytest.raises(ConfigError):
        SolveSpec(epsilon=0.7)


def run_all_tests():
    """Run all tests."""
    print("Running multistop ODE tests...\n")

    test_gumbel_reference_curves()
    test_gumbel_with_guarantee()
    test_frechet_reference_curve()
    test_boundary_and_invariants()
    test_first_threshold_is_first_curve()
    test_threshold_equivalence_on_nodes()
    test_inverse_round_trip()
    test_engine_agrees_with_closed_form()
    test_off_node_reference_curves()
    for intensity, xs in [(gumbel_intensity(), (NEG_INF, -1.0, 0.0, 2.0)),
                          (frechet_intensity(2.0), (0.0, 0.5, 3.0)),
                          (weibull_intensity(1.0), (NEG_INF, -5.0, -1.0, -0.1))]:
        test_three_levels_agree_with_closed_form(intensity, xs)
    test_weibull_three_levels_guarantee_free()
    test_shifted_frechet_two_levels()
    test_discontinuous_intensity_refused()
    test_monotonicity_random_pairs()
    test_threshold_equivalence_random()
    test_slopes_survive_json()
    test_solve_is_warning_free()
    test_bad_inputs()

    print("\n✅ All tests passed!")


if __name__ == "__main__":
    run_all_tests()
