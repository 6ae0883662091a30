"""
multistop - Tests

Closed-form classes: roots r_j, the transforms Phi^j and phi^j, and the
curves built from them.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import math

import numpy as np
import pytest
from scipy import optimize

from multistop.closed_form import build_case, build_from_tag, eval_gamma, eval_u
from multistop.core import NEG_INF
from multistop.models import frechet_intensity, gumbel_intensity, make_H, make_v, weibull_intensity
from multistop.schema import DomainError

R2_GUMBEL = -math.log1p(-math.exp(-1.0))


def truncated_linear(m):
    return build_case(2, make_H({"family": "negative_power", "k": 1.0, "alpha": 1.0}),
                      make_v({"family": "root", "p": 1.0, "q": -1.0}), m)


def test_case1_first_root_and_transform():
    sol = build_from_tag(frechet_intensity(2.0).closed_form, 1)
    assert abs(sol.roots[0] - math.sqrt(2.0)) <= 1e-9
    xs = np.linspace(1.5, 50.0, 200)
    assert np.max(np.abs(sol.Phi(1, xs) - np.sqrt(xs ** 2 - 2.0))) <= 1e-7
    ys = np.linspace(0.0, 10.0, 50)
    assert np.max(np.abs(sol.phi(1, ys) - np.sqrt(ys ** 2 + 2.0))) <= 1e-7
    print("✓ Case 1 root test passed")


def test_case2_roots():
    sol = truncated_linear(2)
    assert abs(sol.roots[0] - (-2.0)) <= 1e-9
    # r_2 solves 3x + 4 ln(2 / (2 + x)) = 0 on (-2, 0)
    r2 = optimize.brentq(lambda x: 3 * x + 4 * math.log(2 / (2 + x)), -1.999, -2.0 / 3.0, xtol=1e-14)
    assert abs(sol.roots[1] - r2) <= 1e-8
    assert sol.roots[0] < sol.roots[1] < 0.0
    print("✓ Case 2 roots test passed")


def test_case3_roots():
    sol = build_from_tag(gumbel_intensity().closed_form, 2)
    assert abs(sol.roots[0]) <= 1e-9
    assert abs(sol.roots[1] - R2_GUMBEL) <= 1e-9
    assert sol.roots[1] == pytest.approx(0.4587, abs=1e-4)
    print("✓ Case 3 roots test passed")


def test_case1_second_root_analytic():
    # Phi^1(x) = sqrt(x^2 - 2), so R^2(x) = x - ln((x + sqrt 2) / (x - sqrt 2)) / sqrt 2
    s2 = math.sqrt(2.0)
    R2 = lambda x: x - math.log((x + s2) / (x - s2)) / s2
    r2 = optimize.brentq(R2, 1.5, 3.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    sol = build_from_tag(frechet_intensity(2.0).closed_form, 2)
    assert abs(sol.roots[1] - r2) <= 1e-10
    assert abs(R2(sol.roots[1])) <= 1e-10
    assert max(sol.diagnostics()["residuals"]) <= 1e-10
    print("✓ Case 1 second root test passed")


def test_weibull_three_roots():
    roots = build_from_tag(weibull_intensity(1.0).closed_form, 3).roots
    assert roots == pytest.approx([-2.0, -1.1656, -1.0398], abs=1e-4)


def test_roots_increase_with_level():
    for tag in (frechet_intensity(2.0).closed_form, gumbel_intensity().closed_form,
                weibull_intensity(1.0).closed_form):
        roots = build_from_tag(tag, 3).roots
        assert all(a < b for a, b in zip(roots, roots[1:]))


def test_phi_inverts_Phi():
    sol = build_from_tag(gumbel_intensity().closed_form, 2)
    xs = np.linspace(R2_GUMBEL + 0.5, 20.0, 40)
    assert np.max(np.abs(sol.phi(2, sol.Phi(2, xs)) - xs)) <= 1e-7


def test_gumbel_curves():
    sol = build_from_tag(gumbel_intensity().closed_form, 2)
    for t in (0.0, 0.3, 0.9, 0.99):
        assert eval_u(sol, 1, t, NEG_INF) == pytest.approx(math.log1p(-t), abs=1e-9)
        assert eval_u(sol, 2, t, NEG_INF) == pytest.approx(math.log1p(-t) + R2_GUMBEL, abs=1e-8)
    # gamma^1 = u^1 and thresholds never sit below the guarantee
    assert eval_gamma(sol, 1, 0.4, 0.2) == pytest.approx(eval_u(sol, 1, 0.4, 0.2))
    assert eval_gamma(sol, 2, 0.4, 3.0) >= 3.0
    assert eval_u(sol, 2, 1.0, 0.7) == 0.7
    print("✓ Gumbel curves test passed")


def test_frechet_curve_with_guarantee():
    sol = build_from_tag(frechet_intensity(2.0).closed_form, 1)
    for t in (0.0, 0.5, 0.9):
        for x in (0.0, 0.5, 3.0):
            assert eval_u(sol, 1, t, x) == pytest.approx(math.sqrt(x * x + 2 * (1 - t)), abs=1e-7)


def test_threshold_equivalence():
    """y > gamma^2(t, x) exactly when u^1(t, y) > u^2(t, x)."""
    sol = build_from_tag(gumbel_intensity().closed_form, 2)
    t, x = 0.3, 0.1
    g = eval_gamma(sol, 2, t, x)
    u2 = eval_u(sol, 2, t, x)
    assert eval_u(sol, 1, t, g + 1e-6) > u2
    assert eval_u(sol, 1, t, g - 1e-6) < u2


def test_domain_errors():
    sol = build_from_tag(gumbel_intensity().closed_form, 1)
    with pytest.raises(DomainError):
        eval_u(sol, 2, 0.5, 0.0)
    with pytest.raises(DomainError):
        eval_gamma(sol, 1, 1.0, 0.0)
    with pytest.raises(DomainError):
        build_case(4, None, None, 1)


def run_all_tests():
    """Run all tests."""
    print("Running multistop closed-form tests...\n")

    test_case1_first_root_and_transform()
    test_case2_roots()
    test_case3_roots()
    test_case1_second_root_analytic()
    test_weibull_three_roots()
    test_roots_increase_with_level()
    test_phi_inverts_Phi()
    test_gumbel_curves()
    test_frechet_curve_with_guarantee()
    test_threshold_equivalence()
    test_domain_errors()

    print("\n✅ All tests passed!")


if __name__ == "__main__":
    run_all_tests()
