"""
multistop - Tests

Core table types: interpolation, grids, domain checks, serialization.

Key properties:
1. Interpolation is exact at grid nodes and monotone in between
2. The -inf node carries the guarantee-free curve
3. Curve families survive a JSON round trip bit for bit
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import json
import math

import numpy as np
import pytest

from multistop.core import (NEG_INF, StoppingCurveFamily, ThresholdFamily, MultiStopResult, MarkedPointSet,
                            eval_curve, interp_guarantee, refined_time_grid, check_guarantee)
from multistop.schema import ConfigError, DomainError, RunConfig, RunRecord, Event, hash_content


def small_family() -> StoppingCurveFamily:
    """u^1(t, x) = x + 1 - t on finite x, -t at the -inf node."""
    t_grid = np.array([0.0, 0.5, 1.0])
    x_grid = np.array([NEG_INF, 0.0, 1.0])
    levels = np.zeros((2, 3, 3))
    levels[0] = x_grid
    for k, t in enumerate(t_grid):
        levels[1, k] = [-t, 1.0 - t, 2.0 - t]
    levels[1, -1] = x_grid
    return StoppingCurveFamily(m=1, c=NEG_INF, t_grid=t_grid, x_grid=x_grid, levels=levels)


def test_eval_curve_nodes_and_between():
    fam = small_family()
    assert eval_curve(fam, 1, 0.5, 0.0) == 0.5
    assert eval_curve(fam, 1, 0.25, 0.0) == pytest.approx(0.75)
    assert eval_curve(fam, 1, 0.0, 0.5) == pytest.approx(1.5)
    assert eval_curve(fam, 1, 0.0, NEG_INF) == 0.0
    assert eval_curve(fam, 1, 0.25, NEG_INF) == pytest.approx(-0.25)
    assert eval_curve(fam, 0, 0.3, 0.7) == 0.7
    assert eval_curve(fam, 1, 1.0, 0.4) == 0.4
    print("✓ eval_curve test passed")


def test_eval_curve_domain_errors():
    fam = small_family()
    with pytest.raises(DomainError):
        eval_curve(fam, 1, 1.5, 0.0)
    with pytest.raises(DomainError):
        eval_curve(fam, 2, 0.5, 0.0)
    with pytest.raises(DomainError):
        eval_curve(fam, 1, 0.5, float("nan"))
    with pytest.raises(DomainError):
        check_guarantee(NEG_INF, 0.0)
    print("✓ Domain error test passed")


def test_interp_guarantee_gap_below_first_node():
    x_grid = np.array([NEG_INF, 0.0, 1.0])
    row = np.array([-0.5, 0.2, 1.1])
    # between the free value and the first finite node the curve is max(free, x) capped at row[1]
    assert interp_guarantee(x_grid, row, -2.0) == -0.5
    assert interp_guarantee(x_grid, row, -0.1) == pytest.approx(-0.1)
    assert interp_guarantee(x_grid, row, 5.0) == 5.0
    assert interp_guarantee(x_grid, row, NEG_INF) == -0.5
    out = interp_guarantee(x_grid, row, np.array([[0.0, 0.5], [1.0, 2.0]]))
    assert out.shape == (2, 2)
    print("✓ interp_guarantee test passed")


def test_refined_time_grid():
    grid = refined_time_grid(101, 30, 1e-6)
    assert grid[0] == 0.0 and grid[-1] == 1.0
    assert np.all(np.diff(grid) > 0)
    assert 1.0 - grid[-2] == pytest.approx(1e-6, rel=1e-6)
    print("✓ Time grid test passed")


def test_family_validation():
    fam = small_family()
    with pytest.raises(ConfigError):
        StoppingCurveFamily(m=1, c=NEG_INF, t_grid=fam.t_grid[::-1], x_grid=fam.x_grid, levels=fam.levels)
    with pytest.raises(ConfigError):
        StoppingCurveFamily(m=2, c=NEG_INF, t_grid=fam.t_grid, x_grid=fam.x_grid, levels=fam.levels)
    with pytest.raises(ValueError):
        fam.levels[1, 0, 0] = 3.0
    print("✓ Family validation test passed")


def test_family_json_roundtrip():
    fam = small_family()
    back = StoppingCurveFamily.from_json(fam.to_json())
    assert back.m == fam.m and back.c == fam.c
    assert np.array_equal(back.levels, fam.levels)
    assert np.array_equal(back.x_grid, fam.x_grid)
    assert fam.to_csv("config_hash=x").startswith("# config_hash=x\nlevel,t,x,u\n")
    with pytest.raises(ConfigError):
        StoppingCurveFamily.from_dict({"schema": "other"})
    print("✓ Family JSON roundtrip test passed")


def test_threshold_family_dict_roundtrip():
    fam = small_family()
    gamma = np.full((1, 3, 3), np.nan)
    gamma[0, :-1] = np.maximum(fam.levels[1, :-1], fam.x_grid)
    th = ThresholdFamily(m=1, c=NEG_INF, t_grid=fam.t_grid, x_grid=fam.x_grid, gamma=gamma, model_hash="abc")
    doc = json.loads(json.dumps(th.to_dict()))
    assert doc["gamma"][0][-1] == [None, None, None]
    back = ThresholdFamily.from_dict(doc)
    assert np.array_equal(back.gamma, th.gamma, equal_nan=True)
    assert back.model_hash == "abc" and back.inverses == ()
    assert back.values(1, 0.25, 0.5) == th.values(1, 0.25, 0.5)
    with pytest.raises(ConfigError):
        ThresholdFamily.from_dict({**doc, "schema": "multistop.curves/1"})
    with pytest.raises(ConfigError):
        ThresholdFamily.from_dict({**doc, "m": 2})


def test_result_ordering():
    ok = MultiStopResult(stops=(2, 5, 7), values=(1.0, 3.0, 2.0), reward=3.0, forced=(False, False, True),
                         horizon=7)
    assert ok.ordering_ok() and ok.reward_ok()
    frozen = MultiStopResult(stops=(0.3, 1.0, 1.0), values=(1.0, -1.0, -1.0), reward=1.0,
                             forced=(False, True, True), guarantee=-1.0)
    assert frozen.ordering_ok() and frozen.reward_ok()
    bad = MultiStopResult(stops=(5, 2), values=(1.0, 2.0), reward=2.0, forced=(False, False), horizon=7)
    assert not bad.ordering_ok()
    wrong = MultiStopResult(stops=(1, 2), values=(1.0, 2.0), reward=1.5, forced=(False, False), horizon=2)
    assert not wrong.reward_ok()
    print("✓ Result ordering test passed")


def test_marked_point_set_sorts_and_checks():
    pts = MarkedPointSet(times=[0.7, 0.2, 0.5], values=[8.0, 5.0, 3.0], time_cutoff=0.999, level_cutoff=0.0)
    assert list(pts.times) == [0.2, 0.5, 0.7]
    assert list(pts.values) == [5.0, 3.0, 8.0]
    assert len(pts) == 3
    with pytest.raises(DomainError):
        MarkedPointSet(times=[0.2], values=[-1.0], time_cutoff=0.999, level_cutoff=0.0)
    with pytest.raises(DomainError):
        MarkedPointSet(times=[1.0], values=[1.0], time_cutoff=0.999, level_cutoff=0.0)
    print("✓ Marked point set test passed")


def test_run_record_roundtrip():
    config = RunConfig(subcommand="check", options={"m": 2})
    record = RunRecord(run_id="abc", config=config, config_hash=config.config_hash(), seed=0)
    record.append(Event("artifact", "2026-01-01T00:00:00", {"path": "out/a.csv", "hash": hash_content("x")}))
    back = RunRecord.from_dict(record.to_dict())
    assert back.config_hash == record.config_hash
    assert back.artifacts == {"out/a.csv": hash_content("x")}
    assert RunConfig(subcommand="check", options={"m": 2}, threads=8, out="elsewhere").config_hash() \
        == config.config_hash()
    assert RunConfig(subcommand="check", options={"m": 3}).config_hash() != config.config_hash()
    assert hash_content("x").startswith("sha256:") and len(hash_content("x")) == 7 + 16
    print("✓ Run record roundtrip test passed")


def test_public_api_resolves():
    import multistop
    from multistop import core

    for name in multistop.__all__:
        assert getattr(multistop, name) is not None, name
    assert callable(core.eval_curve) and callable(core.refined_time_grid)
    assert not hasattr(core, "level_vector")


def run_all_tests():
    """Run all tests."""
    print("Running multistop core tests...\n")

    test_eval_curve_nodes_and_between()
    test_eval_curve_domain_errors()
    test_interp_guarantee_gap_below_first_node()
    test_refined_time_grid()
    test_family_validation()
    test_family_json_roundtrip()
    test_threshold_family_dict_roundtrip()
    test_result_ordering()
    test_marked_point_set_sorts_and_checks()
    test_run_record_roundtrip()
    test_public_api_resolves()

    print("\n✅ All tests passed!")


if __name__ == "__main__":
    run_all_tests()
