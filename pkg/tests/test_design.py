import math

import numpy as np
import pytest

from seqmh.design import (
    DEFAULT_GRID,
    DesignGrid,
    DesignResult,
    MomentSample,
    average_design,
    evaluate_average,
    fixed_batch_design,
    read_result,
    read_samples,
    synthetic_moment_samples,
    worst_case_design,
    worst_case_point,
    write_result,
    write_samples,
)
from seqmh.errors import InfeasibleDesign, InvalidArgument
from seqmh.rwalk import StageDesign, bound_from_epsilon, delta_acceptance

SMALL = DesignGrid((0.05, 0.1), (0.01, 0.1, 0.5), (0.5, 1.0))


@pytest.fixture(scope="module")
def samples():
    return synthetic_moment_samples(40, 0)


def test_moment_sample_validation():
    with pytest.raises(InvalidArgument):
        MomentSample(0.0, 0.0, 100)
    with pytest.raises(InvalidArgument):
        MomentSample(0.0, 1.0, 1)


def test_grid_defaults():
    assert len(DEFAULT_GRID) == 5 * 9 * 4
    assert len(list(DEFAULT_GRID.points())) == 180
    with pytest.raises(InvalidArgument):
        DesignGrid((0.1,), (0.7,), (0.5,))


def test_unconstrained_budget_returns_cheapest(samples):
    res = average_design(samples, 0.5, SMALL)
    usages = {}
    for pi1, G0, alpha in SMALL.points():
        usages[(pi1, G0, alpha)] = evaluate_average(samples, StageDesign.uniform(pi1, G0=G0, alpha=alpha))[1]
    assert res.predicted_usage == pytest.approx(min(usages.values()), abs=1e-12)
    assert res.grid_evaluations == len(SMALL)


def test_zero_budget_infeasible_without_exact_point(samples):
    with pytest.raises(InfeasibleDesign) as info:
        average_design(samples, 0.0, SMALL)
    assert info.value.min_error > 0
    exact_grid = DesignGrid((0.1, 1.0), (0.1,), (0.5,))
    res = average_design(samples, 0.0, exact_grid)
    assert res.pi1 == 1.0 and res.predicted_error == 0.0 and res.predicted_usage == 1.0


def test_far_from_threshold_picks_smallest_pi1():
    N = 10000
    # mu_std(u) >= 20 for every u: the first stage decides almost surely
    samples = [MomentSample(20.0 * s / math.sqrt(N - 1), s, N) for s in [0.01, 0.02, 0.05]]
    res = average_design(samples, 0.001, SMALL)
    assert res.pi1 == 0.05
    assert res.predicted_error <= 0.001


def test_average_design_is_feasible_and_optimal(samples):
    budget = 0.05
    res = average_design(samples, budget, SMALL)
    assert res.predicted_error <= budget
    for pi1, G0, alpha in SMALL.points():
        err, use = evaluate_average(samples, StageDesign.uniform(pi1, G0=G0, alpha=alpha))
        if err <= budget:
            assert use >= res.predicted_usage - 1e-12


def test_feasible_at_double_resolution(samples):
    res = average_design(samples, 0.05, SMALL)
    err, _ = res.evaluate(samples, grid_size=128)
    assert err <= 0.05


def test_average_error_matches_adaptive_quadrature(samples):
    d = StageDesign.uniform(0.05, 0.1)
    err, use = evaluate_average(samples[:8], d)
    direct = [delta_acceptance(s.mu, s.sigma_l, s.N, d) for s in samples[:8]]
    assert err == pytest.approx(np.mean([abs(r.delta) for r in direct]), abs=2e-4)
    assert use == pytest.approx(np.mean([r.expected_usage for r in direct]), abs=2e-4)


def test_worst_case_examples():
    res = worst_case_design(0.5, SMALL)
    best = min(worst_case_point(StageDesign.uniform(p, G0=g, alpha=a))[1] for p, g, a in SMALL.points())
    assert res.predicted_usage == pytest.approx(best)
    one = DesignGrid((0.1,), (0.05,), (0.5,))
    e0, _ = worst_case_point(StageDesign.uniform(0.1, 0.05))
    assert worst_case_design(e0 + 1e-9, one).pi1 == 0.1
    with pytest.raises(InfeasibleDesign):
        worst_case_design(e0 / 2, one)


def test_worst_case_is_conservative(samples):
    train, test = samples[:20], samples[20:]
    for budget in [0.05, 0.1]:
        avg = average_design(train, budget, SMALL)
        wc = worst_case_design(budget, SMALL)
        assert avg.predicted_usage <= wc.evaluate(train)[1]
        e_avg, u_avg = avg.evaluate(test)
        e_wc, u_wc = wc.evaluate(test)
        assert e_wc < e_avg
        assert u_wc > u_avg


def test_joint_search_beats_fixed_batch(samples):
    for budget in [0.01, 0.05]:
        joint = average_design(samples, budget)
        fixed = fixed_batch_design(samples, budget, 0.05)
        assert joint.predicted_usage <= fixed.predicted_usage + 1e-12


def test_train_test_generalization():
    budget = 0.05
    ok = 0
    for rep in range(20):
        s = synthetic_moment_samples(60, 1000 + rep)
        res = average_design(s[:30], budget)
        err, _ = res.evaluate(s[30:])
        ok += err <= 1.5 * budget
    assert ok >= 19


def test_negative_budget_rejected(samples):
    with pytest.raises(InvalidArgument):
        average_design(samples, -0.1, SMALL)
    with pytest.raises(InvalidArgument):
        average_design([], 0.1, SMALL)


def test_samples_roundtrip_and_constant_rows(tmp_path, samples):
    p = tmp_path / "s.csv"
    write_samples(p, samples[:5])
    with open(p, "a") as fh:
        fh.write("0.1,0,1000\n")
    back = read_samples(p)
    assert back == samples[:5]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(InvalidArgument):
        read_samples(bad)


def test_result_roundtrip(tmp_path):
    r = DesignResult(0.05, bound_from_epsilon(0.01), 0.65, 0.0123, 0.4, 180, "average", 0.05)
    p = tmp_path / "d.txt"
    write_result(p, r)
    assert read_result(p) == r
    assert "epsilon=" in p.read_text()
    assert r.epsilon == pytest.approx(0.01)
    assert r.batch_size(12214) == 611
