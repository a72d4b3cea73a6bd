import math

import numpy as np
import pytest

from oracles import step_curve_crossing

from cralloc.core import BudgetSpec, ConfigError
from cralloc.lambda_correct import (
    QPolicy,
    bisect_phase,
    correct_all,
    correct_slice,
    evaluate_policy,
    grid_search,
    read_lambda_table,
    write_lambda_table,
)
from cralloc.simenv import EnvConfig, feature_dim, generate_dataset, rollout
from cralloc.train import TrainConfig, collect_behavior_data, train


@pytest.fixture(scope="module")
def trained(small_requests):
    ds = collect_behavior_data(small_requests, seed=2)
    res = train(ds, TrainConfig(iterations=150, batch_size=256, lr=1e-3, hidden=(32, 16), eval_interval=1000))
    return res.params


def _step_probe(steps, heights):
    """Cost drops by ``heights[i]`` at ``steps[i]``; value tracks cost."""

    def probe(lam):
        c = 100.0 - sum(h for s, h in zip(steps, heights) if lam >= s)
        return c, 2 * c

    return probe


def test_bisect_step_curve_against_grid_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        steps = np.sort(rng.uniform(0.01, 3.0, size=40))
        heights = rng.uniform(0.5, 2.0, size=40)
        heights *= 90.0 / heights.sum()
        probe = _step_probe(steps, heights)
        budget = float(rng.uniform(20, 90))
        res = bisect_phase(probe, budget, tol=1e-9, max_probes=200)
        oracle = step_curve_crossing(probe, budget, 4.0)
        # within one step of the oracle crossing
        k = np.searchsorted(steps, oracle, side="right")
        lo = steps[k - 2] if k >= 2 else 0.0
        hi = steps[k] if k < len(steps) else np.inf
        assert lo <= res.lam <= hi
        assert res.cost <= budget * (1 + 1e-9)


def test_bisect_slack_budget():
    res = bisect_phase(lambda l: (50.0, 1.0), 80.0)
    assert res.lam == 0.0 and res.status == "slack" and res.probes == 1


def test_bisect_converges_in_band():
    res = bisect_phase(lambda l: (100.0 / (1 + l), 1.0), 40.0)
    assert res.converged and res.status == "ok"
    assert abs(res.utilization - 1) <= 0.005 and res.probes <= 30


def test_bisect_infeasible_flagged(caplog):
    res = bisect_phase(lambda l: (max(100.0 / (1 + l), 30.0), 1.0), 10.0, min_cost=30.0)
    assert not res.converged and res.status == "infeasible"
    assert "minimal-cost" in caplog.text


def test_bisect_unconverged_respects_probe_limit():
    res = bisect_phase(lambda l: (100.0 if l < 0.3 else 0.0, 1.0), 50.0, max_probes=12)
    assert not res.converged and res.status == "unconverged" and res.probes <= 12
    assert res.cost <= 50.0 * 1.005


def test_non_monotone_falls_back_to_grid(caplog):
    def probe(l):
        c = 100.0 / (1 + l) + (30.0 if 0.6 < l < 0.8 else 0.0)
        return c, c

    res = bisect_phase(probe, 60.0, tol=1e-6)
    assert res.status == "grid" or res.converged
    g = grid_search(probe, 60.0, 2.0, tol=0.01, points=41)
    feasible = [t for t in g.trace if t[1] <= 60.0 * 1.01]
    assert g.value == max(v for _, _, v in feasible)


def test_bisect_rejects_bad_budget():
    with pytest.raises(ConfigError):
        bisect_phase(lambda l: (1.0, 1.0), 0.0)


def test_evaluate_policy_extremes(trained, small_requests):
    big = evaluate_policy(trained, np.full(3, 1e9), small_requests)
    mins = np.array([math.fsum(c.min(axis=1)) for c in small_requests.costs])
    assert np.allclose(big.costs, mins, rtol=1e-12)
    zero = evaluate_policy(trained, np.zeros(3), small_requests)
    traj = rollout(small_requests, QPolicy(trained, np.zeros(3)))
    assert np.array_equal(zero.costs, traj.phase_costs())
    with pytest.raises(ConfigError):
        evaluate_policy(trained, np.zeros(3), small_requests.subset(np.arange(0)))


def test_evaluate_cost_monotone_in_each_phase(trained, small_requests):
    for t in range(3):
        costs = []
        for l in np.linspace(0, 3, 25):
            lam = np.array([0.2, 0.05, 0.1])
            lam[t] = l
            costs.append(evaluate_policy(trained, lam, small_requests).costs[t])
        assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_correct_all_band_and_determinism(trained, small_requests):
    budgets = BudgetSpec()
    a = correct_all(trained, budgets, small_requests, per_slice=False)
    b = correct_all(trained, budgets, small_requests, per_slice=False)
    assert np.array_equal(a.lam, b.lam)
    assert a.all_converged
    for t, res in enumerate(a.searches[0]):
        assert res.probes <= 30
        if res.status == "ok":
            assert abs(a.utilization[0, t] - 1) <= 0.005
        else:
            # a budget above the unconstrained spend leaves the multiplier at zero
            assert res.status == "slack" and a.lam[0, t] == 0.0 and a.utilization[0, t] < 1


def test_single_slice_matches_single_path(trained):
    reqs = generate_dataset(EnvConfig(num_requests=600, num_slices=4, seed=5))
    one = correct_all(trained, BudgetSpec(), reqs, per_slice=False)
    lam, _, _ = correct_slice(trained, reqs, np.arange(len(reqs)), BudgetSpec().budgets(len(reqs)))
    assert np.array_equal(one.lam[0], lam)


def test_heavier_slice_gets_larger_multiplier(trained, small_requests):
    # slice 0 has twice the traffic of slice 1 against the same fixed capacity
    idx0 = np.flatnonzero(small_requests.slices == 0)[:120]
    idx1 = np.flatnonzero(small_requests.slices == 1)[:60]
    cap = BudgetSpec().budgets(90)
    lam_heavy, _, _ = correct_slice(trained, small_requests, idx0, cap)
    lam_light, _, _ = correct_slice(trained, small_requests, idx1, cap)
    assert np.all(lam_heavy >= lam_light)


def test_lambda_table_roundtrip(tmp_path, trained, small_requests):
    res = correct_all(trained, BudgetSpec(), small_requests)
    p = tmp_path / "lam.csv"
    write_lambda_table(p, res)
    assert np.array_equal(read_lambda_table(p), res.lam)
    assert res.lam.shape == (small_requests.cfg.num_slices, 3)


def test_qpolicy_validates(trained):
    with pytest.raises(ConfigError):
        QPolicy(trained, np.array([0.1, -1.0, 0.0]))
    assert feature_dim(EnvConfig(num_slices=4)) == trained.input_dim
