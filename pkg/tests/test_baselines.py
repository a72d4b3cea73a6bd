import math

import numpy as np
import pytest

from oracles import enumerate_assignments

from cralloc.core import QUEUE, BudgetSpec, ConfigError
from cralloc.baselines import (
    CemConfig,
    LinearPolicyParams,
    StaticConfig,
    cem_optimize,
    cem_penalized_reward,
    cem_train,
    dcaf_allocate,
    dcaf_policy,
    linear_act,
    score_to_action,
    static_budget,
    static_policy,
)
from cralloc.simenv import generate_dataset, rollout


def test_static_fixed_triple(small_requests):
    cfg = StaticConfig(channel=1, queue=12, model=0, channel_quota=None, model_quota=None)
    traj = rollout(small_requests, static_policy(cfg))
    assert np.all(traj.actions == [1, 12, 0])
    # the simple model costs nothing, so a budget needs the complex one
    cfg1 = StaticConfig(channel=1, queue=12, model=1, channel_quota=None, model_quota=None)
    b = static_budget(small_requests, cfg1)
    cost = rollout(small_requests, static_policy(cfg1)).phase_costs()
    assert np.allclose(np.array(b.rates) * len(small_requests), cost, rtol=1e-12)


def test_static_quota_share(small_requests):
    traj = rollout(small_requests, static_policy(StaticConfig(channel_quota=0.5, model_quota=0.25)))
    assert abs(np.mean(traj.actions[:, 0] == 1) - 0.5) < 0.07
    assert abs(np.mean(traj.actions[:, 2] == 1) - 0.25) < 0.07
    with pytest.raises(ConfigError):
        StaticConfig(channel_quota=1.5)
    with pytest.raises(ConfigError):
        rollout(small_requests, static_policy(StaticConfig(queue=99)))


def test_score_to_action():
    assert score_to_action(np.zeros(1), 26)[0] == 13
    assert score_to_action(np.zeros(1), 2)[0] == 1
    assert score_to_action(np.array([-5.0, 5.0]), 26).tolist() == [0, 25]
    s = np.linspace(-1.5, 1.5, 101)
    a = score_to_action(s, 26)
    assert np.all(np.diff(a) >= 0)


def test_linear_act_zero_theta():
    p = LinearPolicyParams(np.zeros((3, 5)))
    assert np.all(linear_act(p, np.ones((4, 5)), 2, 26) == 13)
    with pytest.raises(ConfigError):
        LinearPolicyParams(np.zeros((2, 5)))
    assert np.array_equal(LinearPolicyParams.from_flat(p.flat()).theta, p.theta)


def test_cem_penalized_reward():
    assert cem_penalized_reward(10.0, [1, 2, 3], [1, 2, 3]) == 10.0
    assert cem_penalized_reward(10.0, [1, 3, 3], [1, 2, 3]) == 10.0 - 1e8
    assert cem_penalized_reward(10.0, [0.5, 1, 1], [1, 2, 3]) == 10.0


def test_cem_sigma_is_elite_std():
    cfg = CemConfig(iterations=1, num_samples=20, num_elites=5, seed=3)
    res = cem_optimize(lambda th: (-float(th @ th), True), 4, cfg)
    rng = np.random.default_rng(3)
    samples = rng.standard_normal((20, 4))
    r = -np.einsum("ij,ij->i", samples, samples)
    elite = samples[np.argsort(-r, kind="stable")[:5]]
    assert np.allclose(res.mean, elite.mean(axis=0))
    assert np.allclose(res.std, elite.std(axis=0))


def test_cem_keeps_best_feasible_ever():
    # the objective says everything is infeasible, so nothing may be returned
    res = cem_optimize(lambda th: (float(-th @ th), False), 3, CemConfig(iterations=3, num_samples=10, num_elites=2))
    assert res.best is None and not res.feasible


def test_cem_train_infeasible_returns_none(small_requests):
    tight = BudgetSpec((1e-6, 1e-6, 1e-6))
    theta, res = cem_train(CemConfig(iterations=2, num_samples=6, num_elites=2), small_requests.subset(np.arange(50)),
                           tight)
    assert theta is None and not res.feasible


def test_dcaf_against_enumeration(rng):
    for _ in range(30):
        values = rng.uniform(0, 5, size=(3, 3))
        costs = np.sort(rng.integers(0, 6, size=(3, 3)), axis=1).astype(float)
        values = np.sort(values, axis=1)
        budget = float(rng.integers(int(costs.min(axis=1).sum()), int(costs.max(axis=1).sum()) + 1))
        best = enumerate_assignments(values, costs, budget)
        res = dcaf_allocate(values, costs, budget)
        rows = np.arange(3)
        v = values[rows, res.actions].sum()
        c = costs[rows, res.actions].sum()
        assert c <= budget * 1.005 + 1e-9
        assert v <= best + 1e-9
        # duality gap of a greedy multiplier is at most one row's value span
        assert best - v <= np.ptp(values, axis=1).max() + 1e-9


def test_dcaf_slack_budget_takes_best_bucket(rng):
    values = rng.uniform(0, 1, size=(10, 4))
    costs = np.tile(np.arange(4.0), (10, 1))
    res = dcaf_allocate(values, costs, 1e6)
    assert res.lam == 0.0 and res.status == "slack"
    assert np.array_equal(res.actions, values.argmax(axis=1))


def test_dcaf_default_env_queue_utilization(small_env):
    reqs = generate_dataset(small_env)
    rate = BudgetSpec().rates[QUEUE - 1]
    traj = rollout(reqs, dcaf_policy(reqs, rate))
    util = traj.phase_costs()[QUEUE - 1] / (rate * len(reqs))
    assert abs(util - 1) <= 0.005


def test_enumeration_oracle_sanity():
    values = np.array([[0.0, 1.0], [0.0, 2.0]])
    costs = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert enumerate_assignments(values, costs, 1.0) == 2.0
    assert math.isclose(enumerate_assignments(values, costs, 2.0), 3.0)
