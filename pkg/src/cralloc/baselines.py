"""Comparison policies: fixed rules, single-phase Lagrangian queue allocation, and CEM-searched linear policies."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import CHANNEL, MODEL, NUM_PHASES, QUEUE, BudgetSpec, ConfigError, greedy_actions
from .lambda_correct import bisect_phase
from .simenv import RequestSet, encode_states, feature_dim, hashed_uniform, rollout

logger = logging.getLogger(__name__)

# salts that decorrelate the per-request quota draws of the two fixed rules
CHANNEL_SALT, MODEL_SALT = 0x5EED_C4A1, 0x5EED_30DE
DEFAULT_PENALTY = 1e8


# --- static rules ----------------------------------------------------------


@dataclass(frozen=True)
class StaticConfig:
    """Global fixed rules.

    ``channel``, ``queue`` and ``model`` are the configured actions. A quota in
    (0, 1) admits that share of requests (a fixed hash of the request id) to
    the configured action and sends the rest to action 0; ``None`` applies the
    action to everyone.
    """

    channel: int = 1
    queue: int = 12
    model: int = 1
    channel_quota: Optional[float] = 0.5
    model_quota: Optional[float] = 0.5

    def __post_init__(self):
        for q in (self.channel_quota, self.model_quota):
            if q is not None and not 0 <= q <= 1:
                raise ConfigError("quotas must lie in [0, 1]")


def _quota_gate(requests: RequestSet, idx: np.ndarray, quota: Optional[float], salt: int) -> np.ndarray:
    if quota is None:
        return np.ones(len(idx), dtype=bool)
    u = hashed_uniform(np.full(len(idx), salt, dtype=np.uint64), requests.ids[idx])
    return u < quota


def static_policy(cfg: StaticConfig = StaticConfig()):
    def policy(requests, idx, phase, history, queue_len=None):
        spec = requests.spec
        n = len(idx)
        if phase == CHANNEL:
            if not 0 <= cfg.channel < spec.size(CHANNEL):
                raise ConfigError(f"static channel strategy {cfg.channel} out of range")
            return np.where(_quota_gate(requests, idx, cfg.channel_quota, CHANNEL_SALT), cfg.channel, 0)
        if phase == QUEUE:
            if not 0 <= cfg.queue < spec.size(QUEUE):
                raise ConfigError(f"static queue bucket {cfg.queue} out of range")
            return np.full(n, cfg.queue)
        if not 0 <= cfg.model < spec.size(MODEL):
            raise ConfigError(f"static model {cfg.model} out of range")
        return np.where(_quota_gate(requests, idx, cfg.model_quota, MODEL_SALT), cfg.model, 0)

    return policy


def static_budget(requests: RequestSet, cfg: StaticConfig = StaticConfig()) -> BudgetSpec:
    """Per-request budget rates equal to the static rules' measured cost."""
    traj = rollout(requests, static_policy(cfg))
    return BudgetSpec(tuple(float(c) / len(requests) for c in traj.phase_costs()))


# --- single-phase Lagrangian (queue only) ----------------------------------


@dataclass
class DcafResult:
    lam: float
    actions: np.ndarray      # queue bucket per request
    utilization: float
    converged: bool
    status: str


def dcaf_allocate(values: np.ndarray, costs: np.ndarray, budget: float, tol: float = 0.005,
                  max_probes: int = 60) -> DcafResult:
    """One global multiplier; each row takes ``argmax(value - lam * cost)``."""
    rows = np.arange(values.shape[0])

    def probe(lam):
        a = greedy_actions(values, costs, lam)
        return math.fsum(costs[rows, a]), math.fsum(values[rows, a])

    res = bisect_phase(probe, budget, tol, max_probes, min_cost=math.fsum(costs.min(axis=1)))
    if not res.converged and res.status != "slack":
        logger.warning("queue allocation did not reach the budget band (%s)", res.status)
    a = greedy_actions(values, costs, res.lam)
    return DcafResult(res.lam, a, res.utilization, res.converged or res.status == "slack", res.status)


def dcaf_policy(requests: RequestSet, budget_rate: float, rules: StaticConfig = StaticConfig(),
                tol: float = 0.005):
    """Fixed channel/model rules; queue lengths from a single multiplier on ground-truth values.

    The multiplier is solved once per call of the returned policy, on the
    requests being served, so the queue phase meets ``budget_rate * n``.
    """
    fixed = static_policy(rules)

    def policy(reqs, idx, phase, history, queue_len=None):
        if phase != QUEUE:
            return fixed(reqs, idx, phase, history, queue_len)
        # value of each bucket given the realized channel and the rule's model choice
        model = fixed(reqs, idx, MODEL, history, queue_len)
        g1 = reqs.factors(CHANNEL)[idx, history[:, 0]]
        g3 = reqs.factors(MODEL)[idx, model]
        values = (reqs.scale[idx] * g1 * g3)[:, None] * reqs.factors(QUEUE)[idx]
        costs = reqs.costs[QUEUE - 1][idx]
        return dcaf_allocate(values, costs, budget_rate * len(idx), tol).actions

    return policy


# --- linear policies + CEM -------------------------------------------------


@dataclass
class LinearPolicyParams:
    """One weight vector per phase over the shared state encoding."""

    theta: np.ndarray  # (T, D)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2 or self.theta.shape[0] != NUM_PHASES:
            raise ConfigError("theta must have one row per phase")
        if not np.all(np.isfinite(self.theta)):
            raise ConfigError("theta must be finite")

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "LinearPolicyParams":
        flat = np.asarray(flat, dtype=float)
        return cls(flat.reshape(NUM_PHASES, -1))

    def flat(self) -> np.ndarray:
        return self.theta.ravel()


def score_to_action(score: np.ndarray, n_actions: int) -> np.ndarray:
    """Clamped affine rounding of ``[-1, 1]`` onto ``{0, ..., n - 1}``; zero maps to ``n // 2``."""
    a = np.floor((np.asarray(score, dtype=float) + 1.0) * 0.5 * n_actions)
    return np.clip(a, 0, n_actions - 1).astype(np.int64)


def linear_act(params: LinearPolicyParams, x: np.ndarray, phase: int, n_actions: int) -> np.ndarray:
    return score_to_action(np.atleast_2d(x) @ params.theta[phase - 1], n_actions)


def linear_policy(params: LinearPolicyParams):
    def policy(requests, idx, phase, history, queue_len=None):
        x = encode_states(requests, idx, phase, history, queue_len)
        return linear_act(params, x, phase, requests.spec.size(phase))

    return policy


def cem_penalized_reward(total_value: float, phase_costs, budgets, penalty=DEFAULT_PENALTY) -> float:
    """Value minus ``penalty`` per unit of overspend, summed over phases."""
    pen = np.broadcast_to(np.asarray(penalty, dtype=float), (len(budgets),))
    over = np.maximum(np.asarray(phase_costs, dtype=float) - np.asarray(budgets, dtype=float), 0.0)
    return float(total_value) - float(pen @ over)


@dataclass
class CemConfig:
    iterations: int = 30
    num_samples: int = 64
    num_elites: int = 8
    init_mean: float = 0.0
    init_std: float = 1.0
    penalty: float = DEFAULT_PENALTY
    min_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_elites <= self.num_samples:
            raise ConfigError("need 1 <= num_elites <= num_samples")
        if self.init_std < 0 or self.min_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


@dataclass
class CemResult:
    best: Optional[np.ndarray]
    best_reward: float
    mean: np.ndarray
    std: np.ndarray
    feasible: bool
    log: list[dict] = field(default_factory=list)


def cem_optimize(objective: Callable[[np.ndarray], tuple[float, bool]], dim: int, cfg: CemConfig,
                 mean: Optional[np.ndarray] = None) -> CemResult:
    """Maximize ``objective`` with a diagonal Gaussian; keeps the best feasible sample ever seen.

    ``objective(theta)`` returns ``(reward, feasible)``.
    """
    rng = np.random.default_rng(cfg.seed)
    mu = np.full(dim, cfg.init_mean, dtype=float) if mean is None else np.array(mean, dtype=float)
    sigma = np.full(dim, cfg.init_std, dtype=float)
    best, best_reward = None, -np.inf
    log = []
    for it in range(cfg.iterations):
        samples = mu + sigma * rng.standard_normal((cfg.num_samples, dim))
        scored = [objective(s) for s in samples]
        rewards = np.array([r for r, _ in scored])
        for s, (r, ok) in zip(samples, scored):
            if ok and r > best_reward:
                best, best_reward = s.copy(), r
        # stable sort keeps ties in sample order, so runs are reproducible
        elite = samples[np.argsort(-rewards, kind="stable")[: cfg.num_elites]]
        mu = elite.mean(axis=0)
        sigma = np.maximum(elite.std(axis=0), cfg.min_std)
        log.append(dict(iteration=it, best_reward=float(best_reward), mu_norm=float(np.linalg.norm(mu)),
                        sigma_norm=float(np.linalg.norm(sigma))))
    return CemResult(best, float(best_reward), mu, sigma, best is not None, log)


def cem_train(cfg: CemConfig, requests: RequestSet, budgets: BudgetSpec) -> tuple[Optional[LinearPolicyParams], CemResult]:
    """Search linear policies whose realized phase costs fit ``budgets`` on ``requests``."""
    if len(requests) == 0:
        raise ConfigError("evaluation set is empty")
    caps = budgets.budgets(len(requests))
    dim = NUM_PHASES * feature_dim(requests.cfg)

    def objective(flat):
        traj = rollout(requests, linear_policy(LinearPolicyParams.from_flat(flat)))
        costs = traj.phase_costs()
        value = math.fsum(traj.value)
        return cem_penalized_reward(value, costs, caps, cfg.penalty), bool(np.all(costs <= caps))

    res = cem_optimize(objective, dim, cfg)
    if not res.feasible:
        logger.warning("no budget-feasible linear policy found")
        return None, res
    return LinearPolicyParams.from_flat(res.best), res


def write_cem_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "best_reward", "mu_norm", "sigma_norm"])
        for r in log:
            w.writerow([r["iteration"], repr(r["best_reward"]), repr(r["mu_norm"]), repr(r["sigma_norm"])])
