"""Post-training multiplier correction.

After training, the greedy calibrated policy is replayed on held-out traffic
and each phase's multiplier is searched so that realized cost meets that
phase's budget. Phases are corrected in decision order: phase ``t`` cost only
depends on multipliers ``1..t``, so one ordered pass fixes every phase.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import NUM_PHASES, BudgetSpec, ConfigError, greedy_actions
from .qnet import QNetworkParams, RemMixture, policy_values
from .simenv import RequestSet, Trajectories, encode_states, rollout

logger = logging.getLogger(__name__)

DEFAULT_TOL = 0.005
DEFAULT_MAX_PROBES = 30


@dataclass
class QPolicy:
    """Greedy policy on constraint-calibrated q-values.

    ``lam`` is either one multiplier per phase, shape ``(T,)``, or a per-slice
    table of shape ``(S, T)`` looked up by each request's time slice.
    """

    params: QNetworkParams
    lam: np.ndarray
    bcq_threshold: Optional[float] = None
    beta: Optional[RemMixture] = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if np.any(self.lam < 0) or not np.all(np.isfinite(self.lam)):
            raise ConfigError("multipliers must be finite and non-negative")

    def multipliers(self, requests: RequestSet, idx: np.ndarray, phase: int) -> np.ndarray:
        if self.lam.ndim == 1:
            return np.full(len(idx), self.lam[phase - 1])
        table = self.lam
        slices = np.clip(requests.slices[idx], 0, table.shape[0] - 1)
        return table[slices, phase - 1]

    def __call__(self, requests, idx, phase, history, queue_len=None):
        x = encode_states(requests, idx, phase, history, queue_len)
        q, mask = policy_values(self.params, x, phase, self.beta, self.bcq_threshold)
        costs = requests.costs[phase - 1][idx]
        return greedy_actions(q, costs, self.multipliers(requests, idx, phase), mask)


@dataclass
class PolicyEvaluation:
    costs: np.ndarray          # realized cost per phase
    phase_values: np.ndarray   # sum of per-phase ground-truth value of the chosen actions
    total_return: float        # noise-free fee + price over all requests
    utilization: Optional[np.ndarray]
    trajectories: Trajectories


def evaluate_policy(params: QNetworkParams, lam, requests: RequestSet, budgets: Optional[BudgetSpec] = None,
                    bcq_threshold: Optional[float] = None) -> PolicyEvaluation:
    if len(requests) == 0:
        raise ConfigError("evaluation set is empty")
    policy = QPolicy(params, lam, bcq_threshold)
    traj = rollout(requests, policy)
    return summarize(requests, traj, budgets)


def summarize(requests: RequestSet, traj: Trajectories, budgets: Optional[BudgetSpec] = None) -> PolicyEvaluation:
    costs = traj.phase_costs()
    phase_values = np.array([
        math.fsum(requests.values[t][traj.idx, traj.actions[:, t]]) for t in range(NUM_PHASES)
    ])
    util = None
    if budgets is not None:
        util = costs / budgets.budgets(len(traj.idx))
    return PolicyEvaluation(costs, phase_values, traj.total_return(), util, traj)


# --- one-dimensional search ------------------------------------------------


@dataclass
class BisectResult:
    lam: float
    cost: float
    value: float
    budget: float
    converged: bool
    status: str  # ok | slack | infeasible | grid | unconverged
    trace: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def utilization(self) -> float:
        return self.cost / self.budget

    @property
    def probes(self) -> int:
        return len(self.trace)


Probe = Callable[[float], tuple[float, float]]


def bisect_phase(probe: Probe, budget: float, tol: float = DEFAULT_TOL, max_probes: int = DEFAULT_MAX_PROBES,
                 lam_hi: float = 1.0, min_cost: Optional[float] = None, grid_points: int = 64) -> BisectResult:
    """Find ``lam`` with ``|cost(lam) / budget - 1| <= tol`` for a non-increasing cost curve.

    ``probe(lam)`` returns ``(cost, value)``. The upper bracket doubles until
    cost drops under the band's upper edge or reaches ``min_cost`` (the
    minimal-cost policy). A probe that contradicts monotonicity switches to a
    grid search that keeps the best-value feasible point.
    """
    if budget <= 0:
        raise ConfigError("budget must be positive")
    trace: list[tuple[float, float, float]] = []
    upper = budget * (1.0 + tol)

    def run(lam):
        c, v = probe(lam)
        trace.append((float(lam), float(c), float(v)))
        return c, v

    def in_band(c):
        return abs(c / budget - 1.0) <= tol

    def result(lam, c, v, converged, status):
        return BisectResult(float(lam), float(c), float(v), float(budget), converged, status, trace)

    c0, v0 = run(0.0)
    if c0 <= upper:
        return result(0.0, c0, v0, True, "ok" if in_band(c0) else "slack")

    lo, hi = 0.0, max(float(lam_hi), 1e-12)
    c_hi, v_hi = run(hi)
    while c_hi > upper:
        if min_cost is not None and c_hi <= min_cost:
            logger.warning("budget %.6g below the minimal-cost policy (%.6g)", budget, c_hi)
            return result(hi, c_hi, v_hi, False, "infeasible")
        if len(trace) >= max_probes:
            return result(hi, c_hi, v_hi, False, "unconverged")
        lo, hi = hi, 2.0 * hi
        c_hi, v_hi = run(hi)
    if in_band(c_hi):
        return result(hi, c_hi, v_hi, True, "ok")

    while len(trace) < max_probes:
        mid = 0.5 * (lo + hi)
        c, v = run(mid)
        if not _monotone(trace):
            logger.warning("non-monotone cost curve, falling back to grid search")
            return grid_search(probe, budget, hi, tol, grid_points, trace)
        if in_band(c):
            return result(mid, c, v, True, "ok")
        if c > budget:
            lo = mid
        else:
            hi = mid
    best = _best_feasible(trace, upper)
    if best is None:
        return result(hi, c_hi, v_hi, False, "unconverged")
    return result(*best, False, "unconverged")


def _monotone(trace) -> bool:
    pts = sorted(trace)
    costs = [c for _, c, _ in pts]
    return all(a >= b for a, b in zip(costs, costs[1:]))


def _best_feasible(trace, upper):
    feasible = [t for t in trace if t[1] <= upper]
    if not feasible:
        return None
    # closest to the budget from below or inside the band
    return max(feasible, key=lambda t: (t[1], -t[0]))


def grid_search(probe: Probe, budget: float, lam_max: float, tol: float = DEFAULT_TOL, points: int = 64,
                trace: Optional[list] = None) -> BisectResult:
    """Evaluate a uniform grid on ``[0, lam_max]``; keep the best-value point within budget."""
    trace = [] if trace is None else trace
    for lam in np.linspace(0.0, lam_max, points):
        c, v = probe(float(lam))
        trace.append((float(lam), float(c), float(v)))
    upper = budget * (1.0 + tol)
    feasible = [t for t in trace if t[1] <= upper]
    if not feasible:
        lam, c, v = max(trace, key=lambda t: t[0])
        return BisectResult(lam, c, v, budget, False, "infeasible", trace)
    lam, c, v = max(feasible, key=lambda t: (t[2], -t[1]))
    converged = abs(c / budget - 1.0) <= tol
    return BisectResult(lam, c, v, budget, converged, "grid", trace)


# --- full correction -------------------------------------------------------


@dataclass
class CorrectionResult:
    lam: np.ndarray            # (S, T) corrected multipliers
    utilization: np.ndarray    # (S, T) realized cost / budget
    converged: np.ndarray      # (S, T); a slack phase (budget above the lambda=0 spend) counts as converged
    returns: np.ndarray        # (S,) noise-free return per slice
    counts: np.ndarray         # (S,) requests per slice
    costs: np.ndarray          # (S, T)
    budgets: np.ndarray        # (S, T)
    searches: dict = field(default_factory=dict)

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def overall_utilization(self) -> np.ndarray:
        return self.costs.sum(axis=0) / self.budgets.sum(axis=0)

    def total_return(self) -> float:
        return math.fsum(self.returns)


def correct_slice(params: QNetworkParams, requests: RequestSet, idx: np.ndarray, budgets: np.ndarray,
                  tol: float = DEFAULT_TOL, max_probes: int = DEFAULT_MAX_PROBES,
                  bcq_threshold: Optional[float] = None, lam_hint: Optional[np.ndarray] = None):
    """Ordered per-phase search on one group of requests; returns (lam, searches, trajectories)."""
    n = len(idx)
    history = np.full((n, NUM_PHASES), -1, dtype=np.int64)
    lam = np.zeros(NUM_PHASES)
    searches = []
    for t in range(1, NUM_PHASES + 1):
        x = encode_states(requests, idx, t, history)
        q, mask = policy_values(params, x, t, None, bcq_threshold)
        costs = requests.costs[t - 1][idx]
        values = requests.values[t - 1][idx]
        rows = np.arange(n)

        def probe(l, q=q, mask=mask, costs=costs, values=values):
            a = greedy_actions(q, costs, l, mask)
            return math.fsum(costs[rows, a]), math.fsum(values[rows, a])

        min_cost = math.fsum(costs.min(axis=1))
        hint = 1.0 if lam_hint is None else max(1.0, 2.0 * float(lam_hint[t - 1]))
        res = bisect_phase(probe, float(budgets[t - 1]), tol, max_probes, lam_hi=hint, min_cost=min_cost)
        lam[t - 1] = res.lam
        searches.append(res)
        history[:, t - 1] = greedy_actions(q, costs, res.lam, mask)
    traj = rollout(requests, QPolicy(params, lam, bcq_threshold), idx)
    return lam, searches, traj


def correct_all(params: QNetworkParams, budgets: BudgetSpec, requests: RequestSet, per_slice: bool = True,
                tol: float = DEFAULT_TOL, max_probes: int = DEFAULT_MAX_PROBES,
                bcq_threshold: Optional[float] = None, lam_hint: Optional[np.ndarray] = None) -> CorrectionResult:
    """Correct every phase in order, separately for each time slice when ``per_slice``."""
    if len(requests) == 0:
        raise ConfigError("evaluation set is empty")
    num_slices = requests.cfg.num_slices if per_slice else 1
    groups = [np.flatnonzero(requests.slices == s) for s in range(num_slices)] if per_slice \
        else [np.arange(len(requests))]
    S = num_slices
    lam = np.zeros((S, NUM_PHASES))
    util = np.ones((S, NUM_PHASES))
    conv = np.ones((S, NUM_PHASES), dtype=bool)
    costs = np.zeros((S, NUM_PHASES))
    budget_tab = np.zeros((S, NUM_PHASES))
    returns = np.zeros(S)
    counts = np.array([len(g) for g in groups])
    searches = {}
    for s, idx in enumerate(groups):
        if len(idx) == 0:
            continue
        b = budgets.budgets(len(idx), s if per_slice else None)
        lam_s, res, traj = correct_slice(params, requests, idx, b, tol, max_probes, bcq_threshold, lam_hint)
        lam[s] = lam_s
        costs[s] = traj.phase_costs()
        budget_tab[s] = b
        util[s] = costs[s] / b
        conv[s] = [r.converged or r.status == "slack" for r in res]
        returns[s] = traj.total_return()
        searches[s] = res
    empty = counts == 0
    if empty.any() and (~empty).any():
        # slices without traffic inherit the nearest populated slice
        filled = np.flatnonzero(~empty)
        for s in np.flatnonzero(empty):
            lam[s] = lam[filled[np.argmin(np.abs(filled - s))]]
    return CorrectionResult(lam, util, conv, returns, counts, costs, budget_tab, searches)


# --- lambda table files ----------------------------------------------------


def write_lambda_table(path, result: CorrectionResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "phase", "lambda", "utilization"])
        for s in range(result.lam.shape[0]):
            for t in range(NUM_PHASES):
                w.writerow([s, t + 1, repr(float(result.lam[s, t])), repr(float(result.utilization[s, t]))])


def read_lambda_table(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["slice"]), int(rec["phase"]), float(rec["lambda"])))
    if not rows:
        raise ConfigError(f"empty lambda table {path}")
    S = max(r[0] for r in rows) + 1
    table = np.full((S, NUM_PHASES), np.nan)
    for s, t, l in rows:
        table[s, t - 1] = l
    return table
