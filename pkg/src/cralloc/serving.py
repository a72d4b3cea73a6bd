"""Online serving: greedy calibrated decisions per request, per-slice multipliers, PID load clamps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .control import Clamp, Controller
from .core import MODEL, NUM_PHASES, QUEUE, BudgetSpec, ConfigError, RevenueOutcome, greedy_actions
from .lambda_correct import QPolicy, correct_slice, summarize
from .qnet import QNetworkParams, policy_values
from .simenv import RequestSet, SimEnv, Trajectories, clamp_queue, rollout, traffic_profile

logger = logging.getLogger(__name__)


def resolve_lambda_table(table: np.ndarray, num_slices: int) -> np.ndarray:
    """Fill slices that are missing (or NaN) from the nearest covered slice."""
    table = np.atleast_2d(np.asarray(table, dtype=float))
    if table.shape[1] != NUM_PHASES:
        raise ConfigError("lambda table needs one column per phase")
    out = np.full((num_slices, NUM_PHASES), np.nan)
    k = min(num_slices, table.shape[0])
    out[:k] = table[:k]
    covered = np.flatnonzero(np.all(np.isfinite(out), axis=1))
    if covered.size == 0:
        raise ConfigError("lambda table covers no slice")
    missing = np.setdiff1d(np.arange(num_slices), covered)
    if missing.size:
        logger.warning("lambda table misses slices %s; using the nearest covered slice", missing.tolist())
        for s in missing:
            out[s] = out[covered[np.argmin(np.abs(covered - s))]]
    if np.any(out < 0):
        raise ConfigError("multipliers must be non-negative")
    return out


@dataclass
class ServeTrace:
    actions: tuple[int, ...]
    outcome: RevenueOutcome
    costs: tuple[float, ...]


def serve_request(params: QNetworkParams, lam_table: np.ndarray, env: SimEnv, request_id: int,
                  clamp: Optional[Clamp] = None, bcq_threshold: Optional[float] = None) -> ServeTrace:
    """Step one request through every phase on the greedy calibrated action."""
    reqs = env.requests
    table = resolve_lambda_table(lam_table, reqs.cfg.num_slices)
    state = env.initial_state(request_id)
    row = env._index(request_id)
    cap = None if clamp is None else clamp.queue_cap
    actions, costs = [], []
    outcome = None
    while not state.terminal:
        t = state.phase
        q, mask = policy_values(params, env.encode(state)[None, :], t, None, bcq_threshold)
        a = int(greedy_actions(q, reqs.costs[t - 1][row][None, :], table[state.time_slice, t - 1], mask)[0])
        if t == MODEL and clamp is not None and clamp.force_simple:
            a = 0
        if t == QUEUE:
            a = int(clamp_queue(np.array([a]), reqs.spec, cap)[0][0])
        costs.append(env.action_cost(state, a, cap))
        state, outcome = env.step(state, a, queue_cap=cap)
        actions.append(a)
    return ServeTrace(tuple(actions), outcome, tuple(costs))


def serve_batch(params: QNetworkParams, lam_table: np.ndarray, requests: RequestSet, idx=None,
                clamp: Optional[Clamp] = None, bcq_threshold: Optional[float] = None,
                noisy: bool = False) -> Trajectories:
    """Vectorised ``serve_request`` over many rows (same arithmetic, same decisions)."""
    table = resolve_lambda_table(lam_table, requests.cfg.num_slices)
    policy = QPolicy(params, table, bcq_threshold)
    cap = None if clamp is None else clamp.queue_cap
    simple = None if clamp is None or not clamp.force_simple else True
    return rollout(requests, policy, idx, noisy=noisy, queue_cap=cap, force_simple=simple)


# --- streaming -------------------------------------------------------------


@dataclass
class StreamConfig:
    """Ticks of simulated traffic; ``requests_per_tick`` is scaled by the slice's traffic share."""

    ticks_per_slice: int = 10
    requests_per_tick: int = 400
    slices: Optional[tuple[int, ...]] = None   # default: every slice once, in order
    spike_start: Optional[int] = None          # tick index
    spike_end: Optional[int] = None
    spike_factor: float = 2.0
    refresh_every: Optional[int] = None        # ticks between multiplier refreshes
    refresh_window: int = 2000                 # trailing requests used by a refresh

    def __post_init__(self):
        if self.ticks_per_slice < 1 or self.requests_per_tick < 1:
            raise ConfigError("ticks_per_slice and requests_per_tick must be positive")
        if self.spike_factor <= 0:
            raise ConfigError("spike factor must be positive")
        if self.refresh_every is not None and self.refresh_every < 1:
            raise ConfigError("refresh cadence must be positive")


@dataclass
class StreamReport:
    ticks: list[dict] = field(default_factory=list)
    slices: list[dict] = field(default_factory=list)
    lam_table: Optional[np.ndarray] = None

    def utilization(self, phase: int = QUEUE) -> np.ndarray:
        return np.array([t["utilization"][phase - 1] for t in self.ticks])


def run_stream(params: QNetworkParams, lam_table: np.ndarray, requests: RequestSet, budgets: BudgetSpec,
               cfg: StreamConfig = StreamConfig(), controller: Optional[Controller] = None,
               bcq_threshold: Optional[float] = None) -> StreamReport:
    """Drive traffic slice by slice and tick by tick.

    Each tick serves a batch drawn in order from the slice's own requests
    (cycling). Capacity per tick is the budget rate times the nominal batch
    size, so a traffic spike shows up as overload. The controller watches the
    queue phase and its clamp applies to the next tick.
    """
    spec = requests.spec
    S = requests.cfg.num_slices
    table = resolve_lambda_table(lam_table, S).copy()
    share = traffic_profile(requests.cfg) * S
    order = range(S) if cfg.slices is None else cfg.slices
    pools = {s: np.flatnonzero(requests.slices == s) for s in range(S)}
    cursor = {s: 0 for s in range(S)}
    report = StreamReport()
    tick = 0
    recent: list[np.ndarray] = []
    for s in order:
        pool = pools[s]
        if pool.size == 0:
            logger.warning("slice %d has no requests; skipped", s)
            continue
        agg_cost = np.zeros(NUM_PHASES)
        agg_cap = np.zeros(NUM_PHASES)
        agg_ret, served, clamp_ticks = [], 0, 0
        for _ in range(cfg.ticks_per_slice):
            nominal = max(1, int(round(cfg.requests_per_tick * share[s])))
            spiking = cfg.spike_start is not None and cfg.spike_start <= tick < (cfg.spike_end or np.inf)
            count = int(round(nominal * cfg.spike_factor)) if spiking else nominal
            take = pool[(cursor[s] + np.arange(count)) % pool.size]
            cursor[s] = (cursor[s] + count) % pool.size
            clamp = controller.current(spec) if controller is not None else None
            traj = serve_batch(params, table, requests, take, clamp, bcq_threshold)
            costs = traj.phase_costs()
            capacity = budgets.budgets(nominal)
            util = costs / capacity
            if controller is not None:
                controller.observe(tick, costs[QUEUE - 1], capacity[QUEUE - 1])
            active = clamp is not None and clamp.level > 0
            clamp_ticks += int(active)
            report.ticks.append(dict(tick=tick, slice=s, requests=count, utilization=util,
                                     ret=traj.total_return(), clamp=0.0 if clamp is None else clamp.level))
            agg_cost += costs
            agg_cap += capacity
            agg_ret.append(traj.total_return())
            served += count
            recent.append(take)
            tick += 1
            if cfg.refresh_every is not None and tick % cfg.refresh_every == 0:
                window = np.concatenate(recent)[-cfg.refresh_window:]
                recent = [window]
                lam_s, _, _ = correct_slice(params, requests, window, budgets.budgets(len(window)),
                                            bcq_threshold=bcq_threshold, lam_hint=table[s])
                table[s] = lam_s
        report.slices.append(dict(slice=s, requests=served, utilization=agg_cost / agg_cap,
                                  ret=math.fsum(agg_ret), clamp_ticks=clamp_ticks))
    report.lam_table = table
    return report


def replay(params: QNetworkParams, lam_table: np.ndarray, requests: RequestSet, budgets: Optional[BudgetSpec] = None,
           bcq_threshold: Optional[float] = None):
    """Serve a whole evaluation set once; same aggregates as the evaluation path."""
    traj = serve_batch(params, lam_table, requests, None, None, bcq_threshold)
    return summarize(requests, traj, budgets)


def write_serving_report(path, report: StreamReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "requests"] + [f"utilization_{t}" for t in range(1, NUM_PHASES + 1)]
                   + ["return", "clamp_ticks"])
        for r in report.slices:
            w.writerow([r["slice"], r["requests"]] + [repr(float(u)) for u in r["utilization"]]
                       + [repr(r["ret"]), r["clamp_ticks"]])
