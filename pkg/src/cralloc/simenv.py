"""Synthetic three-phase request simulator (Channel -> Queue -> Model).

Each request carries a ground-truth value table per phase. The joint value of
a decision path is multiplicative::

    V(a1, a2, a3) = v * g1(a1) * g2(a2) * g3(a3)

where ``v`` is the request's value scale and each ``g_t`` is a monotone concave
function of that phase's cost with ``max g_t = 1``. The per-phase table
``values[t][a] = v * g_t(a)`` is therefore the value of action ``a`` when every
other phase takes its richest action.

The heavy lifting is vectorised over request rows (``rollout``); the
single-request ``SimEnv.step`` API is a thin wrapper over the same arithmetic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .core import (
    CHANNEL,
    MODEL,
    NUM_PHASES,
    QUEUE,
    ActionSpaceSpec,
    ConfigError,
    RevenueOutcome,
    indicator_matrix,
)

MIN_USER_DIM = 4
MIN_CONTEXT_DIM = 3
POOL_RANGE = (50, 150)


@dataclass(frozen=True)
class EnvConfig:
    num_requests: int = 10_000
    num_slices: int = 24
    traffic_amplitude: float = 0.5
    exponent_range: tuple[float, float] = (0.3, 0.8)
    violation_fraction: float = 0.0
    noise_scale: float = 0.2
    value_scale: float = 2.0
    user_dim: int = MIN_USER_DIM
    context_dim: int = MIN_CONTEXT_DIM
    queue_item_cost: float = 0.01
    model_unit_cost: float = 1.0
    seed: int = 0
    action_space: ActionSpaceSpec = field(default_factory=ActionSpaceSpec)

    def __post_init__(self):
        lo, hi = self.exponent_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"exponent range must lie in (0, 1), got {self.exponent_range}")
        if not 0 <= self.violation_fraction < 1:
            raise ConfigError(f"violation fraction must be in [0, 1), got {self.violation_fraction}")
        if self.violation_fraction > 0 and self.action_space.queue_buckets < 2:
            raise ConfigError("violations are injected in the queue phase and need >= 2 buckets")
        if not 0 <= self.traffic_amplitude < 1:
            raise ConfigError("traffic amplitude must be in [0, 1)")
        if not 0 <= self.noise_scale < 1:
            raise ConfigError("noise scale must be in [0, 1)")
        if self.num_requests < 0 or self.num_slices < 1:
            raise ConfigError("num_requests must be >= 0 and num_slices >= 1")
        if self.user_dim < MIN_USER_DIM or self.context_dim < MIN_CONTEXT_DIM:
            raise ConfigError(f"need user_dim >= {MIN_USER_DIM} and context_dim >= {MIN_CONTEXT_DIM}")
        if self.value_scale <= 0 or self.queue_item_cost <= 0 or self.model_unit_cost <= 0:
            raise ConfigError("value scale and unit costs must be positive")


def traffic_profile(cfg: EnvConfig) -> np.ndarray:
    """Share of daily traffic per slice; a sinusoid with one period per day."""
    s = np.arange(cfg.num_slices)
    w = 1.0 + cfg.traffic_amplitude * np.sin(2 * np.pi * s / cfg.num_slices)
    return w / w.sum()


def phase_cost_grids(cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cost of every action, per phase.

    Channel strategies cost the sum of their channels' unit costs, with
    binary weights so that the cost of strategy ``s`` is ``s``. Queue cost is
    proportional to truncation length; model ``m`` costs ``m`` units.
    """
    spec = cfg.action_space
    unit = 2.0 ** np.arange(spec.channel_count - 1, -1, -1)
    channel = indicator_matrix(spec.channel_count) @ unit
    queue = spec.queue_lengths() * cfg.queue_item_cost
    model = np.arange(spec.model_count) * cfg.model_unit_cost
    return channel, queue, model


def _concave_factor(cost: np.ndarray, cmax: float, exponent: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """``floor + (1 - floor) * (cost / cmax) ** p``, broadcast over requests x actions."""
    if cmax <= 0:
        return np.ones((exponent.shape[0], cost.shape[0]))
    frac = (cost / cmax)[None, :] ** exponent[:, None]
    return floor[:, None] + (1.0 - floor[:, None]) * frac


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class SyntheticRequest:
    request_id: int
    user: np.ndarray
    context: np.ndarray
    time_slice: int
    scale: float
    values: tuple[np.ndarray, ...]
    costs: tuple[np.ndarray, ...]
    fee_share: float
    pools: np.ndarray
    noise_seed: int


@dataclass
class RequestSet:
    """Struct-of-arrays container for many ``SyntheticRequest`` rows."""

    ids: np.ndarray
    user: np.ndarray
    context: np.ndarray
    slices: np.ndarray
    scale: np.ndarray
    values: tuple[np.ndarray, np.ndarray, np.ndarray]
    costs: tuple[np.ndarray, np.ndarray, np.ndarray]
    fee_share: np.ndarray
    pools: np.ndarray
    noise_seed: np.ndarray
    cfg: EnvConfig

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __iter__(self) -> Iterator[SyntheticRequest]:
        for i in range(len(self)):
            yield self.request(i)

    @property
    def spec(self) -> ActionSpaceSpec:
        return self.cfg.action_space

    def request(self, i: int) -> SyntheticRequest:
        return SyntheticRequest(
            request_id=int(self.ids[i]),
            user=self.user[i].copy(),
            context=self.context[i].copy(),
            time_slice=int(self.slices[i]),
            scale=float(self.scale[i]),
            values=tuple(v[i].copy() for v in self.values),
            costs=tuple(c[i].copy() for c in self.costs),
            fee_share=float(self.fee_share[i]),
            pools=self.pools[i].copy(),
            noise_seed=int(self.noise_seed[i]),
        )

    def subset(self, idx) -> "RequestSet":
        idx = np.asarray(idx)
        return RequestSet(
            ids=self.ids[idx],
            user=self.user[idx],
            context=self.context[idx],
            slices=self.slices[idx],
            scale=self.scale[idx],
            values=tuple(v[idx] for v in self.values),
            costs=tuple(c[idx] for c in self.costs),
            fee_share=self.fee_share[idx],
            pools=self.pools[idx],
            noise_seed=self.noise_seed[idx],
            cfg=self.cfg,
        )

    @classmethod
    def from_requests(cls, requests: Sequence[SyntheticRequest], cfg: EnvConfig) -> "RequestSet":
        return cls(
            ids=np.array([r.request_id for r in requests], dtype=np.int64),
            user=np.array([r.user for r in requests], dtype=float).reshape(len(requests), cfg.user_dim),
            context=np.array([r.context for r in requests], dtype=float).reshape(len(requests), cfg.context_dim),
            slices=np.array([r.time_slice for r in requests], dtype=np.int64),
            scale=np.array([r.scale for r in requests], dtype=float),
            values=tuple(
                np.array([r.values[t] for r in requests], dtype=float).reshape(len(requests), cfg.action_space.size(t + 1))
                for t in range(NUM_PHASES)
            ),
            costs=tuple(
                np.array([r.costs[t] for r in requests], dtype=float).reshape(len(requests), cfg.action_space.size(t + 1))
                for t in range(NUM_PHASES)
            ),
            fee_share=np.array([r.fee_share for r in requests], dtype=float),
            pools=np.array([r.pools for r in requests], dtype=float).reshape(len(requests), cfg.action_space.channel_count),
            noise_seed=np.array([r.noise_seed for r in requests], dtype=np.uint64),
            cfg=cfg,
        )

    def factors(self, phase: int) -> np.ndarray:
        """``g_t`` table: per-phase value relative to the request scale."""
        return self.values[phase - 1] / self.scale[:, None]

    def queue_factor(self, idx: np.ndarray, length: np.ndarray) -> np.ndarray:
        """``g_2`` at arbitrary truncation lengths, piecewise linear between buckets."""
        spec = self.spec
        table = np.concatenate([np.zeros((len(idx), 1)), self.factors(QUEUE)[idx]], axis=1)
        x = np.clip(np.asarray(length, dtype=float) / spec.queue_bucket_width, 0.0, spec.queue_buckets)
        k = np.minimum(np.floor(x).astype(np.int64), spec.queue_buckets - 1)
        frac = x - k
        rows = np.arange(len(idx))
        return table[rows, k] + frac * (table[rows, k + 1] - table[rows, k])

    def path_value(self, idx: np.ndarray, actions: np.ndarray, queue_len: Optional[np.ndarray] = None) -> np.ndarray:
        """Noise-free joint value of each row's decision path."""
        idx = np.asarray(idx)
        actions = np.asarray(actions)
        g1 = self.factors(CHANNEL)[idx, actions[:, 0]]
        if queue_len is None:
            g2 = self.factors(QUEUE)[idx, actions[:, 1]]
        else:
            g2 = self.queue_factor(idx, queue_len)
        g3 = self.factors(MODEL)[idx, actions[:, 2]]
        return self.scale[idx] * g1 * g2 * g3

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                rec = {
                    "id": int(self.ids[i]),
                    "slice": int(self.slices[i]),
                    "user": self.user[i].tolist(),
                    "context": self.context[i].tolist(),
                    "scale": float(self.scale[i]),
                    "fee_share": float(self.fee_share[i]),
                    "pools": self.pools[i].tolist(),
                    "noise_seed": int(self.noise_seed[i]),
                    "values": [v[i].tolist() for v in self.values],
                    "costs": [c[i].tolist() for c in self.costs],
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path, cfg: EnvConfig) -> "RequestSet":
        reqs = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                reqs.append(
                    SyntheticRequest(
                        request_id=rec["id"],
                        user=np.array(rec["user"]),
                        context=np.array(rec["context"]),
                        time_slice=rec["slice"],
                        scale=rec["scale"],
                        values=tuple(np.array(v) for v in rec["values"]),
                        costs=tuple(np.array(c) for c in rec["costs"]),
                        fee_share=rec["fee_share"],
                        pools=np.array(rec["pools"], dtype=float),
                        noise_seed=rec["noise_seed"],
                    )
                )
        return cls.from_requests(reqs, cfg)


def generate_dataset(cfg: EnvConfig) -> RequestSet:
    """Draw ``cfg.num_requests`` requests; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.action_space
    m = cfg.num_requests
    lo, hi = cfg.exponent_range

    user = rng.standard_normal((m, cfg.user_dim))
    context = rng.standard_normal((m, cfg.context_dim))
    slices = rng.choice(cfg.num_slices, size=m, p=traffic_profile(cfg)).astype(np.int64)
    latent = rng.standard_normal(m)

    z = (
        0.6 * user[:, 0]
        + 0.4 * user[:, 1]
        - 0.3 * context[:, 0]
        + 0.3 * np.sin(2 * np.pi * slices / cfg.num_slices)
        + 0.15 * latent
    )
    scale = cfg.value_scale * np.exp(z)
    p_channel = lo + (hi - lo) * _sigmoid(1.5 * context[:, 1])
    p_queue = lo + (hi - lo) * _sigmoid(1.5 * user[:, 2])
    p_model = lo + (hi - lo) * _sigmoid(1.5 * context[:, 2])
    model_floor = 0.25 + 0.5 * _sigmoid(1.5 * user[:, 3] + context[:, 2])
    fee_share = 0.15 + 0.2 * _sigmoid(context[:, 0])
    pools = rng.integers(POOL_RANGE[0], POOL_RANGE[1] + 1, size=(m, spec.channel_count)).astype(float)
    noise_seed = rng.integers(0, 2**63 - 1, size=m, dtype=np.int64).astype(np.uint64)

    c_chan, c_queue, c_model = phase_cost_grids(cfg)
    zeros = np.zeros(m)
    g = [
        _concave_factor(c_chan, c_chan.max(), p_channel, zeros),
        _concave_factor(c_queue, c_queue.max(), p_queue, zeros),
        _concave_factor(c_model, c_model.max(), p_model, model_floor),
    ]

    violators = rng.random(m) < cfg.violation_fraction
    if violators.any():
        rows = np.flatnonzero(violators)
        j = rng.integers(1, spec.queue_buckets, size=rows.size)
        dip = rng.uniform(0.6, 0.95, size=rows.size)
        g[1][rows, j] = g[1][rows, j - 1] * dip

    values = tuple(scale[:, None] * gt for gt in g)
    costs = tuple(np.tile(c, (m, 1)) for c in (c_chan, c_queue, c_model))
    return RequestSet(
        ids=np.arange(m, dtype=np.int64),
        user=user,
        context=context,
        slices=slices,
        scale=scale,
        values=values,
        costs=costs,
        fee_share=fee_share,
        pools=pools,
        noise_seed=noise_seed,
        cfg=cfg,
    )


def check_assumptions(req: SyntheticRequest, rtol: float = 1e-12) -> tuple[tuple[bool, bool], ...]:
    """Per phase: (value non-decreasing in cost, value/cost non-increasing in cost)."""
    out = []
    for values, costs in zip(req.values, req.costs):
        out.append(_check_phase(values[None, :], costs[None, :], rtol)[0])
    return tuple(out)


def _check_phase(values: np.ndarray, costs: np.ndarray, rtol: float) -> list[tuple[bool, bool]]:
    vi, vj = values[:, :, None], values[:, None, :]
    ci, cj = costs[:, :, None], costs[:, None, :]
    cheaper = ci < cj
    slack = rtol * np.maximum(np.abs(vi), np.abs(vj))
    a1 = ~np.any(cheaper & (vi > vj + slack), axis=(1, 2))
    positive = cheaper & (ci > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ri = np.where(ci > 0, vi / np.where(ci > 0, ci, 1.0), np.inf)
        rj = np.where(cj > 0, vj / np.where(cj > 0, cj, 1.0), np.inf)
        a2 = ~np.any(positive & (ri < rj - rtol * np.abs(rj)), axis=(1, 2))
    return list(zip(a1.tolist(), a2.tolist()))


def conforming_mask(requests: RequestSet, rtol: float = 1e-12) -> np.ndarray:
    """True where a request satisfies both monotonicity assumptions in every phase."""
    ok = np.ones(len(requests), dtype=bool)
    for values, costs in zip(requests.values, requests.costs):
        res = _check_phase(values, costs, rtol)
        ok &= np.array([a and b for a, b in res], dtype=bool)
    return ok


# --- noise -----------------------------------------------------------------

def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hashed_uniform(seed: np.ndarray, *keys: np.ndarray) -> np.ndarray:
    """Counter-based uniform draws in [0, 1); a pure function of its inputs."""
    h = _splitmix(np.asarray(seed, dtype=np.uint64))
    for k in keys:
        with np.errstate(over="ignore"):
            h = _splitmix(h ^ np.asarray(k).astype(np.int64).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


# --- states ----------------------------------------------------------------


@dataclass(frozen=True)
class PhaseState:
    """MDP state of one request before deciding ``phase`` (terminal at T + 1)."""

    phase: int
    request_id: int
    user: np.ndarray
    context: np.ndarray
    time_slice: int
    retrieved: float
    truncated: float
    score_quality: float
    history: tuple[int, ...]
    queue_len: Optional[float] = None

    def __post_init__(self):
        if len(self.history) != self.phase - 1:
            raise ConfigError("decision history length must equal phase - 1")

    @property
    def terminal(self) -> bool:
        return self.phase == NUM_PHASES + 1


def feature_dim(cfg: EnvConfig) -> int:
    spec = cfg.action_space
    return cfg.user_dim + cfg.context_dim + cfg.num_slices + NUM_PHASES + 3 + sum(spec.sizes) + 1


def summary_features(requests: RequestSet, idx: np.ndarray, phase: int, history: np.ndarray,
                     queue_len: Optional[np.ndarray] = None) -> np.ndarray:
    """(retrieved, truncated, score quality) for the ad list seen at ``phase``."""
    spec = requests.spec
    n = len(idx)
    out = np.zeros((n, 3))
    if phase > CHANNEL:
        ind = indicator_matrix(spec.channel_count)[history[:, 0]]
        out[:, 0] = (ind * requests.pools[idx]).sum(axis=1)
    if phase > QUEUE:
        if queue_len is None:
            queue_len = spec.queue_bucket_width * (history[:, 1] + 1)
        out[:, 1] = np.minimum(out[:, 0], queue_len)
    if phase > MODEL:
        out[:, 2] = history[:, 2] / max(spec.model_count - 1, 1)
    return out


def encode_states(requests: RequestSet, idx: np.ndarray, phase, history: np.ndarray,
                  queue_len: Optional[np.ndarray] = None) -> np.ndarray:
    """Fixed-length state vectors.

    Layout: user | context | one-hot slice | one-hot phase | ad-list summary |
    one-hot decision history (channel, queue, model blocks) | bias.
    ``phase`` may be a scalar or one phase per row.
    """
    cfg = requests.cfg
    spec = requests.spec
    idx = np.asarray(idx)
    n = len(idx)
    history = np.asarray(history).reshape(n, NUM_PHASES)
    phases = np.broadcast_to(np.asarray(phase), (n,))
    x = np.zeros((n, feature_dim(cfg)))
    col = 0
    x[:, col:col + cfg.user_dim] = requests.user[idx]
    col += cfg.user_dim
    x[:, col:col + cfg.context_dim] = requests.context[idx]
    col += cfg.context_dim
    x[np.arange(n), col + requests.slices[idx]] = 1.0
    col += cfg.num_slices
    x[np.arange(n), col + phases - 1] = 1.0
    col += NUM_PHASES
    summary = np.zeros((n, 3))
    for t in np.unique(phases):
        rows = np.flatnonzero(phases == t)
        ql = None if queue_len is None else np.asarray(queue_len)[rows]
        summary[rows] = summary_features(requests, idx[rows], int(t), history[rows], ql)
    summary[:, 0] /= POOL_RANGE[1] * spec.channel_count
    summary[:, 1] /= spec.max_queue_length
    x[:, col:col + 3] = summary
    col += 3
    for t, width in enumerate(spec.sizes):
        a = history[:, t]
        taken = a >= 0
        x[np.flatnonzero(taken), col + a[taken]] = 1.0
        col += width
    x[:, col] = 1.0
    return x


# --- rollouts --------------------------------------------------------------

Policy = Callable[[RequestSet, np.ndarray, int, np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass
class Trajectories:
    idx: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    queue_len: np.ndarray
    value: np.ndarray
    fee: np.ndarray
    price: np.ndarray

    @property
    def revenue(self) -> np.ndarray:
        return self.fee + self.price

    def phase_costs(self) -> np.ndarray:
        return np.array([math.fsum(self.costs[:, t]) for t in range(NUM_PHASES)])

    def total_return(self) -> float:
        return math.fsum(self.fee) + math.fsum(self.price)


def revenue_split(requests: RequestSet, idx: np.ndarray, value: np.ndarray, actions: np.ndarray,
                  queue_len: np.ndarray, noisy: bool) -> tuple[np.ndarray, np.ndarray]:
    if noisy and requests.cfg.noise_scale > 0:
        u = hashed_uniform(requests.noise_seed[idx], actions[:, 0], actions[:, 1], actions[:, 2],
                           np.round(queue_len).astype(np.int64))
        value = value * (1.0 + requests.cfg.noise_scale * (2.0 * u - 1.0))
    share = requests.fee_share[idx]
    return share * value, (1.0 - share) * value


def rollout(requests: RequestSet, policy: Policy, idx: Optional[np.ndarray] = None, noisy: bool = False,
            queue_cap=None, force_simple=None) -> Trajectories:
    """Run every row through Channel -> Queue -> Model under ``policy``.

    ``queue_cap`` (items, scalar or per row) and ``force_simple`` (bool, scalar
    or per row) apply the load-control clamp after the policy has decided.
    """
    spec = requests.spec
    if idx is None:
        idx = np.arange(len(requests))
    idx = np.asarray(idx)
    n = len(idx)
    history = np.full((n, NUM_PHASES), -1, dtype=np.int64)
    costs = np.zeros((n, NUM_PHASES))
    queue_len = None
    for t in range(1, NUM_PHASES + 1):
        a = np.asarray(policy(requests, idx, t, history, queue_len), dtype=np.int64)
        if a.shape != (n,) or (n and (a.min() < 0 or a.max() >= spec.size(t))):
            raise ConfigError(f"policy returned out-of-range actions for phase {t}")
        if t == QUEUE:
            a, queue_len = clamp_queue(a, spec, queue_cap)
            costs[:, t - 1] = queue_len * requests.cfg.queue_item_cost
        elif t == MODEL:
            if force_simple is not None:
                a = np.where(np.broadcast_to(force_simple, (n,)), 0, a)
            costs[:, t - 1] = requests.costs[t - 1][idx, a]
        else:
            costs[:, t - 1] = requests.costs[t - 1][idx, a]
        history[:, t - 1] = a
    value = requests.path_value(idx, history, queue_len)
    fee, price = revenue_split(requests, idx, value, history, queue_len, noisy)
    return Trajectories(idx=idx, actions=history, costs=costs, queue_len=queue_len, value=value, fee=fee, price=price)


def clamp_queue(buckets: np.ndarray, spec: ActionSpaceSpec, queue_cap=None) -> tuple[np.ndarray, np.ndarray]:
    """Cap truncation lengths at ``queue_cap`` items; returns (bucket, realized length)."""
    length = spec.queue_bucket_width * (buckets + 1.0)
    if queue_cap is None:
        return buckets, length
    cap = np.maximum(np.asarray(queue_cap, dtype=float), spec.queue_bucket_width)
    length = np.minimum(length, cap)
    capped_bucket = np.minimum(buckets, np.ceil(length / spec.queue_bucket_width).astype(np.int64) - 1)
    return capped_bucket, length


class SimEnv:
    """Single-request stepping API over a ``RequestSet``."""

    def __init__(self, requests: RequestSet):
        self.requests = requests
        self.spec = requests.spec
        self._row = {int(r): i for i, r in enumerate(requests.ids)}

    def _index(self, request_id: int) -> int:
        return self._row[int(request_id)]

    def initial_state(self, req) -> PhaseState:
        row = self._index(req.request_id if isinstance(req, SyntheticRequest) else req)
        return PhaseState(
            phase=1,
            request_id=int(self.requests.ids[row]),
            user=self.requests.user[row].copy(),
            context=self.requests.context[row].copy(),
            time_slice=int(self.requests.slices[row]),
            retrieved=0.0,
            truncated=0.0,
            score_quality=0.0,
            history=(),
        )

    def action_cost(self, state: PhaseState, action: int, queue_cap: Optional[float] = None) -> float:
        self._validate(state, action)
        row = self._index(state.request_id)
        if state.phase == QUEUE and queue_cap is not None:
            _, length = clamp_queue(np.array([action]), self.spec, queue_cap)
            return float(length[0] * self.requests.cfg.queue_item_cost)
        return float(self.requests.costs[state.phase - 1][row, action])

    def _validate(self, state: PhaseState, action: int) -> None:
        if state.terminal:
            raise ConfigError("cannot step a terminal state")
        if not 0 <= int(action) < self.spec.size(state.phase):
            raise ConfigError(f"action {action} out of range for phase {state.phase}")

    def step(self, state: PhaseState, action: int, noisy: bool = False,
             queue_cap: Optional[float] = None) -> tuple[PhaseState, Optional[RevenueOutcome]]:
        """Advance one phase; the terminal step also returns the revenue outcome."""
        self._validate(state, action)
        row = self._index(state.request_id)
        history = state.history + (int(action),)
        queue_len = state.queue_len
        if state.phase == QUEUE:
            _, ql = clamp_queue(np.array([int(action)]), self.spec, queue_cap)
            history = state.history + (int(min(int(action), int(np.ceil(ql[0] / self.spec.queue_bucket_width)) - 1)),)
            queue_len = float(ql[0])
        padded = np.full((1, NUM_PHASES), -1, dtype=np.int64)
        padded[0, : len(history)] = history
        ql_arr = None if queue_len is None else np.array([queue_len])
        summary = summary_features(self.requests, np.array([row]), state.phase + 1, padded, ql_arr)[0]
        nxt = replace(
            state,
            phase=state.phase + 1,
            retrieved=float(summary[0]),
            truncated=float(summary[1]),
            score_quality=float(summary[2]),
            history=history,
            queue_len=queue_len,
        )
        if not nxt.terminal:
            return nxt, None
        idx = np.array([row])
        value = self.requests.path_value(idx, padded, ql_arr)
        ql = ql_arr if ql_arr is not None else self.spec.queue_bucket_width * (padded[:, 1] + 1.0)
        fee, price = revenue_split(self.requests, idx, value, padded, ql, noisy)
        return nxt, RevenueOutcome(fee_ad=float(fee[0]), price_o=float(price[0]))

    def encode(self, state: PhaseState) -> np.ndarray:
        padded = np.full((1, NUM_PHASES), -1, dtype=np.int64)
        padded[0, : len(state.history)] = state.history
        ql = None if state.queue_len is None else np.array([state.queue_len])
        x = encode_states(self.requests, np.array([self._index(state.request_id)]), state.phase, padded, ql)[0]
        if not np.all(np.isfinite(x)):
            raise ConfigError("non-finite state features")
        return x


def initial_state(env: SimEnv, req) -> PhaseState:
    return env.initial_state(req)


def step(env: SimEnv, state: PhaseState, action: int, **kw):
    return env.step(state, action, **kw)
