"""Domain types, action-space encodings and metric arithmetic.

Everything here is an immutable value object or a pure function, so the rest
of the package can pass these around freely between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NUM_PHASES = 3
CHANNEL, QUEUE, MODEL = 1, 2, 3
PHASE_NAMES = {CHANNEL: "channel", QUEUE: "queue", MODEL: "model"}


class ConfigError(ValueError):
    """Raised for any invalid configuration or out-of-range encoding input."""


@dataclass(frozen=True)
class ActionSpaceSpec:
    """Sizes of the three decision phases (Channel -> Queue -> Model)."""

    num_phases: int = NUM_PHASES
    channel_count: int = 1
    queue_buckets: int = 26
    queue_bucket_width: int = 10
    model_count: int = 2

    def __post_init__(self):
        if self.num_phases != NUM_PHASES:
            raise ConfigError(f"pipeline has exactly {NUM_PHASES} phases, got {self.num_phases}")
        for name in ("channel_count", "queue_buckets", "queue_bucket_width", "model_count"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def channel_strategies(self) -> int:
        return 2 ** self.channel_count

    @property
    def sizes(self) -> tuple[int, int, int]:
        """Action-space width per phase, (N_c, N_q, N_m)."""
        return (self.channel_strategies, self.queue_buckets, self.model_count)

    def size(self, phase: int) -> int:
        return self.sizes[phase - 1]

    @property
    def max_queue_length(self) -> int:
        return self.queue_bucket_width * self.queue_buckets

    def queue_lengths(self) -> np.ndarray:
        return self.queue_bucket_width * (np.arange(self.queue_buckets) + 1)


@dataclass(frozen=True)
class BudgetSpec:
    """Per-phase computation budgets.

    ``rates`` is the budget per request for each phase; the budget of a set of
    requests is ``rate * count``. ``slice_capacity`` optionally overrides this
    with a fixed capacity per (time slice, phase), which is how a constant
    system capacity meets time-varying traffic.
    """

    rates: tuple[float, ...] = (0.5, 1.3, 0.5)
    slice_capacity: Optional[tuple[tuple[float, ...], ...]] = None

    def __post_init__(self):
        if len(self.rates) != NUM_PHASES:
            raise ConfigError("one budget rate per phase is required")
        if any(not r > 0 for r in self.rates):
            raise ConfigError(f"budget rates must be positive, got {self.rates}")
        if self.slice_capacity is not None:
            for row in self.slice_capacity:
                if len(row) != NUM_PHASES or any(not c > 0 for c in row):
                    raise ConfigError("slice capacities must be positive, one per phase")

    def budget(self, phase: int, n_requests: int, slice_index: Optional[int] = None) -> float:
        if self.slice_capacity is not None and slice_index is not None:
            return float(self.slice_capacity[slice_index][phase - 1])
        return float(self.rates[phase - 1]) * n_requests

    def budgets(self, n_requests: int, slice_index: Optional[int] = None) -> np.ndarray:
        return np.array([self.budget(t, n_requests, slice_index) for t in range(1, NUM_PHASES + 1)])


@dataclass(frozen=True)
class RewardWeights:
    k1: float = 1.0  # advertising fee
    k2: float = 1.0  # order price

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ConfigError("reward weights must be non-negative")
        if self.k1 == 0 and self.k2 == 0:
            raise ConfigError("reward weights cannot both be zero")


@dataclass(frozen=True)
class LambdaVector:
    """Non-negative Lagrange multipliers, one per phase."""

    values: tuple[float, ...] = (0.0, 0.0, 0.0)
    slice_index: Optional[int] = None

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != NUM_PHASES:
            raise ConfigError("one multiplier per phase is required")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConfigError(f"multipliers must be finite and >= 0, got {vals}")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, phase: int) -> float:
        return self.values[phase - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


@dataclass(frozen=True)
class RevenueOutcome:
    fee_ad: float
    price_o: float

    def __post_init__(self):
        if self.fee_ad < 0 or self.price_o < 0:
            raise ConfigError("revenue components must be non-negative")


def strategy_number(indicator: Sequence[int], channel_count: Optional[int] = None) -> int:
    """Big-endian binary value of a retrieval indicator, e.g. (0, 1, 1) -> 3."""
    bits = [int(b) for b in indicator]
    if channel_count is not None and len(bits) != channel_count:
        raise ConfigError(f"indicator has length {len(bits)}, expected {channel_count}")
    if any(b not in (0, 1) for b in bits):
        raise ConfigError(f"indicator must be a bit vector, got {tuple(indicator)}")
    number = 0
    for b in bits:
        number = (number << 1) | b
    return number


def strategy_indicator(number: int, channel_count: int) -> tuple[int, ...]:
    if not 0 <= number < 2 ** channel_count:
        raise ConfigError(f"strategy {number} out of range for {channel_count} channels")
    return tuple((number >> (channel_count - 1 - k)) & 1 for k in range(channel_count))


def indicator_matrix(channel_count: int) -> np.ndarray:
    """Row s is the indicator vector of strategy s."""
    return np.array([strategy_indicator(s, channel_count) for s in range(2 ** channel_count)], dtype=float)


def queue_action_length(bucket_index: int, spec: ActionSpaceSpec = ActionSpaceSpec()) -> int:
    if not 0 <= bucket_index < spec.queue_buckets:
        raise ConfigError(f"queue bucket {bucket_index} outside [0, {spec.queue_buckets})")
    return spec.queue_bucket_width * (bucket_index + 1)


def reward(outcome: RevenueOutcome, w: RewardWeights = RewardWeights()) -> float:
    return w.k1 * outcome.fee_ad + w.k2 * outcome.price_o


@dataclass(frozen=True)
class CostReport:
    total: float
    utilization: tuple[float, ...]


def cost_metric(realized: Sequence[float], budgets: Sequence[float]) -> CostReport:
    """Summed over-budget metric ``sum_t (C_hat_t / C_t - 1)`` plus per-phase utilizations."""
    realized = [float(c) for c in realized]
    budgets = [float(b) for b in budgets]
    if len(realized) != len(budgets):
        raise ConfigError("one realized cost per phase budget is required")
    if any(b == 0 for b in budgets):
        raise ConfigError("zero budget")
    util = tuple(c / b for c, b in zip(realized, budgets))
    return CostReport(total=sum(u - 1.0 for u in util), utilization=util)


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    if expert_score == random_score:
        raise ConfigError("degenerate normalization anchors: expert_score == random_score")
    return 100.0 * (score - random_score) / (expert_score - random_score)


def greedy_actions(values: np.ndarray, costs: np.ndarray, lam, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise argmax of ``values - lam * costs``; ties go to the cheaper action.

    ``lam`` may be a scalar or one multiplier per row. Masked-out actions
    (``mask == False``) are never chosen.
    """
    values = np.asarray(values, dtype=float)
    costs = np.broadcast_to(np.asarray(costs, dtype=float), values.shape)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ConfigError("multiplier must be non-negative")
    if lam.ndim == 1:
        lam = lam[:, None]
    calibrated = values - lam * costs
    if mask is not None:
        calibrated = np.where(mask, calibrated, -np.inf)
    best = calibrated.max(axis=1, keepdims=True)
    tied_cost = np.where(calibrated == best, costs, np.inf)
    return np.argmin(tied_cost, axis=1)
