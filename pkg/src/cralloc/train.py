"""Offline training: double Q-learning with a constraint layer and adaptive multipliers.

Each iteration samples a mini-batch of phase transitions, fits the online
network to double-Q targets, then runs ``K`` rounds of the multiplier update
on the same batch. The multipliers carry over between iterations. ``algo``
selects plain DDQN, discrete BCQ (imitation-masked argmax) or REM (random
convex mixture of heads per mini-batch).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import NUM_PHASES, BudgetSpec, ConfigError, LambdaVector, RewardWeights, greedy_actions
from .lambda_correct import evaluate_policy
from .qnet import (
    Adam,
    NonFiniteError,
    QNetworkParams,
    RemMixture,
    bcq_mask,
    head_outputs,
    init_params,
    rem_combine,
    save_params,
    td_loss_and_grads,
    trunk_forward,
)
from .simenv import PhaseState, RequestSet, encode_states, feature_dim, hashed_uniform, rollout, summary_features

logger = logging.getLogger(__name__)

ALGOS = ("ddqn", "bcq", "rem")
TAG_RANDOM, TAG_SUPERIOR = 0, 1


@dataclass
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 8192
    lambda_updates: int = 10
    lambda_lr: float = 0.1
    gamma: float = 0.99
    lr: float = 3e-4
    target_sync: int = 100
    bcq_threshold: float = 0.3
    algo: str = "ddqn"
    adaptive_lambda: bool = True
    num_heads: int = 64
    hidden: tuple[int, ...] = (128, 64)
    eval_interval: int = 5000
    imitation_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.lambda_updates < 0 or self.lambda_lr < 0:
            raise ConfigError("lambda_updates and lambda_lr must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must be in [0, 1]")
        if self.lr <= 0 or self.target_sync < 1 or self.eval_interval < 1:
            raise ConfigError("lr, target_sync and eval_interval must be positive")
        if not 0 <= self.bcq_threshold <= 1:
            raise ConfigError("bcq_threshold must be in [0, 1]")
        if self.num_heads < 1 or not self.hidden:
            raise ConfigError("need >= 1 head and >= 1 hidden layer")

    @property
    def heads(self) -> int:
        return self.num_heads if self.algo == "rem" else 1

    @property
    def mask_threshold(self) -> Optional[float]:
        return self.bcq_threshold if self.algo == "bcq" else None


# --- transitions -----------------------------------------------------------


@dataclass(frozen=True)
class TransitionRecord:
    state: PhaseState
    action: int
    reward: float
    next_state: PhaseState
    cost: float
    phase: int
    tag: int

    @property
    def done(self) -> bool:
        return self.next_state.terminal


@dataclass
class TransitionSet:
    """Flat arrays of phase transitions; row ``k`` is one ``TransitionRecord``."""

    requests: RequestSet
    req_idx: np.ndarray
    phase: np.ndarray
    history: np.ndarray   # decisions before ``phase``, -1 padded
    action: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    queue_len: np.ndarray  # realized truncation length of the episode
    tag: np.ndarray

    def __len__(self) -> int:
        return int(self.req_idx.shape[0])

    @property
    def done(self) -> np.ndarray:
        return self.phase == NUM_PHASES

    def next_history(self) -> np.ndarray:
        nxt = self.history.copy()
        nxt[np.arange(len(self)), self.phase - 1] = self.action
        return nxt

    def state_features(self) -> np.ndarray:
        return self._encode(self.phase, self.history)

    def next_features(self) -> np.ndarray:
        """Successor encodings; terminal rows get a placeholder that is never read."""
        return self._encode(np.minimum(self.phase + 1, NUM_PHASES), self.next_history())

    def _encode(self, phase, history) -> np.ndarray:
        # the queue summary only needs the realized length once the queue decision is in the history
        ql = np.where(history[:, 1] >= 0, self.queue_len, 0.0)
        return encode_states(self.requests, self.req_idx, phase, history, ql)

    def record(self, k: int) -> TransitionRecord:
        req = self.requests
        i = int(self.req_idx[k])
        t = int(self.phase[k])

        def state(phase, hist):
            ql = np.array([self.queue_len[k]])
            summary = summary_features(req, np.array([i]), phase, hist[None, :], ql)[0]
            return PhaseState(phase, int(req.ids[i]), req.user[i].copy(), req.context[i].copy(), int(req.slices[i]),
                              float(summary[0]), float(summary[1]), float(summary[2]),
                              tuple(int(a) for a in hist[: phase - 1]),
                              float(self.queue_len[k]) if phase > 2 else None)

        return TransitionRecord(state(t, self.history[k]), int(self.action[k]), float(self.reward[k]),
                                state(t + 1, self.next_history()[k]), float(self.cost[k]), t, int(self.tag[k]))

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for k in range(len(self)):
                fh.write(json.dumps({
                    "request": int(self.req_idx[k]), "phase": int(self.phase[k]),
                    "history": self.history[k].tolist(), "action": int(self.action[k]),
                    "reward": float(self.reward[k]), "cost": float(self.cost[k]),
                    "queue_len": float(self.queue_len[k]), "tag": int(self.tag[k]),
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path, requests: RequestSet) -> "TransitionSet":
        recs = []
        with open(path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        col = lambda k, dt: np.array([r[k] for r in recs], dtype=dt)  # noqa: E731
        hist = np.array([r["history"] for r in recs], dtype=np.int64).reshape(len(recs), NUM_PHASES)
        return cls(requests, col("request", np.int64), col("phase", np.int64), hist, col("action", np.int64),
                   col("reward", float), col("cost", float), col("queue_len", float), col("tag", np.int64))


def random_policy(seed: int):
    """Uniform random decisions, a pure function of (seed, request id, phase)."""

    def policy(requests, idx, phase, history, queue_len=None):
        u = hashed_uniform(np.full(len(idx), seed, dtype=np.uint64), requests.ids[idx], np.full(len(idx), phase))
        return np.minimum((u * requests.spec.size(phase)).astype(np.int64), requests.spec.size(phase) - 1)

    return policy


def collect_behavior_data(requests: RequestSet, superior=None, superior_fraction: float = 0.0,
                          num_requests: Optional[int] = None, weights: RewardWeights = RewardWeights(),
                          noisy: bool = True, seed: int = 0) -> TransitionSet:
    """Roll a behaviour mix through the simulator and log every phase transition.

    A ``superior_fraction`` share of requests follows ``superior``; the rest
    decide uniformly at random. Rewards are the noisy terminal revenue.
    """
    if not 0 <= superior_fraction <= 1:
        raise ConfigError("superior_fraction must be in [0, 1]")
    if superior_fraction > 0 and superior is None:
        raise ConfigError("a superior policy is required when superior_fraction > 0")
    m = len(requests) if num_requests is None else int(num_requests)
    if not 0 <= m <= len(requests):
        raise ConfigError(f"cannot collect {m} episodes from {len(requests)} requests")
    rng = np.random.default_rng(seed)
    idx = np.arange(m)
    tags = np.where(rng.random(m) < superior_fraction, TAG_SUPERIOR, TAG_RANDOM)
    parts = []
    for tag, policy in ((TAG_RANDOM, random_policy(seed)), (TAG_SUPERIOR, superior)):
        sel = idx[tags == tag]
        if sel.size:
            parts.append((tag, rollout(requests, policy, sel, noisy=noisy)))
    rows = []
    for tag, traj in parts:
        n = len(traj.idx)
        r = weights.k1 * traj.fee + weights.k2 * traj.price
        for t in range(1, NUM_PHASES + 1):
            hist = np.full((n, NUM_PHASES), -1, dtype=np.int64)
            hist[:, : t - 1] = traj.actions[:, : t - 1]
            rows.append(dict(req_idx=traj.idx, phase=np.full(n, t), history=hist, action=traj.actions[:, t - 1],
                             reward=r if t == NUM_PHASES else np.zeros(n), cost=traj.costs[:, t - 1],
                             queue_len=traj.queue_len, tag=np.full(n, tag)))
    if not rows:
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return TransitionSet(requests, zi, zi, np.zeros((0, NUM_PHASES), dtype=np.int64), zi, z, z, z, zi)
    cat = {k: np.concatenate([r[k] for r in rows]) for k in rows[0]}
    # episode-major order: request, then phase
    order = np.lexsort((cat["phase"], cat["req_idx"]))
    cat = {k: v[order] for k, v in cat.items()}
    return TransitionSet(requests, cat["req_idx"].astype(np.int64), cat["phase"].astype(np.int64),
                         cat["history"], cat["action"].astype(np.int64), cat["reward"], cat["cost"],
                         cat["queue_len"], cat["tag"].astype(np.int64))


# --- target, multiplier updates --------------------------------------------


def ddqn_target(rewards: np.ndarray, next_q_online: list, next_q_target: list,
                next_costs: list, next_rows: list, lam, gamma: float, masks: Optional[list] = None) -> np.ndarray:
    """Double-Q targets: calibrated argmax on the online net, plain value from the target net.

    The ``next_*`` lists hold one entry per successor phase; ``next_rows[j]``
    indexes the batch rows whose successor is that phase, and ``lam`` holds the
    successor phase's multiplier for each list entry. Rows listed nowhere are
    terminal and keep their reward as the target.
    """
    y = np.asarray(rewards, dtype=float).copy()
    for j, rows in enumerate(next_rows):
        if len(rows) == 0:
            continue
        mask = None if masks is None else masks[j]
        a = greedy_actions(next_q_online[j], next_costs[j], lam[j], mask)
        y[rows] += gamma * next_q_target[j][np.arange(len(rows)), a]
    return y


def adaptive_lambda_step(lam: float, cost_sum: float, budget: float, alpha: float) -> float:
    """One projected multiplier step: ``max(0, lam + alpha * (cost / budget - 1))``."""
    if not budget > 0:
        raise ConfigError("budget must be positive")
    return max(0.0, lam + alpha * (cost_sum / budget - 1.0))


def batch_budget(rate: float, n_states: int) -> float:
    return float(rate) * int(n_states)


@dataclass
class PhaseBatch:
    """Phase-``t`` rows of a mini-batch as seen by the multiplier loop."""

    q: np.ndarray
    costs: np.ndarray
    mask: Optional[np.ndarray] = None

    @property
    def rows(self) -> int:
        return self.q.shape[0]


def inner_lambda_loop(lam, batches: list, rates, rounds: int, alpha: float) -> np.ndarray:
    """``rounds`` synchronous updates of all multipliers on fixed q-values."""
    lam = np.array(lam, dtype=float)
    if rounds < 0:
        raise ConfigError("rounds must be >= 0")
    for _ in range(rounds):
        new = lam.copy()
        for t, b in enumerate(batches):
            if b is None or b.rows == 0:
                continue
            a = greedy_actions(b.q, b.costs, lam[t], b.mask)
            spent = math.fsum(b.costs[np.arange(b.rows), a])
            new[t] = adaptive_lambda_step(lam[t], spent, batch_budget(rates[t], b.rows), alpha)
        lam = new
    return lam


# --- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    params: QNetworkParams
    lam: LambdaVector
    telemetry: list[dict] = field(default_factory=list)
    lambda_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, NUM_PHASES)))
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    wall_time: float = 0.0
    target_params: Optional[QNetworkParams] = None


def _phase_blocks(params, h, phases, beta, threshold):
    """q-values (and masks) per phase for rows of a trunk activation."""
    out = []
    for t in range(1, NUM_PHASES + 1):
        rows = np.flatnonzero(phases == t)
        if rows.size == 0:
            out.append((rows, None, None))
            continue
        q = rem_combine(head_outputs(params, h[rows], t), beta)
        mask = bcq_mask(params, h[rows], t, threshold) if threshold is not None else None
        out.append((rows, q, mask))
    return out


def train(dataset: TransitionSet, cfg: TrainConfig, budgets: BudgetSpec = BudgetSpec(),
          eval_requests: Optional[RequestSet] = None, init: Optional[QNetworkParams] = None,
          lam0=None, checkpoint_dir=None) -> TrainResult:
    """Run ``cfg.iterations`` steps; telemetry rows every ``cfg.eval_interval`` steps."""
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    req = dataset.requests
    sizes = req.spec.sizes
    params = init if init is not None else init_params(
        feature_dim(req.cfg), sizes, cfg.hidden, cfg.heads, imitation=cfg.algo == "bcq", seed=cfg.seed)
    target = params.copy()
    opt = Adam(params, cfg.lr)
    lam = np.zeros(NUM_PHASES) if lam0 is None else np.array(lam0, dtype=float)
    rates = np.asarray(budgets.rates, dtype=float)
    threshold = cfg.mask_threshold

    xs = dataset.state_features()
    xn = dataset.next_features()
    done = dataset.done
    phases = dataset.phase
    next_phase = np.minimum(phases + 1, NUM_PHASES)
    cost_tables = [c[dataset.req_idx] for c in req.costs]
    n = len(dataset)

    telemetry: list[dict] = []
    lam_trace = np.zeros((cfg.iterations, NUM_PHASES))
    losses = np.zeros(cfg.iterations)
    uniform = RemMixture.uniform(params.num_heads)

    def evaluate(step, loss):
        if eval_requests is None:
            return
        ev = evaluate_policy(params, lam, eval_requests, budgets, threshold)
        for t in range(NUM_PHASES):
            telemetry.append(dict(step=step, phase=t + 1, utilization=float(ev.utilization[t]),
                                  ret=ev.total_return, lam=float(lam[t]), loss=loss))

    evaluate(0, float("nan"))
    for it in range(cfg.iterations):
        batch = rng.integers(0, n, size=min(cfg.batch_size, n)) if cfg.batch_size < n else np.arange(n)
        beta = RemMixture.sample(rng, params.num_heads) if cfg.algo == "rem" else uniform

        # targets from the successor states of the non-terminal rows
        live = batch[~done[batch]]
        y = dataset.reward[batch].copy()
        if live.size:
            h_on, _ = trunk_forward(params, xn[live])
            h_tg, _ = trunk_forward(target, xn[live])
            nq_on, nq_tg, ncost, nrows, nmask, nlam = [], [], [], [], [], []
            live_pos = np.flatnonzero(~done[batch])
            for t in range(2, NUM_PHASES + 1):
                sel = np.flatnonzero(next_phase[live] == t)
                if sel.size == 0:
                    continue
                nq_on.append(rem_combine(head_outputs(params, h_on[sel], t), beta))
                nq_tg.append(rem_combine(head_outputs(target, h_tg[sel], t), beta))
                ncost.append(cost_tables[t - 1][live[sel]])
                nrows.append(live_pos[sel])
                nmask.append(bcq_mask(params, h_on[sel], t, threshold) if threshold is not None else None)
                nlam.append(lam[t - 1])
            y = ddqn_target(y, nq_on, nq_tg, ncost, nrows, nlam, cfg.gamma, nmask)

        loss, grads = td_loss_and_grads(params, xs[batch], phases[batch], dataset.action[batch], y, beta,
                                        cfg.imitation_weight)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {it}")
        opt.step(params, grads)
        losses[it] = loss

        if cfg.adaptive_lambda and cfg.lambda_updates > 0:
            h, _ = trunk_forward(params, xs[batch])
            blocks = []
            for t, (rows, q, mask) in enumerate(_phase_blocks(params, h, phases[batch], beta, threshold), start=1):
                blocks.append(None if q is None else PhaseBatch(q, cost_tables[t - 1][batch[rows]], mask))
            lam = inner_lambda_loop(lam, blocks, rates, cfg.lambda_updates, cfg.lambda_lr)
            if not np.all(np.isfinite(lam)):
                raise NonFiniteError(f"non-finite multiplier at step {it}")
        lam_trace[it] = lam

        if (it + 1) % cfg.target_sync == 0:
            target = params.copy()
        if (it + 1) % cfg.eval_interval == 0:
            evaluate(it + 1, float(loss))
            if checkpoint_dir is not None:
                save_params(params, f"{checkpoint_dir}/step_{it + 1:07d}.npz",
                            {"lambda": lam.tolist(), "step": it + 1})

    return TrainResult(params, LambdaVector(tuple(lam)), telemetry, lam_trace, losses,
                       time.perf_counter() - started, target)


def write_telemetry(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "phase", "utilization", "return", "lambda", "loss"])
        for r in rows:
            w.writerow([r["step"], r["phase"], repr(r["utilization"]), repr(r["ret"]), repr(r["lam"]),
                        repr(r["loss"])])


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
