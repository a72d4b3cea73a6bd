"""Multi-phase Q-network in plain numpy.

A shared ReLU trunk feeds one output block per phase; the selection unit picks
the block of the phase being decided. Each block holds ``H`` heads (``H = 1``
for DDQN/BCQ, ``H > 1`` for REM), combined by a convex mixture. An optional
imitation block per phase supports discrete BCQ masking.

Gradients are hand-written reverse mode; tests check them against central
finite differences.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import NUM_PHASES, ConfigError, greedy_actions

CHECKPOINT_VERSION = 1
SIMPLEX_TOL = 1e-9


class NonFiniteError(FloatingPointError):
    """Non-finite input, loss or gradient."""


@dataclass
class QNetworkParams:
    tensors: dict[str, np.ndarray]
    sizes: tuple[int, int, int]
    hidden: tuple[int, ...]
    num_heads: int = 1
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.tensors["trunk.0.W"].shape[0]

    @property
    def has_imitation(self) -> bool:
        return "imit.1.W" in self.tensors

    def copy(self) -> "QNetworkParams":
        return QNetworkParams({k: v.copy() for k, v in self.tensors.items()}, self.sizes, self.hidden,
                              self.num_heads, self.activation)

    def layer_names(self) -> list[str]:
        return [k[:-2] for k in self.tensors if k.endswith(".W")]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(input_dim: int, sizes: Sequence[int], hidden: Sequence[int] = (128, 64), num_heads: int = 1,
                imitation: bool = False, seed: int = 0, scale: float = 1.0) -> QNetworkParams:
    """Uniform ``+-scale/sqrt(fan_in)`` weights and zero biases, seeded."""
    if num_heads < 1:
        raise ConfigError("need at least one head")
    if len(sizes) != NUM_PHASES:
        raise ConfigError("one action-space size per phase")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    fan_in = input_dim
    for i, width in enumerate(hidden):
        bound = scale / np.sqrt(fan_in)
        tensors[f"trunk.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, width))
        tensors[f"trunk.{i}.b"] = np.zeros(width)
        fan_in = width
    bound = scale / np.sqrt(fan_in)
    for t, n in enumerate(sizes, start=1):
        tensors[f"head.{t}.W"] = rng.uniform(-bound, bound, size=(fan_in, num_heads * n))
        tensors[f"head.{t}.b"] = np.zeros(num_heads * n)
    if imitation:
        for t, n in enumerate(sizes, start=1):
            tensors[f"imit.{t}.W"] = rng.uniform(-bound, bound, size=(fan_in, n))
            tensors[f"imit.{t}.b"] = np.zeros(n)
    return QNetworkParams(tensors, tuple(int(s) for s in sizes), tuple(int(h) for h in hidden), int(num_heads))


# --- forward ---------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")


def trunk_forward(params: QNetworkParams, x: np.ndarray):
    """Shared feature layers; returns the last activation and a backprop cache."""
    acts = [x]
    pres = []
    h = x
    for i in range(len(params.hidden)):
        z = h @ params.tensors[f"trunk.{i}.W"] + params.tensors[f"trunk.{i}.b"]
        h = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(h)
    return h, (acts, pres)


def head_outputs(params: QNetworkParams, h: np.ndarray, phase: int) -> np.ndarray:
    """Per-head q-values of one phase, shape ``(n, H, N_t)``."""
    out = h @ params.tensors[f"head.{phase}.W"] + params.tensors[f"head.{phase}.b"]
    return out.reshape(h.shape[0], params.num_heads, params.sizes[phase - 1])


def imitation_logits(params: QNetworkParams, h: np.ndarray, phase: int) -> np.ndarray:
    return h @ params.tensors[f"imit.{phase}.W"] + params.tensors[f"imit.{phase}.b"]


@dataclass(frozen=True)
class RemMixture:
    """Convex weights over the ``H`` heads of a phase block."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or np.any(beta < -SIMPLEX_TOL) or abs(beta.sum() - 1.0) > SIMPLEX_TOL:
            raise ConfigError(f"mixture weights must lie on the simplex, got sum {beta.sum()!r}")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def uniform(cls, num_heads: int) -> "RemMixture":
        return cls(np.full(num_heads, 1.0 / num_heads))

    @classmethod
    def sample(cls, rng: np.random.Generator, num_heads: int) -> "RemMixture":
        w = rng.uniform(0.0, 1.0, size=num_heads)
        return cls(w / w.sum())


def rem_combine(per_head: np.ndarray, beta) -> np.ndarray:
    """``sum_h beta_h Q^h`` over the head axis (second to last)."""
    if not isinstance(beta, RemMixture):
        beta = RemMixture(beta)
    per_head = np.asarray(per_head, dtype=float)
    if per_head.shape[-2] != beta.beta.shape[0]:
        raise ConfigError("mixture length does not match the number of heads")
    return np.einsum("...ha,h->...a", per_head, beta.beta)


def constraint_layer(q: np.ndarray, costs: np.ndarray, lam) -> np.ndarray:
    """Calibrated values ``Q - lambda * Cost``; ``lam`` is a scalar or one per row."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ConfigError("multiplier must be non-negative")
    if lam.ndim == 1:
        lam = lam[:, None]
    return np.asarray(q, dtype=float) - lam * np.asarray(costs, dtype=float)


def forward(params: QNetworkParams, x: np.ndarray, phase: int, beta: Optional[RemMixture] = None) -> np.ndarray:
    """Mixture q-values of ``phase`` for each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_finite(x, "input")
    h, _ = trunk_forward(params, x)
    if beta is None:
        beta = RemMixture.uniform(params.num_heads)
    return rem_combine(head_outputs(params, h, phase), beta)


def bcq_mask(params: QNetworkParams, h: np.ndarray, phase: int, threshold: float) -> np.ndarray:
    """Admissible actions: behaviour probability at least ``threshold`` times the max."""
    logits = imitation_logits(params, h, phase)
    logits = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    mask = prob >= threshold * prob.max(axis=1, keepdims=True)
    # the most likely action is always admissible
    mask[np.arange(len(mask)), prob.argmax(axis=1)] = True
    return mask


def policy_values(params: QNetworkParams, x: np.ndarray, phase: int, beta: Optional[RemMixture] = None,
                  bcq_threshold: Optional[float] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Q-values plus the BCQ admissibility mask (None unless BCQ is active)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_finite(x, "input")
    h, _ = trunk_forward(params, x)
    if beta is None:
        beta = RemMixture.uniform(params.num_heads)
    q = rem_combine(head_outputs(params, h, phase), beta)
    mask = None
    if bcq_threshold is not None and params.has_imitation:
        mask = bcq_mask(params, h, phase, bcq_threshold)
    return q, mask


def act(params: QNetworkParams, lam, x: np.ndarray, phase: int, costs: np.ndarray,
        beta: Optional[RemMixture] = None, bcq_threshold: Optional[float] = None) -> np.ndarray:
    """Greedy action on calibrated q-values; ties go to the lower-cost action."""
    q, mask = policy_values(params, x, phase, beta, bcq_threshold)
    return greedy_actions(q, np.broadcast_to(costs, q.shape), lam, mask)


# --- loss and gradients ----------------------------------------------------


def td_loss_and_grads(params: QNetworkParams, x: np.ndarray, phases: np.ndarray, actions: np.ndarray,
                      targets: np.ndarray, beta: Optional[RemMixture] = None,
                      imitation_weight: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared TD error (plus BCQ imitation cross-entropy) and its exact gradient.

    ``targets`` are constants: no gradient flows into whatever produced them.
    """
    x = np.asarray(x, dtype=float)
    targets = np.asarray(targets, dtype=float)
    _check_finite(x, "input")
    _check_finite(targets, "targets")
    n = x.shape[0]
    if beta is None:
        beta = RemMixture.uniform(params.num_heads)
    h, (acts, pres) = trunk_forward(params, x)
    grads = params.zeros_like()
    dh = np.zeros_like(h)
    loss = 0.0
    H = params.num_heads
    for t in range(1, NUM_PHASES + 1):
        rows = np.flatnonzero(phases == t)
        if rows.size == 0:
            continue
        ht = h[rows]
        nt = params.sizes[t - 1]
        out = head_outputs(params, ht, t)
        q = rem_combine(out, beta)
        a = actions[rows]
        err = q[np.arange(rows.size), a] - targets[rows]
        loss += float(err @ err) / n
        dq = 2.0 * err / n
        dout = np.zeros((rows.size, H, nt))
        dout[np.arange(rows.size), :, a] = dq[:, None] * beta.beta[None, :]
        dout = dout.reshape(rows.size, H * nt)
        grads[f"head.{t}.W"] += ht.T @ dout
        grads[f"head.{t}.b"] += dout.sum(axis=0)
        dh[rows] += dout @ params.tensors[f"head.{t}.W"].T
        if params.has_imitation and imitation_weight > 0:
            logits = imitation_logits(params, ht, t)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss += -imitation_weight * float(logp[np.arange(rows.size), a].sum()) / n
            dlogits = np.exp(logp)
            dlogits[np.arange(rows.size), a] -= 1.0
            dlogits *= imitation_weight / n
            grads[f"imit.{t}.W"] += ht.T @ dlogits
            grads[f"imit.{t}.b"] += dlogits.sum(axis=0)
            dh[rows] += dlogits @ params.tensors[f"imit.{t}.W"].T
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    for i in reversed(range(len(params.hidden))):
        dz = dh * (pres[i] > 0)
        grads[f"trunk.{i}.W"] = acts[i].T @ dz
        grads[f"trunk.{i}.b"] = dz.sum(axis=0)
        dh = dz @ params.tensors[f"trunk.{i}.W"].T
    return loss, grads


def td_loss(params: QNetworkParams, x, phases, actions, targets, beta=None, imitation_weight: float = 1.0) -> float:
    """Loss only; used by the finite-difference checks."""
    return td_loss_and_grads(params, x, phases, actions, targets, beta, imitation_weight)[0]


def gradients(params: QNetworkParams, x, phases, actions, targets, beta=None,
              imitation_weight: float = 1.0) -> dict[str, np.ndarray]:
    return td_loss_and_grads(params, x, phases, actions, targets, beta, imitation_weight)[1]


class Adam:
    def __init__(self, params: QNetworkParams, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: QNetworkParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {k}")
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.tensors[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoints -----------------------------------------------------------


def save_params(params: QNetworkParams, path, extra: Optional[dict] = None) -> None:
    """``.npz`` archive of all tensors plus a JSON manifest of shapes and metadata."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "sizes": list(params.sizes),
        "hidden": list(params.hidden),
        "num_heads": params.num_heads,
        "activation": params.activation,
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8), **params.tensors)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> tuple[QNetworkParams, dict]:
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
        tensors = {k: z[k].copy() for k in manifest["shapes"]}
    for k, shape in manifest["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ConfigError(f"shape mismatch for {k}")
    params = QNetworkParams(tensors, tuple(manifest["sizes"]), tuple(manifest["hidden"]),
                            manifest["num_heads"], manifest["activation"])
    return params, manifest["extra"]
