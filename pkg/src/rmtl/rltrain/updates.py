"""TD targets, critic/actor update rules, loss-weight schedules, soft updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nncore
from ..backbones import ActorParams, actor_backward, actor_forward
from ..errors import NumericError, ShapeError, ValidationError
from ..mdpenv import Batch
from ..nncore import Adam, bce, bce_grad
from .critic import CriticParams, critic_backward, critic_forward_tasks

SCHEDULES = ("rmtl", "constant", "label_scaled", "negative_q", "decay")
SCHEDULE_ALIASES = {"cw": "constant", "wl": "label_scaled", "nlc": "negative_q"}


@dataclass(frozen=True)
class WeightSchedule:
    kind: str = "rmtl"
    lam: float = 0.7
    w0: float = 1.0
    gamma_prime: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "kind", SCHEDULE_ALIASES.get(self.kind, self.kind))
        if self.kind not in SCHEDULES:
            raise ValidationError(f"unknown weight schedule {self.kind!r}")
        if self.kind in ("rmtl", "label_scaled") and not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lambda must be in [0, 1]")
        if self.kind == "decay" and not (self.w0 >= 0 and 0 < self.gamma_prime <= 1):
            raise ValidationError("decay schedule needs w0 >= 0 and gamma_prime in (0, 1]")

    @property
    def uses_critic(self) -> bool:
        return self.kind in ("rmtl", "label_scaled", "negative_q")


def compute_weights(schedule: WeightSchedule, q, labels, steps):
    """Per-row, per-task loss weights ``omega`` (arrays shaped like ``q``)."""
    q = np.asarray(q, dtype=np.float64)
    if schedule.kind == "rmtl":
        return 1.0 - schedule.lam * q
    if schedule.kind == "constant":
        return np.ones_like(q)
    if schedule.kind == "label_scaled":
        return 1.0 - schedule.lam * np.asarray(labels, dtype=np.float64) * q
    if schedule.kind == "negative_q":
        return -q
    steps = np.asarray(steps, dtype=np.float64)
    w = schedule.w0 * schedule.gamma_prime ** steps
    return np.broadcast_to(w.reshape(-1, *([1] * (q.ndim - 1))), q.shape).copy()


# ---------------------------------------------------------------------------
# TD error and critic update
# ---------------------------------------------------------------------------

def td_targets(batch: Batch, target_actor: ActorParams, target_critic: CriticParams, gamma: float) -> np.ndarray:
    """``r_k + gamma * Q~(s', pi~(s'))`` per row and task; bootstrap is 0 at terminal steps."""
    if gamma == 0.0:
        return batch.rewards.copy()
    b1, b2, _ = actor_forward(target_actor, batch.next_states)
    q_next, _ = critic_forward_tasks(target_critic, batch.next_feats, {1: b1, 2: b2})
    boot = np.stack([q_next[1], q_next[2]], axis=1)
    boot[batch.done] = 0.0
    return batch.rewards + gamma * boot


def td_target(batch: Batch, target_actor, target_critic, k: int, gamma: float) -> np.ndarray:
    if k not in (1, 2):
        raise ValidationError("task index must be 1 or 2")
    return td_targets(batch, target_actor, target_critic, gamma)[:, k - 1]


@dataclass
class TdResult:
    delta: float  # batch-averaged signed TD error
    errors: np.ndarray  # (n, 2) TD - Q
    q: np.ndarray  # (n, 2) estimation critic on stored actions
    td: np.ndarray
    cache: object = field(repr=False, default=None)

    def gate_value(self, mode: str = "signed") -> float:
        """Quantity compared with epsilon: ``|delta|``, or the mean |TD - Q| in ``abs`` mode."""
        return float(np.mean(np.abs(self.errors))) if mode == "abs" else abs(self.delta)


def td_error_batch(batch: Batch, critic: CriticParams, target_actor: ActorParams,
                   target_critic: CriticParams, gamma: float) -> TdResult:
    if len(batch) == 0:
        raise ValidationError("empty batch")
    td = td_targets(batch, target_actor, target_critic, gamma)
    q, cache = critic_forward_tasks(critic, batch.feats, {1: batch.actions[:, 0], 2: batch.actions[:, 1]})
    qm = np.stack([q[1], q[2]], axis=1)
    errors = td - qm
    delta = float(errors.sum() / (2 * len(batch)))
    return TdResult(delta, errors, qm, td, cache)


def critic_gradients(critic: CriticParams, res: TdResult, mode: str = "pointwise") -> nncore.ArrayDict:
    """Semi-gradient of the TD fit.

    ``pointwise`` weights each ``grad Q_{k,t}`` by its own ``TD - Q``;
    ``batch`` uses the single averaged ``delta`` for every row.
    """
    n = len(res.q)
    if mode == "pointwise":
        scale = res.errors
    elif mode == "batch":
        scale = np.full_like(res.errors, res.delta)
    else:
        raise ValidationError(f"unknown critic update mode {mode!r}")
    g = -scale / (2 * n)
    grads, _ = critic_backward(critic, res.cache, {1: g[:, 0], 2: g[:, 1]})
    return grads


def critic_update(critic: CriticParams, opt: Adam, res: TdResult, mode: str = "pointwise") -> nncore.ArrayDict:
    """One Adam step that moves ``Q`` toward the TD targets."""
    grads = critic_gradients(critic, res, mode)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite critic gradient in {name}")
    opt.step(grads)
    return grads


# ---------------------------------------------------------------------------
# Actor updates
# ---------------------------------------------------------------------------

def weighted_loss(actor: ActorParams, states: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                  train_mode: bool = False, rng=None):
    """``sum_rows sum_k w_{k,t} BCE(a_k, y_k)`` and its gradients w.r.t. the actor."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(states), 2):
        raise ShapeError(f"weights must be ({len(states)}, 2), got {weights.shape}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValidationError("loss weights must be finite and nonnegative")
    a1, a2, cache = actor_forward(actor, states, train_mode, rng)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.sum(weights[:, 0] * bce(a1, y[:, 0]) + weights[:, 1] * bce(a2, y[:, 1])))
    grads, _ = actor_backward(actor, cache, weights[:, 0] * bce_grad(a1, y[:, 0]),
                              weights[:, 1] * bce_grad(a2, y[:, 1]))
    return loss, grads, (a1, a2)


def policy_objective(actor: ActorParams, critic: CriticParams, states, feats, train_mode=False, rng=None):
    """``J = -(1/b) sum_t sum_k Q(s_t, pi_k(s_t))`` and its gradient w.r.t. the actor."""
    a1, a2, cache = actor_forward(actor, states, train_mode, rng)
    q, ccache = critic_forward_tasks(critic, feats, {1: a1, 2: a2})
    n = len(states)
    j = -float((q[1].sum() + q[2].sum()) / n)
    _, g_a = critic_backward(critic, ccache, {1: np.full(n, -1.0 / n), 2: np.full(n, -1.0 / n)},
                             need_params=False)
    grads, _ = actor_backward(actor, cache, g_a[1], g_a[2])
    return j, grads, np.stack([q[1], q[2]], axis=1)


def actor_policy_update(actor: ActorParams, opt: Adam, critic: CriticParams, states, feats,
                        train_mode=False, rng=None):
    """Adam step descending ``J`` (i.e. ascending mean Q); the critic is untouched."""
    j, grads, q = policy_objective(actor, critic, states, feats, train_mode, rng)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite actor gradient in {name}")
    opt.step(grads)
    return j, q


# ---------------------------------------------------------------------------
# Target networks
# ---------------------------------------------------------------------------

def soft_update(target: nncore.ArrayDict, current: nncore.ArrayDict, beta: float):
    """``target <- beta * target + (1 - beta) * current``, in place."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError("beta must be in [0, 1]")
    if set(target) != set(current):
        raise ShapeError("target and current bundles differ")
    for name, t in target.items():
        c = current[name]
        if t.shape != c.shape:
            raise ShapeError(f"{name}: {t.shape} vs {c.shape}")
    for name, t in target.items():
        t *= beta
        t += (1.0 - beta) * current[name]
