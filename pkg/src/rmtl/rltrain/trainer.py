"""Pretraining, the actor-critic retraining loop and experiment drivers.

Random streams (all derived from ``Hyperparams.seed``):

``init``        parameter initialization
``pretrain``    row shuffling during pretraining
``pt_dropout``  dropout masks during pretraining
``critic_fit``  batch sampling while the actor is frozen
``sample``      batch sampling in the retraining loop
``dropout``     dropout masks in the retraining loop
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import nncore
from ..backbones import MtlModel, init_model, model_backward, model_forward
from ..config import Hyperparams
from ..errors import DivergenceError, SchemaMismatchError, ValidationError
from ..mdpenv import ReplayBuffer, build_episodes
from ..metrics import MetricReport, PredictionDump, evaluate_dump
from ..nncore import Adam, bce, bce_grad
from ..sessiondata import SessionDataset, Standardizer, split_by_time
from .critic import CriticArch, CriticParams, init_critic
from .updates import (
    WeightSchedule,
    actor_policy_update,
    compute_weights,
    critic_update,
    soft_update,
    td_error_batch,
    weighted_loss,
)

log = logging.getLogger(__name__)

STREAMS = ("init", "pretrain", "pt_dropout", "critic_fit", "sample", "dropout")


@dataclass(frozen=True)
class Method:
    schedule: str  # weight schedule of the weighted-loss branch
    policy_gradient: str  # "never", "gated" (|delta| >= eps) or "always"
    fits_critic: bool


METHODS = {
    "cw": Method("constant", "never", False),
    "decay": Method("decay", "never", False),
    "rmtl": Method("rmtl", "gated", True),
    "wl": Method("label_scaled", "gated", True),
    "nlc": Method("negative_q", "gated", True),
    "dple": Method("constant", "always", True),
}


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    return nncore.spawn_rngs(seed, STREAMS)


def snapshot(arrays: nncore.ArrayDict) -> nncore.ArrayDict:
    return {k: v.copy() for k, v in arrays.items()}


def _check_finite(arrays: nncore.ArrayDict, what: str):
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"{what} parameter {k} became non-finite")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_dataset(model: MtlModel, ds: SessionDataset) -> PredictionDump:
    a1, a2 = model.predict(ds.features())
    return PredictionDump.from_rows(ds.session_index(), ds.step_index(), a1, a2, ds.labels())


def evaluate(model: MtlModel, ds: SessionDataset, tag: str = "", seed: int = 0, split: str = "test") -> MetricReport:
    return evaluate_dump(predict_dataset(model, ds), tag, seed, split)


def selection_score(rep: MetricReport) -> float:
    return 0.5 * (rep.values["ctr"]["auc"] + rep.values["ctcvr"]["auc"])


def _metric_fields(rep: MetricReport, prefix: str) -> dict:
    return {f"{prefix}_{task}_{m}": v for task, ms in rep.values.items() for m, v in ms.items()}


# ---------------------------------------------------------------------------
# Pretraining (plain multi-task training, constant weights)
# ---------------------------------------------------------------------------

def pretrain_actor(model: MtlModel, train: SessionDataset, val: SessionDataset | None, hp: Hyperparams,
                   rngs: dict, epochs: int | None = None, history: list | None = None) -> MtlModel:
    """Train state network and actor end to end with unit weights.

    Keeps the parameters of the best validation epoch (mean AUC over both
    tasks) and stops after ``hp.patience`` epochs without improvement.
    """
    epochs = hp.pretrain_epochs if epochs is None else epochs
    if epochs == 0 or train.n_rows == 0:
        return model
    arrays = model.named_arrays()
    opt = Adam(arrays, lr=hp.alpha_theta)
    feats, labels = train.features(), train.labels().astype(np.float64)
    n = len(labels)
    best, best_score, stale = None, -math.inf, 0
    for epoch in range(1, epochs + 1):
        order = rngs["pretrain"].permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            a1, a2, cache = model_forward(model, feats.take(idx), True, rngs["pt_dropout"])
            y = labels[idx]
            loss = float(np.sum(bce(a1, y[:, 0]) + bce(a2, y[:, 1])))
            if loss / (2 * len(idx)) > hp.loss_guard or not math.isfinite(loss):
                raise DivergenceError(f"pretraining loss {loss} exceeded the guard")
            opt.step(model_backward(model, cache, bce_grad(a1, y[:, 0]), bce_grad(a2, y[:, 1])))
            total += loss
        row = {"phase": "pretrain", "epoch": epoch, "train_loss": total / (2 * n)}
        if val is not None and val.n_rows:
            rep = evaluate(model, val, split="val")
            score = selection_score(rep)
            row.update(_metric_fields(rep, "val"))
            if score > best_score:
                best, best_score, stale = snapshot(arrays), score, 0
            else:
                stale += 1
        if history is not None:
            history.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
        if val is not None and stale >= hp.patience:
            break
    if best is not None:
        nncore.assign_arrays(arrays, best)
    return model


# ---------------------------------------------------------------------------
# Actor-critic retraining
# ---------------------------------------------------------------------------

@dataclass
class TargetPair:
    actor: object
    critic: CriticParams | None


@dataclass
class WeightAudit:
    """Counts of weight / Q-value bound checks over a run."""

    n_weights: int = 0
    n_q: int = 0
    rmtl_below_one: int = 0
    nlc_negative: int = 0
    q_positive: int = 0
    min_weight: float = math.inf
    max_q: float = -math.inf

    @property
    def violations(self) -> int:
        return self.rmtl_below_one + self.nlc_negative + self.q_positive

    def check_q(self, q: np.ndarray):
        self.n_q += q.size
        self.q_positive += int(np.sum(q > 0))
        self.max_q = max(self.max_q, float(q.max()))

    def check_weights(self, kind: str, w: np.ndarray):
        self.n_weights += w.size
        self.min_weight = min(self.min_weight, float(w.min()))
        if kind == "rmtl":
            self.rmtl_below_one += int(np.sum(w < 1.0))
        elif kind == "negative_q":
            self.nlc_negative += int(np.sum(w < 0.0))


@dataclass
class RLResult:
    model: MtlModel
    critic: CriticParams | None
    targets: TargetPair
    history: list[dict] = field(default_factory=list)
    audit: WeightAudit = field(default_factory=WeightAudit)
    best_epoch: int = 0
    n_policy_steps: int = 0
    n_weighted_steps: int = 0


def _fresh_buffer(model: MtlModel, train: SessionDataset, hp: Hyperparams, rng) -> ReplayBuffer:
    buf = ReplayBuffer(hp.buffer_capacity or None, rng)
    for ep in build_episodes(train, model):
        buf.store(ep)
    return buf


def _n_batches(buf: ReplayBuffer, batch_size: int) -> int:
    return max(1, math.ceil(buf.n_transitions / batch_size))


def fit_critic(model: MtlModel, critic: CriticParams, targets: TargetPair, train: SessionDataset,
               hp: Hyperparams, rng, critic_opt: Adam | None = None, history: list | None = None,
               audit: WeightAudit | None = None) -> Adam:
    """Critic-only phase with the actor frozen; stops once the epoch-mean gate value < epsilon."""
    critic_opt = critic_opt or Adam(critic.named_arrays(), lr=hp.alpha_phi)
    if hp.max_critic_epochs == 0:
        return critic_opt
    buf = _fresh_buffer(model, train, hp, rng)
    actor_arrays, critic_arrays = model.actor.named_arrays(), critic.named_arrays()
    t_actor, t_critic = targets.actor.named_arrays(), targets.critic.named_arrays()
    for epoch in range(1, hp.max_critic_epochs + 1):
        gates, deltas = [], []
        for _ in range(_n_batches(buf, hp.batch_size)):
            batch = buf.sample(hp.batch_size)
            res = td_error_batch(batch, critic, targets.actor, targets.critic, hp.gamma)
            if audit is not None:
                audit.check_q(res.q)
            critic_update(critic, critic_opt, res, hp.critic_update_mode)
            soft_update(t_critic, critic_arrays, hp.beta)
            soft_update(t_actor, actor_arrays, hp.beta)
            gates.append(res.gate_value(hp.delta_mode))
            deltas.append(res.delta)
        _check_finite(critic_arrays, "critic")
        gate = float(np.mean(gates))
        row = {"phase": "critic_fit", "epoch": epoch, "delta": float(np.mean(deltas)), "delta_gate": gate}
        if history is not None:
            history.append(row)
        log.info("critic fit epoch %d: %s", epoch, row)
        if gate < hp.epsilon:
            break
    return critic_opt


StepHook = Callable[[int, str, MtlModel], None]


def train_rl(model: MtlModel, train: SessionDataset, val: SessionDataset, hp: Hyperparams,
             method: str = "rmtl", critic: CriticParams | None = None, rngs: dict | None = None,
             fit_critic_first: bool = True, on_step: StepHook | None = None,
             fitted: tuple | None = None) -> RLResult:
    """Actor-critic retraining of a (pretrained) model.

    Per batch: TD error from the target networks, one critic step, then one
    actor step -- the policy-gradient branch when the gate value is at least
    epsilon (``gated``) or always (``always``), otherwise the weighted BCE
    branch -- followed by soft updates of both targets.  The state network
    stays frozen; the actor of the best validation epoch is returned.

    ``fitted`` may carry ``(critic, targets, critic_opt, history)`` from an
    earlier :func:`fit_critic` on the same pretrained model to skip that phase.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    spec = METHODS[method]
    rngs = rngs or rng_streams(hp.seed)
    schedule = WeightSchedule(spec.schedule, hp.lam, hp.decay_w0, hp.gamma_prime)
    history: list[dict] = []
    audit = WeightAudit()
    uses_critic = spec.fits_critic or spec.policy_gradient != "never"
    critic_opt = None
    if uses_critic and fitted is not None:
        critic, targets, critic_opt, fit_hist = copy.deepcopy(fitted)
        history.extend(fit_hist)
    else:
        if uses_critic:
            if critic is None:
                critic = init_critic(model.schema, rngs["init"], CriticArch.from_hyperparams(hp))
            elif critic.schema != model.schema:
                raise SchemaMismatchError("critic and backbone use different feature schemas")
        targets = TargetPair(copy.deepcopy(model.actor), copy.deepcopy(critic) if critic is not None else None)
        if uses_critic:
            critic_opt = Adam(critic.named_arrays(), lr=hp.alpha_phi)
            if fit_critic_first:
                fit_critic(model, critic, targets, train, hp, rngs["critic_fit"], critic_opt, history, audit)

    result = RLResult(model, critic, targets, history, audit)
    actor_arrays = model.actor.named_arrays()
    actor_opt = Adam(actor_arrays, lr=hp.alpha_theta)
    t_actor = targets.actor.named_arrays()
    critic_arrays = critic.named_arrays() if critic is not None else None
    t_critic = targets.critic.named_arrays() if critic is not None else None
    best, best_score = None, -math.inf
    step = 0
    for epoch in range(1, hp.rl_epochs + 1):
        buf = _fresh_buffer(model, train, hp, rngs["sample"])
        losses, deltas, n_pg, n_wl = [], [], 0, 0
        for _ in range(_n_batches(buf, hp.batch_size)):
            batch = buf.sample(hp.batch_size)
            res = None
            if uses_critic:
                res = td_error_batch(batch, critic, targets.actor, targets.critic, hp.gamma)
                audit.check_q(res.q)
                critic_update(critic, critic_opt, res, hp.critic_update_mode)
                deltas.append(res.delta)
            pg = spec.policy_gradient == "always" or (
                spec.policy_gradient == "gated" and res.gate_value(hp.delta_mode) >= hp.epsilon)
            if pg:
                actor_policy_update(model.actor, actor_opt, critic, batch.states, batch.feats,
                                    True, rngs["dropout"])
                n_pg += 1
                branch = "policy"
            else:
                q = res.q if res is not None else np.zeros_like(batch.rewards)
                w = compute_weights(schedule, q, batch.labels, batch.steps)
                if schedule.uses_critic:
                    audit.check_weights(schedule.kind, w)
                loss, grads, _ = weighted_loss(model.actor, batch.states, batch.labels, w,
                                               True, rngs["dropout"])
                mean_loss = loss / (2 * len(batch))
                if mean_loss > hp.loss_guard or not math.isfinite(loss):
                    raise DivergenceError(f"weighted loss {mean_loss} exceeded the guard")
                actor_opt.step(grads)
                losses.append(mean_loss)
                n_wl += 1
                branch = "weighted"
            soft_update(t_actor, actor_arrays, hp.beta)
            if critic is not None:
                soft_update(t_critic, critic_arrays, hp.beta)
            _check_finite(actor_arrays, "actor")
            step += 1
            if on_step is not None:
                on_step(step, branch, model)
        if critic_arrays is not None:
            _check_finite(critic_arrays, "critic")
        result.n_policy_steps += n_pg
        result.n_weighted_steps += n_wl
        rep = evaluate(model, val, split="val")
        row = {"phase": "rl", "epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "delta": float(np.mean(deltas)) if deltas else float("nan"),
               "policy_steps": n_pg, "weighted_steps": n_wl, **_metric_fields(rep, "val")}
        history.append(row)
        log.info("%s epoch %d: %s", method, epoch, row)
        score = selection_score(rep)
        if score > best_score:
            best, best_score, result.best_epoch = snapshot(actor_arrays), score, epoch
    if best is not None:
        nncore.assign_arrays(actor_arrays, best)
    return result


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

@dataclass
class Splits:
    train: SessionDataset
    val: SessionDataset
    test: SessionDataset
    standardizer: Standardizer


def prepare_splits(ds: SessionDataset, ratios=(6, 2, 2)) -> Splits:
    """Time split, then standardize numerical features with train statistics."""
    train, val, test = split_by_time(ds, ratios)
    st = Standardizer.fit(train)
    return Splits(st.apply(train), st.apply(val), st.apply(test), st)


def pretrained_model(splits: Splits, hp: Hyperparams, variant: str, rngs: dict,
                     history: list | None = None) -> MtlModel:
    model = init_model(splits.train.schema, variant, rngs["init"], hp.arch)
    return pretrain_actor(model, splits.train, splits.val, hp, rngs, history=history)


@dataclass
class RunOutcome:
    method: str
    model: MtlModel
    critic: CriticParams | None
    test: MetricReport
    val: MetricReport
    history: list[dict]
    audit: WeightAudit | None = None


def run_methods(splits: Splits, hp: Hyperparams, variant: str, methods, seed: int | None = None,
                tag: str | None = None) -> dict[str, RunOutcome]:
    """Pretrain once, then retrain a copy with every requested method.

    ``"pretrain"`` in ``methods`` reports the pretrained model itself.
    The frozen-actor critic phase is shared by all critic-based methods.
    """
    seed = hp.seed if seed is None else seed
    hp = hp.replace(seed=seed)
    rngs = rng_streams(seed)
    pt_hist: list[dict] = []
    base = pretrained_model(splits, hp, variant, rngs, pt_hist)
    base_arrays = snapshot(base.named_arrays())
    init_state = rngs["init"].bit_generator.state
    fitted = None
    out = {}
    for method in methods:
        label = f"{tag or variant}-{method}"
        if method == "pretrain":
            out[method] = RunOutcome(method, base, None, evaluate(base, splits.test, label, seed, "test"),
                                     evaluate(base, splits.val, label, seed, "val"), list(pt_hist))
            continue
        model = copy.deepcopy(base)
        nncore.assign_arrays(model.named_arrays(), base_arrays)
        streams = rng_streams(seed)
        streams["init"].bit_generator.state = init_state
        spec = METHODS.get(method)
        if spec is None:
            raise ValidationError(f"unknown method {method!r}")
        uses_critic = spec.fits_critic or spec.policy_gradient != "never"
        if uses_critic and fitted is None:
            critic = init_critic(model.schema, streams["init"], CriticArch.from_hyperparams(hp))
            targets = TargetPair(copy.deepcopy(model.actor), copy.deepcopy(critic))
            fit_hist: list[dict] = []
            opt = fit_critic(model, critic, targets, splits.train, hp, streams["critic_fit"],
                             history=fit_hist)
            fitted = (critic, targets, opt, fit_hist)
        res = train_rl(model, splits.train, splits.val, hp, method, rngs=streams,
                       fitted=fitted if uses_critic else None)
        out[method] = RunOutcome(method, res.model, res.critic,
                                 evaluate(res.model, splits.test, label, seed, "test"),
                                 evaluate(res.model, splits.val, label, seed, "val"),
                                 pt_hist + res.history, res.audit)
    return out


def train_rmtl(hp: Hyperparams, ds: SessionDataset, variant: str = "ple", method: str = "rmtl") -> RunOutcome:
    """Split, pretrain and retrain with ``method`` in one call."""
    return run_methods(prepare_splits(ds), hp, variant, [method])[method]


def train_dple(hp: Hyperparams, ds: SessionDataset) -> RunOutcome:
    return train_rmtl(hp, ds, "ple", "dple")


def transfer_run(splits: Splits, hp: Hyperparams, variant: str, critic: CriticParams,
                 seed: int | None = None, tag: str | None = None) -> RunOutcome:
    """Pretrain ``variant`` and retrain it with RMTL using a critic learned elsewhere.

    The loaded critic already fits the TD targets, so the frozen-actor phase
    is skipped; the critic keeps learning alongside the new actor.
    """
    if critic.schema != splits.train.schema:
        raise SchemaMismatchError("critic was trained on a different feature schema")
    seed = hp.seed if seed is None else seed
    hp = hp.replace(seed=seed)
    rngs = rng_streams(seed)
    pt_hist: list[dict] = []
    model = pretrained_model(splits, hp, variant, rngs, pt_hist)
    res = train_rl(model, splits.train, splits.val, hp, "rmtl", critic=copy.deepcopy(critic),
                   rngs=rngs, fit_critic_first=False)
    label = tag or f"transfer-{variant}"
    return RunOutcome("rmtl", res.model, res.critic, evaluate(res.model, splits.test, label, seed, "test"),
                      evaluate(res.model, splits.val, label, seed, "val"), pt_hist + res.history, res.audit)
