"""Multi-critic network: one shared bottom, one Q head per task.

The shared bottom has its own embeddings and MLP over the raw user-item
features.  The scalar action of task ``k`` passes through an affine action
layer, is concatenated with the bottom output and fed to head ``k``, whose
output activation is ``neg_relu`` so that ``Q <= 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import nncore
from ..backbones import (
    FeatureSchema,
    Features,
    ReprParams,
    init_repr,
    state_repr_backward,
    state_repr_forward,
)
from ..errors import CheckpointError, SchemaMismatchError, ShapeError, ValidationError
from ..nncore import Dense, MlpParams, init_mlp, mlp_backward, mlp_forward, mlp_grads_dict


@dataclass(frozen=True)
class CriticArch:
    embed_dim: int = 128
    proj_dim: int = 128
    bottom_dims: tuple[int, ...] = (512, 128)
    action_dim: int = 128
    tower_dims: tuple[int, ...] = (128, 64)
    output_bias: float = -1.0

    @classmethod
    def from_hyperparams(cls, hp) -> "CriticArch":
        return cls(hp.embed_dim, hp.proj_dim, tuple(hp.critic_bottom_dims), hp.action_dim,
                   tuple(hp.critic_tower_dims), hp.critic_output_bias)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CriticArch":
        d = dict(d)
        d["bottom_dims"] = tuple(d["bottom_dims"])
        d["tower_dims"] = tuple(d["tower_dims"])
        return cls(**d)


@dataclass
class CriticParams:
    schema: FeatureSchema
    arch: CriticArch
    bottom: ReprParams
    action_proj: Dense
    heads: list[MlpParams]

    def __post_init__(self):
        if len(self.heads) != 2:
            raise ValidationError("critic needs exactly two heads")

    def named_arrays(self, prefix: str = "critic") -> nncore.ArrayDict:
        out = self.bottom.named_arrays(f"{prefix}.bottom")
        out[f"{prefix}.action.weight"] = self.action_proj.weight
        out[f"{prefix}.action.bias"] = self.action_proj.bias
        for k, h in enumerate(self.heads):
            out.update(h.named_arrays(f"{prefix}.head.{k}"))
        return out


def init_critic(schema: FeatureSchema, rng: np.random.Generator, arch: CriticArch = CriticArch()) -> CriticParams:
    bottom = init_repr(schema, rng, arch.embed_dim, arch.proj_dim, arch.bottom_dims)
    action_proj = nncore.glorot_dense(1, arch.action_dim, rng)
    head_in = bottom.out_dim + arch.action_dim
    heads = [init_mlp([head_in, *arch.tower_dims, 1], rng, output_activation="neg_relu",
                      output_bias=arch.output_bias) for _ in range(2)]
    return CriticParams(schema, arch, bottom, action_proj, heads)


@dataclass
class CriticCache:
    bottom_cache: object
    bottom_out: np.ndarray
    actions: dict[int, np.ndarray]
    head_caches: dict[int, nncore.MlpCache]


def _check_task(k: int):
    if k not in (1, 2):
        raise ValidationError(f"task index must be 1 or 2, got {k}")


def critic_forward_tasks(critic: CriticParams, feats: Features, actions: dict[int, np.ndarray]):
    """Q values for several tasks sharing one bottom pass; ``actions`` maps task -> (n,) array."""
    for k in actions:
        _check_task(k)
    h, bcache = state_repr_forward(critic.schema, critic.bottom, feats)
    cache = CriticCache(bcache, h, {}, {})
    out = {}
    for k, a in actions.items():
        a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
        if len(a) != len(h):
            raise ShapeError("action count differs from feature rows")
        if np.any(a < 0) or np.any(a > 1):
            raise ValidationError("critic actions must lie in [0, 1]")
        pa = a @ critic.action_proj.weight + critic.action_proj.bias
        q, hc = mlp_forward(critic.heads[k - 1], np.concatenate([h, pa], axis=1))
        out[k] = q[:, 0]
        cache.actions[k] = a
        cache.head_caches[k] = hc
    return out, cache


def critic_forward(critic: CriticParams, feats: Features, action, k: int):
    """``Q(s, a_k; phi_k)`` per row, shape ``(n,)``, all entries <= 0."""
    _check_task(k)
    out, cache = critic_forward_tasks(critic, feats, {k: action})
    return out[k], cache


def critic_backward(critic: CriticParams, cache: CriticCache, grad_q: dict[int, np.ndarray],
                    prefix: str = "critic", need_params: bool = True):
    """Returns (param grads or None, {task: dQ-weighted grad w.r.t. the action})."""
    d_bottom = cache.bottom_out.shape[1]
    g_h = np.zeros_like(cache.bottom_out)
    g_wa = np.zeros_like(critic.action_proj.weight)
    g_ba = np.zeros_like(critic.action_proj.bias)
    grads = {}
    g_actions = {}
    for k, g in grad_q.items():
        hg, g_in = mlp_backward(critic.heads[k - 1], cache.head_caches[k], np.asarray(g, dtype=np.float64)[:, None])
        if need_params:
            grads.update(mlp_grads_dict(hg, f"{prefix}.head.{k - 1}"))
        g_h += g_in[:, :d_bottom]
        g_pa = g_in[:, d_bottom:]
        g_wa += cache.actions[k].T @ g_pa
        g_ba += g_pa.sum(axis=0)
        g_actions[k] = (g_pa @ critic.action_proj.weight.T)[:, 0]
    if not need_params:
        return None, g_actions
    for k in (1, 2):
        if k not in grad_q:
            head = critic.heads[k - 1]
            for i, layer in enumerate(head.layers):
                grads[f"{prefix}.head.{k - 1}.{i}.weight"] = np.zeros_like(layer.weight)
                grads[f"{prefix}.head.{k - 1}.{i}.bias"] = np.zeros_like(layer.bias)
    grads[f"{prefix}.action.weight"] = g_wa
    grads[f"{prefix}.action.bias"] = g_ba
    grads.update(state_repr_backward(critic.bottom, cache.bottom_cache, g_h, prefix=f"{prefix}.bottom"))
    return grads, g_actions


def copy_critic(critic: CriticParams) -> CriticParams:
    clone = init_critic(critic.schema, nncore.make_rng(0), critic.arch)
    nncore.assign_arrays(clone.named_arrays(), critic.named_arrays())
    return clone


def save_critic(critic: CriticParams, path, extra: dict | None = None):
    meta = {"role": "critic", "schema": critic.schema.to_dict(), "arch": critic.arch.to_dict(), **(extra or {})}
    nncore.save_arrays(path, critic.named_arrays(), meta)


def load_critic(path, schema: FeatureSchema | None = None) -> CriticParams:
    """Load a critic; everything is validated before anything is returned."""
    arrays, meta = nncore.load_arrays(path)
    if meta.get("role") != "critic":
        raise CheckpointError(f"{path}: not a critic checkpoint")
    try:
        saved = FeatureSchema.from_dict(meta["schema"])
        arch = CriticArch.from_dict(meta["arch"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing critic metadata ({exc})") from exc
    if schema is not None and saved != schema:
        raise SchemaMismatchError(f"{path}: critic was trained on a different feature schema")
    critic = init_critic(saved, nncore.make_rng(0), arch)
    try:
        nncore.assign_arrays(critic.named_arrays(), arrays)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return critic
