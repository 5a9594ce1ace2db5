"""State representation network and the multi-task actor backbones.

The state network embeds each categorical field, maps the numerical block
linearly to the embedding width, concatenates the field vectors, projects
the concatenation and runs it through the bottom MLP.  The actor maps that
state to the action pair ``(a1, a2) = (pCTR, pCTCVR)``.

Variants:

``single_task``
    two private state networks (the state vector is their concatenation)
    and one tower per task.
``shared_bottom``
    both towers read the shared state.
``esmm``
    like shared_bottom, but tower 2 predicts pCVR and ``a2 = pCTR * pCVR``.
``mmoe``
    experts on the state, one softmax gate per task.
``ple``
    one extraction level; task-specific plus shared experts, gate ``k``
    mixes the task-``k`` experts and the shared ones.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .errors import CheckpointError, SchemaMismatchError, ShapeError, ValidationError
from .nncore import (
    Dense,
    EmbeddingTable,
    MlpParams,
    clamp_prob,
    embed_backward,
    embed_forward,
    init_embedding,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_grads_dict,
)

VARIANTS = ("single_task", "shared_bottom", "esmm", "mmoe", "ple")
N_TASKS = 2


@dataclass(frozen=True)
class FeatureSchema:
    categorical: tuple[tuple[str, int], ...]
    numerical: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple((str(n), int(v)) for n, v in self.categorical))
        object.__setattr__(self, "numerical", tuple(str(n) for n in self.numerical))
        names = self.field_names
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate field names in schema: {names}")
        for name, vocab in self.categorical:
            if vocab < 1:
                raise ValidationError(f"vocab size of {name!r} must be >= 1")
        if not names:
            raise ValidationError("schema has no feature fields")

    @property
    def field_names(self) -> list[str]:
        return [n for n, _ in self.categorical] + list(self.numerical)

    @property
    def cat_names(self) -> list[str]:
        return [n for n, _ in self.categorical]

    @property
    def vocab_sizes(self) -> list[int]:
        return [v for _, v in self.categorical]

    @property
    def n_cat(self) -> int:
        return len(self.categorical)

    @property
    def n_num(self) -> int:
        return len(self.numerical)

    def to_dict(self) -> dict:
        return {"categorical": [list(c) for c in self.categorical], "numerical": list(self.numerical)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(tuple(c) for c in d["categorical"]), tuple(d["numerical"]))


@dataclass
class Features:
    """A batch of raw feature rows: categorical ids and numerical values."""

    cat: np.ndarray  # (n, n_cat) int64
    num: np.ndarray  # (n, n_num) float64

    def __post_init__(self):
        self.cat = np.asarray(self.cat, dtype=np.int64).reshape(len(self.cat), -1)
        self.num = np.asarray(self.num, dtype=np.float64).reshape(len(self.num), -1)
        if len(self.cat) != len(self.num):
            raise ShapeError("categorical and numerical blocks differ in length")

    def __len__(self) -> int:
        return len(self.cat)

    def take(self, idx) -> "Features":
        return Features(self.cat[idx], self.num[idx])

    @staticmethod
    def concat(parts: list["Features"]) -> "Features":
        return Features(np.concatenate([p.cat for p in parts]), np.concatenate([p.num for p in parts]))


def check_features(schema: FeatureSchema, feats: Features):
    if feats.cat.shape[1] != schema.n_cat or feats.num.shape[1] != schema.n_num:
        raise SchemaMismatchError(
            f"features have {feats.cat.shape[1]} categorical / {feats.num.shape[1]} numerical "
            f"columns, schema expects {schema.n_cat} / {schema.n_num}")
    for j, (name, vocab) in enumerate(schema.categorical):
        col = feats.cat[:, j]
        if col.size and (col.min() < 0 or col.max() >= vocab):
            raise ValidationError(f"field {name!r}: id outside [0, {vocab})")
    if not np.all(np.isfinite(feats.num)):
        raise ValidationError("non-finite numerical feature")


@dataclass(frozen=True)
class ArchConfig:
    embed_dim: int = 128
    proj_dim: int = 128
    bottom_dims: tuple[int, ...] = (512, 256)
    tower_dims: tuple[int, ...] = (128, 64)
    expert_dims: tuple[int, ...] = (512, 256)
    expert_count: int = 8
    ple_split: tuple[int, int, int] = (3, 3, 2)
    dropout: float = 0.2

    def __post_init__(self):
        if self.expert_count < 1:
            raise ValidationError("expert_count must be >= 1")
        if len(self.ple_split) != 3 or min(self.ple_split) < 0:
            raise ValidationError(f"ple_split must be three counts, got {self.ple_split}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("bottom_dims", "tower_dims", "expert_dims", "ple_split"):
            d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# State representation network
# ---------------------------------------------------------------------------

@dataclass
class ReprParams:
    embeddings: list[EmbeddingTable]
    num_proj: Dense | None
    proj: Dense
    bottom: MlpParams

    @property
    def out_dim(self) -> int:
        return self.bottom.out_dim

    def named_arrays(self, prefix: str = "repr") -> nncore.ArrayDict:
        out = {f"{prefix}.emb.{i}": t.rows for i, t in enumerate(self.embeddings)}
        if self.num_proj is not None:
            out[f"{prefix}.num_proj.weight"] = self.num_proj.weight
            out[f"{prefix}.num_proj.bias"] = self.num_proj.bias
        out[f"{prefix}.proj.weight"] = self.proj.weight
        out[f"{prefix}.proj.bias"] = self.proj.bias
        out.update(self.bottom.named_arrays(f"{prefix}.bottom"))
        return out


def init_repr(schema: FeatureSchema, rng: np.random.Generator, embed_dim: int = 128,
              proj_dim: int = 128, bottom_dims=(512, 256), dropout: float = 0.0,
              output_activation: str = "relu") -> ReprParams:
    embeddings = [init_embedding(v, embed_dim, rng) for v in schema.vocab_sizes]
    num_proj = nncore.glorot_dense(schema.n_num, embed_dim, rng) if schema.n_num else None
    n_fields = schema.n_cat + (1 if schema.n_num else 0)
    proj = nncore.glorot_dense(n_fields * embed_dim, proj_dim, rng)
    bottom = init_mlp([proj_dim, *bottom_dims], rng, output_activation=output_activation,
                      dropout_rate=dropout)
    return ReprParams(embeddings, num_proj, proj, bottom)


@dataclass
class ReprCache:
    feats: Features
    concat: np.ndarray
    bottom_cache: nncore.MlpCache


def state_repr_forward(schema: FeatureSchema, params: ReprParams, feats: Features,
                       train_mode: bool = False, rng=None) -> tuple[np.ndarray, ReprCache]:
    """Map raw feature rows to state vectors of width ``params.out_dim``."""
    check_features(schema, feats)
    if len(params.embeddings) != schema.n_cat or (params.num_proj is None) != (schema.n_num == 0):
        raise SchemaMismatchError("state network was built for a different schema")
    blocks = [embed_forward(t, feats.cat[:, j]) for j, t in enumerate(params.embeddings)]
    if params.num_proj is not None:
        blocks.append(feats.num @ params.num_proj.weight + params.num_proj.bias)
    concat = np.concatenate(blocks, axis=1)
    h = concat @ params.proj.weight + params.proj.bias
    out, bcache = mlp_forward(params.bottom, h, train_mode, rng)
    return out, ReprCache(feats, concat, bcache)


def state_repr_backward(params: ReprParams, cache: ReprCache, grad_states: np.ndarray,
                        prefix: str = "repr") -> nncore.ArrayDict:
    bgrads, g_h = mlp_backward(params.bottom, cache.bottom_cache, grad_states)
    grads = mlp_grads_dict(bgrads, f"{prefix}.bottom")
    grads[f"{prefix}.proj.weight"] = cache.concat.T @ g_h
    grads[f"{prefix}.proj.bias"] = g_h.sum(axis=0)
    g_concat = g_h @ params.proj.weight.T
    d = params.embeddings[0].dim if params.embeddings else params.num_proj.out_dim
    for j, table in enumerate(params.embeddings):
        grads[f"{prefix}.emb.{j}"] = embed_backward(table, cache.feats.cat[:, j],
                                                    g_concat[:, j * d:(j + 1) * d])
    if params.num_proj is not None:
        g_num = g_concat[:, len(params.embeddings) * d:]
        grads[f"{prefix}.num_proj.weight"] = cache.feats.num.T @ g_num
        grads[f"{prefix}.num_proj.bias"] = g_num.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Actor
# ---------------------------------------------------------------------------

@dataclass
class ActorParams:
    variant: str
    towers: list[MlpParams]
    experts: list[MlpParams] = field(default_factory=list)
    gates: list[MlpParams] = field(default_factory=list)
    gate_experts: tuple[tuple[int, ...], ...] = ()
    state_dim: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown backbone variant {self.variant!r}")
        if len(self.towers) != N_TASKS:
            raise ValidationError(f"actor needs exactly {N_TASKS} towers")
        if any(t.out_dim != 1 for t in self.towers):
            raise ValidationError("tower output dim must be 1")
        if self.variant in ("mmoe", "ple") and len(self.gates) != N_TASKS:
            raise ValidationError(f"{self.variant} needs one gate per task")

    @property
    def expert_count(self) -> int:
        return len(self.experts)

    def tower_input(self, k: int, states: np.ndarray) -> np.ndarray:
        if self.variant == "single_task":
            d = self.state_dim // N_TASKS
            return states[:, k * d:(k + 1) * d]
        return states

    def named_arrays(self, prefix: str = "actor") -> nncore.ArrayDict:
        out = {}
        for k, t in enumerate(self.towers):
            out.update(t.named_arrays(f"{prefix}.tower.{k}"))
        for e, m in enumerate(self.experts):
            out.update(m.named_arrays(f"{prefix}.expert.{e}"))
        for k, g in enumerate(self.gates):
            out.update(g.named_arrays(f"{prefix}.gate.{k}"))
        return out


def init_actor(variant: str, state_dim: int, rng: np.random.Generator,
               arch: ArchConfig = ArchConfig()) -> ActorParams:
    """Build an actor reading ``state_dim``-wide states (per-task halves for single_task)."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown backbone variant {variant!r}")
    experts, gates, groups = [], [], ()
    tower_in = state_dim
    if variant == "single_task":
        if state_dim % N_TASKS:
            raise ShapeError("single_task state must split evenly between tasks")
        tower_in = state_dim // N_TASKS
    elif variant in ("mmoe", "ple"):
        count = arch.expert_count if variant == "mmoe" else sum(arch.ple_split)
        experts = [init_mlp([state_dim, *arch.expert_dims], rng, output_activation="relu",
                            dropout_rate=arch.dropout) for _ in range(count)]
        if variant == "mmoe":
            groups = (tuple(range(count)),) * N_TASKS
        else:
            n1, n2, ns = arch.ple_split
            shared = tuple(range(n1 + n2, n1 + n2 + ns))
            groups = (tuple(range(n1)) + shared, tuple(range(n1, n1 + n2)) + shared)
        for g in groups:
            if not g:
                raise ValidationError("every gate needs at least one expert")
            gates.append(init_mlp([state_dim, len(g)], rng, output_activation="softmax"))
        tower_in = arch.expert_dims[-1]
    towers = [init_mlp([tower_in, *arch.tower_dims, 1], rng, output_activation="sigmoid",
                       dropout_rate=arch.dropout) for _ in range(N_TASKS)]
    return ActorParams(variant, towers, experts, gates, groups, state_dim)


@dataclass
class ActorCache:
    states: np.ndarray
    tower_caches: list
    tower_out: list[np.ndarray]
    clamp_masks: list[np.ndarray]
    expert_caches: list = field(default_factory=list)
    expert_out: list[np.ndarray] = field(default_factory=list)
    gate_caches: list = field(default_factory=list)
    gate_out: list[np.ndarray] = field(default_factory=list)


def _clamp(p):
    a = clamp_prob(p)
    return a, (p >= nncore.PROB_MIN) & (p <= nncore.PROB_MAX)


def actor_forward(actor: ActorParams, states: np.ndarray, train_mode: bool = False,
                  rng=None) -> tuple[np.ndarray, np.ndarray, ActorCache]:
    """Returns clamped ``(a1, a2)``, each of shape ``(n,)``, and a cache."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != actor.state_dim:
        raise ShapeError(f"actor expects states of width {actor.state_dim}, got {states.shape}")
    cache = ActorCache(states, [], [], [])
    if actor.variant in ("mmoe", "ple"):
        for expert in actor.experts:
            out, c = mlp_forward(expert, states, train_mode, rng)
            cache.expert_out.append(out)
            cache.expert_caches.append(c)
        inputs = []
        for gate, group in zip(actor.gates, actor.gate_experts):
            g, c = mlp_forward(gate, states)
            cache.gate_out.append(g)
            cache.gate_caches.append(c)
            mixed = sum(g[:, j:j + 1] * cache.expert_out[e] for j, e in enumerate(group))
            inputs.append(mixed)
    else:
        inputs = [actor.tower_input(k, states) for k in range(N_TASKS)]
    for k, tower in enumerate(actor.towers):
        out, c = mlp_forward(tower, inputs[k], train_mode, rng)
        cache.tower_out.append(out[:, 0])
        cache.tower_caches.append(c)
    p1 = cache.tower_out[0]
    p2 = p1 * cache.tower_out[1] if actor.variant == "esmm" else cache.tower_out[1]
    a1, m1 = _clamp(p1)
    a2, m2 = _clamp(p2)
    cache.clamp_masks = [m1, m2]
    return a1, a2, cache


def actor_backward(actor: ActorParams, cache: ActorCache, grad_a1, grad_a2,
                   prefix: str = "actor") -> tuple[nncore.ArrayDict, np.ndarray]:
    """Gradients for every actor array and for the input states."""
    n = len(cache.states)
    g1 = np.broadcast_to(np.asarray(grad_a1, dtype=np.float64), (n,)) * cache.clamp_masks[0]
    g2 = np.broadcast_to(np.asarray(grad_a2, dtype=np.float64), (n,)) * cache.clamp_masks[1]
    if actor.variant == "esmm":
        t1, t2 = cache.tower_out
        g_towers = [g1 + g2 * t2, g2 * t1]
    else:
        g_towers = [g1, g2]
    grads = {}
    g_inputs = []
    for k, tower in enumerate(actor.towers):
        tg, g_in = mlp_backward(tower, cache.tower_caches[k], g_towers[k][:, None])
        grads.update(mlp_grads_dict(tg, f"{prefix}.tower.{k}"))
        g_inputs.append(g_in)
    if actor.variant == "single_task":
        return grads, np.concatenate(g_inputs, axis=1)
    if actor.variant in ("shared_bottom", "esmm"):
        return grads, g_inputs[0] + g_inputs[1]
    g_state = np.zeros_like(cache.states)
    g_experts = [np.zeros_like(e) for e in cache.expert_out]
    for k, (gate, group) in enumerate(zip(actor.gates, actor.gate_experts)):
        g_mixed = g_inputs[k]
        gv = cache.gate_out[k]
        g_gate = np.empty_like(gv)
        for j, e in enumerate(group):
            g_gate[:, j] = np.einsum("ij,ij->i", g_mixed, cache.expert_out[e])
            g_experts[e] += gv[:, j:j + 1] * g_mixed
        gg, g_s = mlp_backward(gate, cache.gate_caches[k], g_gate)
        grads.update(mlp_grads_dict(gg, f"{prefix}.gate.{k}"))
        g_state += g_s
    for e, expert in enumerate(actor.experts):
        eg, g_s = mlp_backward(expert, cache.expert_caches[e], g_experts[e])
        grads.update(mlp_grads_dict(eg, f"{prefix}.expert.{e}"))
        g_state += g_s
    return grads, g_state


# ---------------------------------------------------------------------------
# Full model: state network(s) + actor
# ---------------------------------------------------------------------------

@dataclass
class MtlModel:
    schema: FeatureSchema
    arch: ArchConfig
    reprs: list[ReprParams]
    actor: ActorParams

    @property
    def variant(self) -> str:
        return self.actor.variant

    @property
    def state_dim(self) -> int:
        return sum(r.out_dim for r in self.reprs)

    def repr_arrays(self) -> nncore.ArrayDict:
        out = {}
        for i, r in enumerate(self.reprs):
            out.update(r.named_arrays(f"repr.{i}"))
        return out

    def named_arrays(self) -> nncore.ArrayDict:
        out = self.repr_arrays()
        out.update(self.actor.named_arrays("actor"))
        return out

    def states(self, feats: Features, train_mode: bool = False, rng=None):
        outs, caches = [], []
        for r in self.reprs:
            s, c = state_repr_forward(self.schema, r, feats, train_mode, rng)
            outs.append(s)
            caches.append(c)
        return np.concatenate(outs, axis=1) if len(outs) > 1 else outs[0], caches

    def predict(self, feats: Features) -> tuple[np.ndarray, np.ndarray]:
        s, _ = self.states(feats)
        a1, a2, _ = actor_forward(self.actor, s)
        return a1, a2


def init_model(schema: FeatureSchema, variant: str, rng: np.random.Generator,
               arch: ArchConfig = ArchConfig()) -> MtlModel:
    n_repr = N_TASKS if variant == "single_task" else 1
    reprs = [init_repr(schema, rng, arch.embed_dim, arch.proj_dim, arch.bottom_dims, arch.dropout)
             for _ in range(n_repr)]
    state_dim = sum(r.out_dim for r in reprs)
    return MtlModel(schema, arch, reprs, init_actor(variant, state_dim, rng, arch))


def model_forward(model: MtlModel, feats: Features, train_mode: bool = False, rng=None):
    states, rcaches = model.states(feats, train_mode, rng)
    a1, a2, acache = actor_forward(model.actor, states, train_mode, rng)
    return a1, a2, (rcaches, acache)


def model_backward(model: MtlModel, cache, grad_a1, grad_a2) -> nncore.ArrayDict:
    rcaches, acache = cache
    grads, g_state = actor_backward(model.actor, acache, grad_a1, grad_a2)
    offset = 0
    for i, (r, c) in enumerate(zip(model.reprs, rcaches)):
        d = r.out_dim
        grads.update(state_repr_backward(r, c, g_state[:, offset:offset + d], prefix=f"repr.{i}"))
        offset += d
    return grads


def count_params(arrays: nncore.ArrayDict) -> int:
    return int(sum(v.size for v in arrays.values()))


def copy_model(model: MtlModel) -> MtlModel:
    clone = init_model(model.schema, model.variant, nncore.make_rng(0), model.arch)
    nncore.assign_arrays(clone.named_arrays(), model.named_arrays())
    return clone


def save_model(path, model: MtlModel, role: str = "actor", extra: dict | None = None):
    meta = {"role": role, "variant": model.variant, "schema": model.schema.to_dict(),
            "arch": model.arch.to_dict(), **(extra or {})}
    nncore.save_arrays(path, model.named_arrays(), meta)


def load_model(path, schema: FeatureSchema | None = None) -> tuple[MtlModel, dict]:
    arrays, meta = nncore.load_arrays(path)
    try:
        saved_schema = FeatureSchema.from_dict(meta["schema"])
        arch = ArchConfig.from_dict(meta["arch"])
        variant = meta["variant"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing model metadata ({exc})") from exc
    if schema is not None and schema != saved_schema:
        raise SchemaMismatchError(f"{path}: checkpoint schema differs from the dataset schema")
    model = init_model(saved_schema, variant, nncore.make_rng(0), arch)
    try:
        nncore.assign_arrays(model.named_arrays(), arrays)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, meta
