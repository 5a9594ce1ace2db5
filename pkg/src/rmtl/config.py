"""Hyperparameters and the ``key=value`` run-config format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from .backbones import ArchConfig
from .errors import ParseError, ValidationError

DELTA_MODES = ("signed", "abs")
CRITIC_UPDATE_MODES = ("pointwise", "batch")

# text key -> field name, for keys that are Python keywords
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass(frozen=True)
class Hyperparams:
    """All tunable values of a run.  Defaults are the published configuration."""

    # loss weighting / RL
    lam: float = 0.7
    beta: float = 0.2
    gamma: float = 0.95
    gamma_prime: float = 0.9
    decay_w0: float = 1.0
    alpha_theta: float = 1e-3
    alpha_phi: float = 1e-3
    epsilon: float = 0.05
    delta_mode: str = "signed"
    critic_update_mode: str = "pointwise"
    # schedule
    batch_size: int = 256
    pretrain_epochs: int = 10
    patience: int = 3
    rl_epochs: int = 5
    max_critic_epochs: int = 5
    buffer_capacity: int = 0  # 0: unbounded
    loss_guard: float = 1e3
    # actor architecture
    embed_dim: int = 128
    proj_dim: int = 128
    bottom_dims: tuple[int, ...] = (512, 256)
    tower_dims: tuple[int, ...] = (128, 64)
    expert_dims: tuple[int, ...] = (512, 256)
    expert_count: int = 8
    ple_split: tuple[int, ...] = (3, 3, 2)
    dropout: float = 0.2
    # critic architecture
    critic_bottom_dims: tuple[int, ...] = (512, 128)
    action_dim: int = 128
    critic_tower_dims: tuple[int, ...] = (128, 64)
    critic_output_bias: float = -1.0

    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{_REVERSE.get(name, name)} must be in [0, 1], got {v}")
        if not 0.0 < self.gamma_prime <= 1.0:
            raise ValidationError("gamma_prime must be in (0, 1]")
        for name in ("alpha_theta", "alpha_phi", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.delta_mode not in DELTA_MODES:
            raise ValidationError(f"delta_mode must be one of {DELTA_MODES}")
        if self.critic_update_mode not in CRITIC_UPDATE_MODES:
            raise ValidationError(f"critic_update_mode must be one of {CRITIC_UPDATE_MODES}")
        for name in ("batch_size", "embed_dim", "proj_dim", "action_dim", "expert_count"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "patience", "rl_epochs", "max_critic_epochs", "buffer_capacity"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.decay_w0 < 0:
            raise ValidationError("decay_w0 must be >= 0")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(self.embed_dim, self.proj_dim, tuple(self.bottom_dims), tuple(self.tower_dims),
                          tuple(self.expert_dims), self.expert_count, tuple(self.ple_split), self.dropout)

    def replace(self, **changes) -> "Hyperparams":
        changes = {_ALIASES.get(k, k): v for k, v in changes.items()}
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{_REVERSE.get(f.name, f.name)}={format_value(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], base: "Hyperparams | None" = None) -> "Hyperparams":
        base = base or cls()
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        changes = {}
        for key, raw in mapping.items():
            name = _ALIASES.get(key, key)
            if name not in known:
                raise ValidationError(f"unknown hyperparameter {key!r}")
            changes[name] = coerce(hints[name], raw, key)
        return dataclasses.replace(base, **changes)


PRESETS = {
    "full": {},
    # desk-scale widths for CPU experiments on the synthetic benchmark
    "desk": {
        "embed_dim": "16", "proj_dim": "16", "bottom_dims": "64,32", "tower_dims": "16,8",
        "expert_dims": "64,32", "critic_bottom_dims": "64,16", "action_dim": "16",
        "critic_tower_dims": "16,8", "batch_size": "256", "pretrain_epochs": "10",
        "rl_epochs": "4", "max_critic_epochs": "4",
    },
}


def preset(name: str) -> Hyperparams:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return Hyperparams.from_mapping(PRESETS[name])


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(tp, raw, key: str = ""):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if tp is float:
            v = float(raw)
            if math.isnan(v):
                raise ValueError
            return v
        if tp is int:
            return int(raw)
        if tp is str:
            return raw
        if tp in (tuple[int, ...],) or getattr(tp, "__origin__", None) is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None
    raise ValidationError(f"unsupported type for {key}")


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", lineno)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))
