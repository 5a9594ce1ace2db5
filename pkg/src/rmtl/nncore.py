"""Small deterministic neural-network engine built on numpy.

Everything is float64 and functional: parameters live in plain dataclasses
holding numpy arrays, forward passes return a cache, and backward passes
consume that cache.  Higher-level networks expose their arrays through
``named_arrays()`` dictionaries so optimizers, soft updates and checkpoints
can treat every bundle uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, NumericError, ShapeError, ValidationError

PROB_MIN = 1e-7
PROB_MAX = 1.0 - 1e-7

ACTIVATIONS = ("relu", "sigmoid", "neg_relu", "identity", "softmax")

CHECKPOINT_FORMAT = "rmtl-params"
CHECKPOINT_VERSION = 1

ArrayDict = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator.  Same seed, same draws, on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, names: tuple[str, ...]) -> dict[str, np.random.Generator]:
    """Independent named PCG64 streams derived from one seed.

    Streams are keyed by position in ``names``; keep the tuple order stable.
    """
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def apply_activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    if kind == "neg_relu":
        # min(x, 0): keeps outputs nonpositive
        return np.minimum(x, 0.0)
    if kind == "identity":
        return x
    if kind == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValidationError(f"unknown activation {kind!r}")


def activation_backward(kind: str, pre: np.ndarray, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation given the gradient w.r.t. the output."""
    if kind == "relu":
        return grad * (pre > 0)
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    if kind == "neg_relu":
        return grad * (pre < 0)
    if kind == "identity":
        return grad
    if kind == "softmax":
        return out * (grad - (grad * out).sum(axis=-1, keepdims=True))
    raise ValidationError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Dense layers and MLPs
# ---------------------------------------------------------------------------

@dataclass
class Dense:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[Dense]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1], got {self.dropout_rate}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {layer.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def named_arrays(self, prefix: str) -> ArrayDict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    pres: list[np.ndarray]
    outs: list[np.ndarray]
    masks: list[np.ndarray | None]
    shapes: tuple


def glorot_dense(in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "identity", bias: float = 0.0) -> Dense:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return Dense(w, np.full(out_dim, float(bias)), activation)


def init_mlp(dims, rng: np.random.Generator, hidden_activation: str = "relu",
             output_activation: str = "identity", dropout_rate: float = 0.0,
             output_bias: float = 0.0) -> MlpParams:
    """Glorot-uniform weights, zero biases (``output_bias`` on the last layer)."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValidationError(f"an MLP needs at least two dims, got {dims}")
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(glorot_dense(a, b, rng, output_activation if last else hidden_activation,
                                   bias=output_bias if last else 0.0))
    return MlpParams(layers, dropout_rate)


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def mlp_forward(params: MlpParams, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, MlpCache]:
    """Affine + activation chain.  Inverted dropout after every hidden layer in train mode."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"MLP expects (n, {params.in_dim}) input, got {x.shape}")
    _check_finite(x, "MLP input")
    use_dropout = train_mode and params.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValidationError("train-mode dropout needs an rng")
    keep = 1.0 - params.dropout_rate
    inputs, pres, outs, masks = [], [], [], []
    h = x
    n_layers = len(params.layers)
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        pre = h @ layer.weight + layer.bias
        out = apply_activation(layer.activation, pre)
        pres.append(pre)
        outs.append(out)
        mask = None
        if use_dropout and i < n_layers - 1:
            mask = (rng.random(out.shape) < keep) / keep if keep > 0 else np.zeros_like(out)
            out = out * mask
        masks.append(mask)
        h = out
    shapes = tuple(layer.weight.shape for layer in params.layers)
    return h, MlpCache(inputs, pres, outs, masks, shapes)


def mlp_backward(params: MlpParams, cache: MlpCache,
                 grad_out: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Returns ``[(dW, db), ...]`` per layer and the gradient w.r.t. the input."""
    if cache.shapes != tuple(layer.weight.shape for layer in params.layers):
        raise ShapeError("cache was produced by a different network")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.outs[-1].shape:
        raise ShapeError(f"grad_out shape {g.shape} != output shape {cache.outs[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        g_pre = activation_backward(layer.activation, cache.pres[i], cache.outs[i], g)
        grads[i] = (cache.inputs[i].T @ g_pre, g_pre.sum(axis=0))
        g = g_pre @ layer.weight.T
    return grads, g


def mlp_grads_dict(grads, prefix: str) -> ArrayDict:
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"{prefix}.{i}.weight"] = dw
        out[f"{prefix}.{i}.bias"] = db
    return out


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    rows: np.ndarray  # (vocab_size, dim)

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def init_embedding(vocab_size: int, dim: int, rng: np.random.Generator) -> EmbeddingTable:
    limit = np.sqrt(6.0 / (vocab_size + dim))
    return EmbeddingTable(rng.uniform(-limit, limit, size=(vocab_size, dim)))


def _check_ids(table: EmbeddingTable, ids: np.ndarray):
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise IndexError(f"embedding id out of range [0, {table.vocab_size})")


def embed_forward(table: EmbeddingTable, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(table, ids)
    return table.rows[ids]


def embed_backward(table: EmbeddingTable, ids, grad_out: np.ndarray) -> np.ndarray:
    """Dense gradient for the table; rows looked up several times accumulate."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(table, ids)
    grad = np.zeros_like(table.rows)
    np.add.at(grad, ids, grad_out)
    return grad


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def clamp_prob(p):
    return np.clip(p, PROB_MIN, PROB_MAX)


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("labels must be 0 or 1")
    return y


def bce(pred, label):
    """Binary cross-entropy on clamped probabilities (elementwise)."""
    y = _check_labels(label)
    p = clamp_prob(np.asarray(pred, dtype=np.float64))
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def bce_grad(pred, label):
    y = _check_labels(label)
    p = clamp_prob(np.asarray(pred, dtype=np.float64))
    out = -y / p + (1.0 - y) / (1.0 - p)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def like(cls, param: np.ndarray, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), lr=lr, **kw)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update of ``param`` in place; returns ``param``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"Adam shape mismatch: param {param.shape}, grad {grad.shape}")
    _check_finite(grad, "gradient")
    state.step_count += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


class Adam:
    """Adam over a named array bundle.  Arrays are updated in place."""

    def __init__(self, params: ArrayDict, lr: float = 1e-3, **kw):
        self.params = params
        self.states = {k: AdamState.like(v, lr=lr, **kw) for k, v in params.items()}

    def step(self, grads: ArrayDict):
        for name, g in grads.items():
            adam_step(self.states[name], self.params[name], g)


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    rtol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.rtol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if e > self.rtol]


def finite_diff_check(loss_fn: Callable[[], tuple[float, ArrayDict]], params: ArrayDict,
                      h: float = 1e-5, rtol: float = 1e-4, floor: float = 1e-6,
                      names=None) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    ``loss_fn()`` evaluates the loss at the current contents of ``params``
    and returns ``(loss, grads)``; it must be deterministic.  The relative
    error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, analytic = loss_fn()
    report = GradCheckReport(rtol=rtol)
    for name in names or params:
        p = params[name]
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p)
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_fn()
            flat[i] = orig - h
            lm, _ = loss_fn()
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        report.max_rel_error[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    return report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_arrays(path, arrays: ArrayDict, meta: dict | None = None):
    """Write a versioned ``.npz`` container: one float64 array per name plus JSON metadata."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "names": list(arrays), "meta": meta or {}}
    payload = {f"a/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[ArrayDict, dict]:
    """Inverse of :func:`save_arrays`; raises CheckpointError on any defect."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not an rmtl checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            arrays = {k: np.array(z[f"a/{k}"]) for k in header["names"]}
    except CheckpointError:
        raise
    except Exception as exc:  # zip, key and json failures all mean a bad file
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            raise CheckpointError(f"{path}: non-finite values in {k}")
    return arrays, header["meta"]


def assign_arrays(target: ArrayDict, source: ArrayDict):
    """Copy ``source`` into the arrays of ``target`` in place, checking names and shapes."""
    if set(target) != set(source):
        missing = sorted(set(target) ^ set(source))
        raise ShapeError(f"parameter names differ: {missing[:5]}")
    for k, v in target.items():
        if v.shape != source[k].shape:
            raise ShapeError(f"{k}: shape {source[k].shape} != {v.shape}")
    for k, v in target.items():
        v[...] = source[k]
