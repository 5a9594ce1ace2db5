"""Session-structured interaction datasets.

CSV layout (UTF-8, comma separated, one header row)::

    session_id,timestamp,user_id,item_id,<categorical...>,<numerical...>,y_click,y_convert

``user_id`` and ``item_id`` are always present.  They become feature
fields only when the schema declares them as categorical.  The remaining
categorical columns follow in schema order, then the numerical ones.

Schema sidecar (``key=value`` lines, ``#`` comments, order matters)::

    version=1
    user_id=categorical:300
    item_category=categorical:12
    price=numerical
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import expit

from .backbones import FeatureSchema, Features
from .errors import ParseError, ValidationError

ID_COLUMNS = ("user_id", "item_id")
LABELS = ("y_click", "y_convert")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class InteractionRow:
    session_id: str
    timestamp: int
    user_id: int
    item_id: int
    categorical: tuple[int, ...]
    numerical: tuple[float, ...]
    y_click: int
    y_convert: int

    def __post_init__(self):
        if self.y_click not in (0, 1) or self.y_convert not in (0, 1):
            raise ValidationError(f"session {self.session_id}: labels must be 0/1")
        if self.y_convert == 1 and self.y_click == 0:
            raise ValidationError(f"session {self.session_id} t={self.timestamp}: convert without click")


@dataclass
class Session:
    session_id: str
    timestamps: np.ndarray  # (T,) int64, strictly increasing
    user_ids: np.ndarray
    item_ids: np.ndarray
    feats: Features
    labels: np.ndarray  # (T, 2) int64: click, convert

    def __len__(self) -> int:
        return len(self.timestamps)

    def rows(self, schema: FeatureSchema):
        for t in range(len(self)):
            yield InteractionRow(self.session_id, int(self.timestamps[t]), int(self.user_ids[t]),
                                 int(self.item_ids[t]), tuple(int(v) for v in self.feats.cat[t]),
                                 tuple(float(v) for v in self.feats.num[t]),
                                 int(self.labels[t, 0]), int(self.labels[t, 1]))


@dataclass
class SessionDataset:
    schema: FeatureSchema
    sessions: list[Session] = field(default_factory=list)

    def __post_init__(self):
        for s in self.sessions:
            validate_session(s)

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    @property
    def n_rows(self) -> int:
        return sum(len(s) for s in self.sessions)

    def features(self) -> Features:
        if not self.sessions:
            return Features(np.zeros((0, self.schema.n_cat), np.int64), np.zeros((0, self.schema.n_num)))
        return Features.concat([s.feats for s in self.sessions])

    def labels(self) -> np.ndarray:
        if not self.sessions:
            return np.zeros((0, 2), np.int64)
        return np.concatenate([s.labels for s in self.sessions])

    def session_index(self) -> np.ndarray:
        """Session position of every row, in row order."""
        return np.repeat(np.arange(self.n_sessions), [len(s) for s in self.sessions])

    def step_index(self) -> np.ndarray:
        return np.concatenate([np.arange(len(s)) for s in self.sessions]) if self.sessions else np.zeros(0, int)


def validate_session(s: Session):
    if len(s) == 0:
        raise ValidationError(f"session {s.session_id} is empty")
    if np.any(np.diff(s.timestamps) <= 0):
        raise ValidationError(f"session {s.session_id}: timestamps not strictly increasing")
    lab = s.labels
    if not np.all((lab == 0) | (lab == 1)):
        raise ValidationError(f"session {s.session_id}: labels must be 0/1")
    if np.any((lab[:, 1] == 1) & (lab[:, 0] == 0)):
        raise ValidationError(f"session {s.session_id}: convert without click")


# ---------------------------------------------------------------------------
# Schema sidecar
# ---------------------------------------------------------------------------

def parse_schema(text: str) -> FeatureSchema:
    cats, nums = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "version":
            if value != str(SCHEMA_VERSION):
                raise ParseError(f"unsupported schema version {value}", lineno)
            continue
        kind, _, vocab = value.partition(":")
        if kind == "categorical":
            try:
                cats.append((key, int(vocab)))
            except ValueError:
                raise ParseError(f"bad vocab size for {key!r}: {vocab!r}", lineno) from None
        elif kind == "numerical":
            if key in ID_COLUMNS:
                raise ParseError(f"{key} can only be categorical", lineno)
            nums.append(key)
        else:
            raise ParseError(f"unknown field kind {kind!r}", lineno)
    return FeatureSchema(tuple(cats), tuple(nums))


def load_schema(path) -> FeatureSchema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def format_schema(schema: FeatureSchema) -> str:
    lines = [f"version={SCHEMA_VERSION}"]
    lines += [f"{n}=categorical:{v}" for n, v in schema.categorical]
    lines += [f"{n}=numerical" for n in schema.numerical]
    return "\n".join(lines) + "\n"


def save_schema(path, schema: FeatureSchema):
    Path(path).write_text(format_schema(schema), encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV ingest / serialization
# ---------------------------------------------------------------------------

def csv_header(schema: FeatureSchema) -> list[str]:
    extra = [n for n in schema.cat_names if n not in ID_COLUMNS]
    return ["session_id", "timestamp", *ID_COLUMNS, *extra, *schema.numerical, *LABELS]


def _int(value: str, col: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"column {col}: expected integer, got {value!r}", lineno) from None


def load_sessions(path, schema: FeatureSchema) -> SessionDataset:
    """Parse, validate and group a session CSV.

    Sessions come back ordered by their first timestamp (ties by id), rows
    within a session by timestamp.
    """
    header = csv_header(schema)
    rows: dict[str, list] = defaultdict(list)
    offenders = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ParseError("missing header row", 1) from None
        if [c.strip() for c in got] != header:
            raise ParseError(f"header mismatch: expected {','.join(header)}", 1)
        cat_cols = {n: header.index(n) for n in schema.cat_names}
        num_cols = [header.index(n) for n in schema.numerical]
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            ts = _int(rec[1], "timestamp", lineno)
            uid = _int(rec[2], "user_id", lineno)
            iid = _int(rec[3], "item_id", lineno)
            cat = [_int(rec[cat_cols[n]], n, lineno) for n in schema.cat_names]
            for (name, vocab), v in zip(schema.categorical, cat):
                if not 0 <= v < vocab:
                    offenders.append(f"line {lineno}: {name}={v} outside [0, {vocab})")
            try:
                num = [float(rec[j]) for j in num_cols]
            except ValueError:
                raise ParseError("numerical field is not a float", lineno) from None
            if not all(math.isfinite(v) for v in num):
                offenders.append(f"line {lineno}: non-finite numerical value")
            yc = _int(rec[-2], "y_click", lineno)
            yv = _int(rec[-1], "y_convert", lineno)
            if yc not in (0, 1) or yv not in (0, 1):
                offenders.append(f"line {lineno}: labels must be 0/1")
            elif yv == 1 and yc == 0:
                offenders.append(f"line {lineno}: y_convert=1 with y_click=0")
            rows[rec[0]].append((ts, uid, iid, cat, num, yc, yv, lineno))
    sessions = []
    for sid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        ts = np.array([r[0] for r in recs], dtype=np.int64)
        dup = np.nonzero(np.diff(ts) <= 0)[0]
        for d in dup:
            offenders.append(f"line {recs[d + 1][7]}: duplicate timestamp in session {sid}")
        if dup.size:
            continue
        sessions.append(Session(
            sid, ts,
            np.array([r[1] for r in recs], dtype=np.int64),
            np.array([r[2] for r in recs], dtype=np.int64),
            Features(np.array([r[3] for r in recs], dtype=np.int64).reshape(len(recs), schema.n_cat),
                     np.array([r[4] for r in recs], dtype=np.float64).reshape(len(recs), schema.n_num)),
            np.array([[r[5], r[6]] for r in recs], dtype=np.int64)))
    if offenders:
        shown = "; ".join(offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        raise ValidationError(f"{len(offenders)} invalid rows: {shown}{more}")
    sessions.sort(key=lambda s: (int(s.timestamps[0]), s.session_id))
    return SessionDataset(schema, sessions)


def save_sessions(path, ds: SessionDataset):
    header = csv_header(ds.schema)
    cat_pos = {n: j for j, n in enumerate(ds.schema.cat_names)}
    extra = [n for n in ds.schema.cat_names if n not in ID_COLUMNS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in ds.sessions:
            for t in range(len(s)):
                w.writerow([s.session_id, int(s.timestamps[t]), int(s.user_ids[t]), int(s.item_ids[t]),
                            *(int(s.feats.cat[t, cat_pos[n]]) for n in extra),
                            *(repr(float(v)) for v in s.feats.num[t]),
                            int(s.labels[t, 0]), int(s.labels[t, 1])])


# ---------------------------------------------------------------------------
# Time split and numerical standardization
# ---------------------------------------------------------------------------

def split_counts(n: int, ratios=(6, 2, 2)) -> list[int]:
    """Cumulative-floor allocation: boundary ``i`` sits at ``floor(n * cum_ratio_i)``."""
    fr = [Fraction(r).limit_denominator(10**9) for r in ratios]
    if not fr or any(r <= 0 for r in fr):
        raise ValidationError(f"split ratios must be positive, got {ratios}")
    total = sum(fr)
    bounds, acc = [], Fraction(0)
    for r in fr:
        acc += r
        bounds.append(math.floor(n * acc / total))
    counts = [b - a for a, b in zip([0] + bounds[:-1], bounds)]
    return counts


def split_by_time(ds: SessionDataset, ratios=(6, 2, 2)) -> tuple[SessionDataset, ...]:
    """Session-atomic split after ordering sessions by their first timestamp."""
    if ds.n_sessions < len(ratios):
        raise ValidationError(f"{ds.n_sessions} sessions cannot fill {len(ratios)} splits")
    ordered = sorted(ds.sessions, key=lambda s: (int(s.timestamps[0]), s.session_id))
    counts = split_counts(ds.n_sessions, ratios)
    if min(counts) == 0:
        raise ValidationError(f"split {counts} leaves an empty part")
    parts, start = [], 0
    for c in counts:
        parts.append(SessionDataset(ds.schema, ordered[start:start + c]))
        start += c
    return tuple(parts)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: SessionDataset) -> "Standardizer":
        num = ds.features().num
        if len(num) == 0:
            return cls(np.zeros(ds.schema.n_num), np.ones(ds.schema.n_num))
        std = num.std(axis=0)
        return cls(num.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, ds: SessionDataset) -> SessionDataset:
        sessions = [replace(s, feats=Features(s.feats.cat, (s.feats.num - self.mean) / self.std))
                    for s in ds.sessions]
        return SessionDataset(ds.schema, sessions)


# ---------------------------------------------------------------------------
# Gini feature ranking
# ---------------------------------------------------------------------------

def gini(labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        return 0.0
    p = y.mean()
    return float(1.0 - p * p - (1.0 - p) ** 2)


def gini_gain(values, labels) -> float:
    values = np.asarray(values)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    uniq, inv = np.unique(values, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq))
    pos = np.bincount(inv, weights=labels, minlength=len(uniq))
    p = pos / counts
    child = float(np.sum(counts / n * (1.0 - p * p - (1.0 - p) ** 2)))
    return gini(labels) - child


def gini_rank_features(ds: SessionDataset, label_field: str = "y_click") -> list[tuple[str, float]]:
    """Categorical features ranked by Gini impurity reduction (descending, ties by name)."""
    if label_field not in LABELS:
        raise ValidationError(f"label_field must be one of {LABELS}")
    y = ds.labels()[:, LABELS.index(label_field)]
    feats = ds.features()
    scores = [(name, gini_gain(feats.cat[:, j], y) if len(y) else 0.0)
              for j, name in enumerate(ds.schema.cat_names)]
    return sorted(scores, key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Implicit label binarization
# ---------------------------------------------------------------------------

CLICK_PLAY_FRACTION = 0.3
CONVERT_PLAY_FRACTION = 0.7


def binarize_play_duration(play_fraction: float) -> tuple[int, int]:
    """(click, convert) from the played fraction of a video's duration."""
    if not play_fraction >= 0:
        raise ValidationError(f"play fraction must be >= 0, got {play_fraction}")
    return int(play_fraction > CLICK_PLAY_FRACTION), int(play_fraction > CONVERT_PLAY_FRACTION)


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic session generator.

    Every user ``u`` and item ``i`` has latent factors ``p_u, q_i`` (two
    independent sets, one per task family).  A session draws one user, a
    session intent ``z ~ N(0, intent_scale^2)`` and ``1 + Poisson(mean_len - 1)``
    uniformly drawn items (capped at ``max_len``).  Row logits::

        click   = click_bias + affinity + cat_click[c_i] + group_click[g_u] + price_click * price_i + z
        convert = convert_bias + rho * (affinity + z) + sqrt(1 - rho^2) * affinity2
                  + cat_convert[c_i] + price_convert * price_i

    with ``affinity = factor_scale * <p_u, q_i> / sqrt(rank)``.  ``y_click ~
    Bernoulli(sigmoid(click))``; only clicked rows draw ``y_convert ~
    Bernoulli(sigmoid(convert))``.
    """

    n_sessions: int = 2000
    n_users: int = 300
    n_items: int = 500
    n_categories: int = 12
    n_user_groups: int = 8
    mean_len: float = 5.0
    max_len: int = 20
    rank: int = 4
    factor_scale: float = 1.5
    intent_scale: float = 0.5
    click_bias: float = -0.8
    convert_bias: float = -0.3
    rho: float = 0.7
    price_click: float = 0.3
    price_convert: float = -0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("n_sessions", "n_users", "n_items", "n_categories", "n_user_groups", "max_len", "rank"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.mean_len < 1:
            raise ValidationError("mean_len must be >= 1")
        if not -1.0 <= self.rho <= 1.0:
            raise ValidationError("rho must be in [-1, 1]")


SYNTHETIC_SCHEMA_FIELDS = ("user_id", "item_id", "user_group", "item_category")


def synthetic_schema(cfg: SyntheticConfig) -> FeatureSchema:
    return FeatureSchema(
        (("user_id", cfg.n_users), ("item_id", cfg.n_items),
         ("user_group", cfg.n_user_groups), ("item_category", cfg.n_categories)),
        ("price", "user_activity"))


@dataclass
class SyntheticTruth:
    p_click: np.ndarray  # per row, dataset row order
    p_convert_given_click: np.ndarray


def gen_synthetic(cfg: SyntheticConfig) -> tuple[SessionDataset, SyntheticTruth]:
    """Generate a seed-deterministic dataset and the true per-row probabilities."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    scale = cfg.factor_scale / math.sqrt(cfg.rank)
    pu, qi = rng.normal(size=(cfg.n_users, cfg.rank)), rng.normal(size=(cfg.n_items, cfg.rank))
    pu2, qi2 = rng.normal(size=(cfg.n_users, cfg.rank)), rng.normal(size=(cfg.n_items, cfg.rank))
    item_cat = rng.integers(0, cfg.n_categories, cfg.n_items)
    user_group = rng.integers(0, cfg.n_user_groups, cfg.n_users)
    cat_click = rng.normal(0, 0.5, cfg.n_categories)
    cat_convert = rng.normal(0, 0.5, cfg.n_categories)
    group_click = rng.normal(0, 0.5, cfg.n_user_groups)
    price = rng.normal(size=cfg.n_items)
    activity = rng.normal(size=cfg.n_users)

    lengths = np.minimum(1 + rng.poisson(cfg.mean_len - 1.0, cfg.n_sessions), cfg.max_len)
    users = rng.integers(0, cfg.n_users, cfg.n_sessions)
    intents = rng.normal(0, cfg.intent_scale, cfg.n_sessions)
    starts = rng.integers(0, 10_000 * cfg.n_sessions, cfg.n_sessions)
    schema = synthetic_schema(cfg)
    sessions, pc_all, pv_all = [], [], []
    width = len(str(cfg.n_sessions))
    for m in range(cfg.n_sessions):
        T = int(lengths[m])
        u = int(users[m])
        items = rng.integers(0, cfg.n_items, T)
        ts = starts[m] + np.cumsum(rng.integers(1, 60, T))
        aff = scale * (qi[items] @ pu[u])
        aff2 = scale * (qi2[items] @ pu2[u])
        lc = (cfg.click_bias + aff + cat_click[item_cat[items]] + group_click[user_group[u]]
              + cfg.price_click * price[items] + intents[m])
        lv = (cfg.convert_bias + cfg.rho * (aff + intents[m]) + math.sqrt(1 - cfg.rho ** 2) * aff2
              + cat_convert[item_cat[items]] + cfg.price_convert * price[items])
        pc, pv = expit(lc), expit(lv)
        yc = (rng.random(T) < pc).astype(np.int64)
        yv = yc * (rng.random(T) < pv).astype(np.int64)
        cat = np.stack([np.full(T, u), items, np.full(T, user_group[u]), item_cat[items]], axis=1)
        num = np.stack([price[items], np.full(T, activity[u])], axis=1)
        sessions.append(Session(f"s{m:0{width}d}", ts.astype(np.int64), np.full(T, u, dtype=np.int64),
                                items.astype(np.int64), Features(cat, num), np.stack([yc, yv], axis=1)))
        pc_all.append(pc)
        pv_all.append(pv)
    order = sorted(range(cfg.n_sessions), key=lambda i: (int(sessions[i].timestamps[0]), sessions[i].session_id))
    ds = SessionDataset(schema, [sessions[i] for i in order])
    truth = SyntheticTruth(np.concatenate([pc_all[i] for i in order]),
                           np.concatenate([pv_all[i] for i in order]))
    return ds, truth
