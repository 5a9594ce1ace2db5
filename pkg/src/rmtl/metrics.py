"""AUC, Logloss, session-averaged Logloss and paired t-tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError, ValidationError
from .nncore import bce

TASKS = ("ctr", "ctcvr")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != len(y):
        raise ValidationError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = stats.rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValidationError("logloss of an empty set")
    return float(np.mean(bce(s, labels)))


@dataclass
class PredictionDump:
    """Per-row predictions: one entry per (session, step, task)."""

    session: np.ndarray
    step: np.ndarray
    task: np.ndarray
    score: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        if not np.all(np.isfinite(self.score)) or np.any((self.score < 0) | (self.score > 1)):
            raise ValidationError("scores must be finite and in [0, 1]")

    @classmethod
    def from_rows(cls, session_idx, steps, a1, a2, labels) -> "PredictionDump":
        n = len(a1)
        return cls(np.concatenate([session_idx, session_idx]), np.concatenate([steps, steps]),
                   np.repeat([0, 1], n), np.concatenate([a1, a2]),
                   np.concatenate([labels[:, 0], labels[:, 1]]))

    def task_view(self, k: int):
        m = self.task == k
        return self.session[m], self.score[m], self.label[m]


def s_logloss(dump: PredictionDump, k: int) -> float:
    """Mean over sessions of each session's mean BCE for task ``k``."""
    sess, score, label = dump.task_view(k)
    if score.size == 0:
        raise ValidationError("s_logloss of an empty set")
    losses = bce(score, label)
    _, inv = np.unique(sess, return_inverse=True)
    sums = np.bincount(inv, weights=losses)
    counts = np.bincount(inv)
    return float(np.mean(sums / counts))


@dataclass
class MetricReport:
    model: str
    seed: int
    split: str
    values: dict[str, dict[str, float]] = field(default_factory=dict)  # task -> metric -> value

    def row_dicts(self) -> list[dict]:
        return [{"model": self.model, "seed": self.seed, "split": self.split, "task": task, **m}
                for task, m in self.values.items()]


def evaluate_dump(dump: PredictionDump, model: str = "", seed: int = 0, split: str = "test") -> MetricReport:
    rep = MetricReport(model, seed, split)
    for k, task in enumerate(TASKS):
        _, score, label = dump.task_view(k)
        rep.values[task] = {"auc": auc(score, label), "logloss": logloss(score, label),
                            "s_logloss": s_logloss(dump, k)}
    return rep


REPORT_COLUMNS = ("model", "seed", "split", "task", "auc", "logloss", "s_logloss")


def write_report_csv(path, reports: list[MetricReport]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.row_dicts():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for m in ("auc", "logloss", "s_logloss"):
            r[m] = float(r[m])
    return rows


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test of ``a`` against ``b`` (paired by position)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValidationError("paired t-test needs two equal-length lists with >= 2 entries")
    d = a - b
    sd = d.std(ddof=1)
    mean = d.mean()
    if sd == 0.0 or not math.isfinite(sd):
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(len(d)))
    p = 2.0 * stats.t.sf(abs(t), df=len(d) - 1)
    return float(t), float(p)


def format_table(rows: list[dict], columns: list[str], metrics=("auc", "logloss", "s_logloss"),
                 digits: int = 4) -> str:
    """Aligned text table: one row per (task, metric), one column per model.

    ``rows`` hold ``model``, ``task`` and metric keys already averaged.
    """
    lookup = {(r["model"], r["task"]): r for r in rows}
    header = ["Task", "Metric", *columns]
    body = []
    for task in TASKS:
        for m in metrics:
            cells = [task.upper(), m]
            for c in columns:
                r = lookup.get((c, task))
                cells.append(f"{r[m]:.{digits}f}" if r is not None and m in r else "-")
            body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: " | ".join(str(c).rjust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *(fmt(b) for b in body)]) + "\n"
