"""``rmtl`` command-line interface.

Every training-type command writes one subdirectory per seed holding
``config.resolved.txt``, ``checkpoints/``, ``epoch_log.csv`` and
``report.csv``.  Failures print a single line on stderr::

    error: code=<kind> exit=<n> message=<text>
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .backbones import VARIANTS, load_model, save_model
from .config import PRESETS, Hyperparams, parse_kv, preset, read_kv
from .errors import (
    CheckpointError,
    DivergenceError,
    ParseError,
    RmtlError,
    SchemaMismatchError,
    ValidationError,
)
from .metrics import TASKS, MetricReport, format_table, paired_t_test, read_report_csv, write_report_csv
from .rltrain import (
    evaluate,
    load_critic,
    prepare_splits,
    run_methods,
    save_critic,
    transfer_run,
)
from .rltrain.trainer import METHODS, Splits
from .sessiondata import (
    SyntheticConfig,
    gen_synthetic,
    gini_rank_features,
    load_schema,
    load_sessions,
    save_schema,
    save_sessions,
    split_by_time,
)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_SCHEMA = 4
EXIT_DATA = 5
EXIT_DIVERGENCE = 6
EXIT_CHECKPOINT = 7

TRANSFER_BACKBONES = ("esmm", "mmoe", "ple")
LOG_COLUMNS = ("model", "phase", "epoch", "train_loss", "delta", "delta_gate", "policy_steps", "weighted_steps")


class CliFailure(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliFailure(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def resolve_hyperparams(args) -> Hyperparams:
    """Preset, then config file, then ``--set`` overrides (later wins)."""
    try:
        hp = preset(args.preset)
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ValidationError(f"config file not found: {path}")
            hp = Hyperparams.from_mapping(read_kv(path), hp)
        if args.set:
            hp = Hyperparams.from_mapping(parse_kv("\n".join(args.set)), hp)
    except (ValidationError, ParseError, TypeError) as exc:
        raise CliFailure(EXIT_CONFIG, "config", str(exc)) from exc
    return hp


def resolve_seeds(args, hp: Hyperparams) -> list[int]:
    if not args.seeds:
        return [hp.seed]
    try:
        seeds = [int(s) for s in _csv_list(args.seeds)]
    except ValueError:
        raise CliFailure(EXIT_CONFIG, "config", f"bad seed list {args.seeds!r}") from None
    if not seeds:
        raise CliFailure(EXIT_CONFIG, "config", "seed list is empty")
    return seeds


def load_data(args):
    for p in (args.data, args.schema):
        if not Path(p).is_file():
            raise CliFailure(EXIT_DATA, "data", f"file not found: {p}")
    try:
        schema = load_schema(args.schema)
        ds = load_sessions(args.data, schema)
    except SchemaMismatchError as exc:
        raise CliFailure(EXIT_SCHEMA, "schema", str(exc)) from exc
    except (ParseError, ValidationError) as exc:
        raise CliFailure(EXIT_DATA, "data", str(exc)) from exc
    return schema, ds


def load_splits(args) -> Splits:
    _, ds = load_data(args)
    try:
        return prepare_splits(ds)
    except ValidationError as exc:
        raise CliFailure(EXIT_DATA, "data", str(exc)) from exc


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_resolved_config(path: Path, command: str, hp: Hyperparams, run_fields: dict):
    lines = [f"# rmtl {__version__} resolved configuration for '{command}'"]
    lines += [f"# {k}={v}" for k, v in run_fields.items()]
    path.write_text("\n".join(lines) + "\n" + hp.to_text(), encoding="utf-8")


def write_epoch_log(path: Path, rows: list[dict]):
    extra = sorted({k for r in rows for k in r} - set(LOG_COLUMNS))
    cols = [*LOG_COLUMNS, *extra]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def final_log_row(model_tag: str, val: MetricReport) -> dict:
    row = {"model": model_tag, "phase": "final"}
    for task, ms in val.values.items():
        for m, v in ms.items():
            row[f"val_{task}_{m}"] = v
    return row


def tagged(rows: list[dict], tag: str) -> list[dict]:
    return [{"model": tag, **r} for r in rows]


def seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed_{seed}"
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    return d


def save_outcome_checkpoints(ckdir: Path, prefix: str, outcome, seed: int, extra: dict | None = None):
    meta = {"seed": seed, "tag": outcome.test.model, **(extra or {})}
    save_model(ckdir / f"{prefix}actor.npz", outcome.model, "actor", meta)
    if outcome.critic is not None:
        save_critic(outcome.critic, ckdir / f"{prefix}critic.npz", {"variant": outcome.model.variant, **meta})


def _check_variant(v: str):
    if v not in VARIANTS:
        raise CliFailure(EXIT_CONFIG, "config", f"unknown backbone {v!r}; choose from {', '.join(VARIANTS)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        cfg = SyntheticConfig(n_sessions=args.sessions, n_users=args.users, n_items=args.items, seed=args.seed)
    except ValidationError as exc:
        raise CliFailure(EXIT_CONFIG, "config", str(exc)) from exc
    ds, truth = gen_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sessions(out / "sessions.csv", ds)
    save_schema(out / "schema.txt", ds.schema)
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "p_click", "p_convert_given_click"])
        for i, (pc, pv) in enumerate(zip(truth.p_click, truth.p_convert_given_click)):
            w.writerow([i, repr(float(pc)), repr(float(pv))])
    fields = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    (out / "config.resolved.txt").write_text("".join(f"{k}={v}\n" for k, v in fields.items()), encoding="utf-8")
    print(f"wrote {ds.n_sessions} sessions ({ds.n_rows} rows) to {out}")
    return EXIT_OK


def cmd_prep(args) -> int:
    _, ds = load_data(args)
    try:
        parts = split_by_time(ds)
        ranking = gini_rank_features(ds, args.label)
    except ValidationError as exc:
        raise CliFailure(EXIT_DATA, "data", str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        save_sessions(out / f"{name}.csv", part)
    save_schema(out / "schema.txt", ds.schema)
    with open(out / "gini.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "gini_gain"])
        for name, gain in ranking:
            w.writerow([name, repr(gain)])
    lines = [f"{n}_sessions={p.n_sessions}\n{n}_rows={p.n_rows}" for n, p in zip(("train", "val", "test"), parts)]
    (out / "split.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _run_seed_methods(args, command: str, variant: str, methods: list[str], tags: dict[str, str]) -> int:
    hp = resolve_hyperparams(args)
    seeds = resolve_seeds(args, hp)
    splits = load_splits(args)
    out = Path(args.out)
    for seed in seeds:
        outcomes = run_methods(splits, hp, variant, methods, seed=seed)
        d = seed_dir(out, seed)
        write_resolved_config(d / "config.resolved.txt", command, hp.replace(seed=seed),
                              {"data": args.data, "schema": args.schema, "variant": variant,
                               "methods": ",".join(methods)})
        log_rows, reports = [], []
        for method in methods:
            o = outcomes[method]
            tag = tags[method]
            o.test.model = o.val.model = tag
            prefix = "" if len(methods) == 1 else f"{method}_"
            save_outcome_checkpoints(d / "checkpoints", prefix, o, seed, {"method": method})
            log_rows += tagged(o.history, tag) + [final_log_row(tag, o.val)]
            reports += [o.val, o.test]
        write_epoch_log(d / "epoch_log.csv", log_rows)
        write_report_csv(d / "report.csv", reports)
        if len(methods) > 1:
            (d / "table.txt").write_text(_method_table(reports, [tags[m] for m in methods]), encoding="utf-8")
        print(f"seed {seed}: " + "; ".join(
            f"{r.model} ctr_auc={r.values['ctr']['auc']:.4f} ctcvr_auc={r.values['ctcvr']['auc']:.4f}"
            for r in reports if r.split == "test"))
    return EXIT_OK


def _method_table(reports: list[MetricReport], columns: list[str], split: str = "test") -> str:
    rows = [{"model": r.model, "task": t, **r.values[t]} for r in reports if r.split == split for t in TASKS]
    return format_table(rows, columns)


def cmd_pretrain(args) -> int:
    _check_variant(args.variant)
    return _run_seed_methods(args, "pretrain", args.variant, ["pretrain"], {"pretrain": args.variant})


def cmd_train(args) -> int:
    variant = args.variant or "ple"
    _check_variant(variant)
    if args.mode == "dple" and variant != "ple":
        raise CliFailure(EXIT_CONFIG, "config", "dple mode requires the ple backbone")
    hp = resolve_hyperparams(args)
    seeds = resolve_seeds(args, hp)
    splits = load_splits(args)
    out = Path(args.out)
    tag = "D-PLE" if args.mode == "dple" else f"RMTL-{variant.upper()}"
    for seed in seeds:
        outcome = run_methods(splits, hp, variant, [args.mode], seed=seed, tag=variant)[args.mode]
        outcome.test.model = outcome.val.model = tag
        d = seed_dir(out, seed)
        write_resolved_config(d / "config.resolved.txt", "train", hp.replace(seed=seed),
                              {"data": args.data, "schema": args.schema, "variant": variant, "mode": args.mode})
        meta = {"seed": seed, "tag": tag, "method": args.mode}
        save_model(d / "checkpoints" / "actor.npz", outcome.model, "actor", meta)
        if outcome.critic is not None:
            save_critic(outcome.critic, d / "checkpoints" / "critic.npz", {"variant": variant, **meta})
        write_epoch_log(d / "epoch_log.csv", tagged(outcome.history, tag) + [final_log_row(tag, outcome.val)])
        write_report_csv(d / "report.csv", [outcome.val, outcome.test])
        print(f"seed {seed}: {tag} test ctr_auc={outcome.test.values['ctr']['auc']:.4f} "
              f"ctcvr_auc={outcome.test.values['ctcvr']['auc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    schema, _ = load_data(args)
    ck = Path(args.checkpoint)
    if not ck.is_file():
        raise CliFailure(EXIT_CHECKPOINT, "checkpoint", f"file not found: {ck}")
    try:
        model, meta = load_model(ck, schema)
    except SchemaMismatchError as exc:
        raise CliFailure(EXIT_SCHEMA, "schema", str(exc)) from exc
    if meta.get("role") != "actor":
        raise CliFailure(EXIT_CHECKPOINT, "checkpoint", f"{ck}: expected an actor checkpoint")
    splits = load_splits(args)
    tag = str(meta.get("tag", model.variant))
    seed = int(meta.get("seed", 0))
    parts = {"train": splits.train, "val": splits.val, "test": splits.test}
    names = list(parts) if args.split == "all" else [args.split]
    reports = [evaluate(model, parts[n], tag, seed, n) for n in names]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", reports)
    for r in reports:
        print(f"{r.split}: " + " ".join(f"{t}_{m}={v:.6f}" for t, ms in r.values.items() for m, v in ms.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    _check_variant(args.variant)
    methods = _csv_list(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise CliFailure(EXIT_CONFIG, "config", f"unknown ablation methods {bad}; choose from {sorted(METHODS)}")
    tags = {m: m.upper() for m in methods}
    code = _run_seed_methods(args, "ablate", args.variant, methods, tags)
    out = Path(args.out)
    seeds = resolve_seeds(args, resolve_hyperparams(args))
    rows = []
    for s in seeds:
        rows += read_report_csv(out / f"seed_{s}" / "report.csv")
    summary = aggregate(rows, "test")
    table = format_table(summary, [tags[m] for m in methods])
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return code


def cmd_transfer(args) -> int:
    targets = _csv_list(args.targets)
    sources = _csv_list(args.sources)
    for v in targets + sources:
        if v not in TRANSFER_BACKBONES:
            raise CliFailure(EXIT_CONFIG, "config", f"transfer backbones must be among {TRANSFER_BACKBONES}, got {v!r}")
    hp = resolve_hyperparams(args)
    seeds = resolve_seeds(args, hp)
    schema, _ = load_data(args)
    external = None
    if args.critic:
        if not Path(args.critic).is_file():
            raise CliFailure(EXIT_CHECKPOINT, "checkpoint", f"file not found: {args.critic}")
        try:
            external = load_critic(args.critic, schema)
        except SchemaMismatchError as exc:
            raise CliFailure(EXIT_SCHEMA, "schema", str(exc)) from exc
        sources = [str(read_meta_variant(args.critic))]
    splits = load_splits(args)
    out = Path(args.out)
    for seed in seeds:
        rows, log_rows, reports = [], [], []
        critics = {}
        d = seed_dir(out, seed)
        write_resolved_config(d / "config.resolved.txt", "transfer", hp.replace(seed=seed),
                              {"data": args.data, "schema": args.schema, "targets": ",".join(targets),
                               "sources": ",".join(sources), "critic": args.critic or ""})
        if external is not None:
            critics[sources[0]] = external
        baselines, own = {}, {}
        for v in sorted(set(targets) | (set(sources) if external is None else set())):
            wanted = ["pretrain"] + (["rmtl"] if external is None and v in sources else [])
            outs = run_methods(splits, hp, v, wanted, seed=seed, tag=v)
            baselines[v] = outs["pretrain"]
            if "rmtl" in outs:
                critics[v] = outs["rmtl"].critic
                save_critic(outs["rmtl"].critic, d / "checkpoints" / f"critic_{v}.npz",
                            {"variant": v, "seed": seed})
                own[v] = outs["rmtl"]
        for tgt in targets:
            b = baselines[tgt]
            b.test.model = b.val.model = tgt.upper()
            rows.append((tgt, "none", b))
            for src in sources:
                if src == tgt and external is None:
                    o = own[tgt]
                    o.test.model = o.val.model = f"{tgt}-{tgt.upper()}"
                    rows.append((tgt, tgt, o))
                    continue
                o = transfer_run(splits, hp, tgt, critics[src], seed=seed, tag=f"{src}-{tgt.upper()}")
                save_model(d / "checkpoints" / f"actor_{src}-{tgt}.npz", o.model, "actor",
                           {"seed": seed, "tag": o.test.model, "critic_source": src})
                rows.append((tgt, src, o))
        for tgt, src, o in rows:
            log_rows += tagged(o.history, o.test.model) + [final_log_row(o.test.model, o.val)]
            reports += [o.val, o.test]
        write_epoch_log(d / "epoch_log.csv", log_rows)
        write_report_csv(d / "report.csv", reports)
        write_transfer_csv(d / "transfer.csv", seed, rows)
        text = transfer_table(rows, targets, ["none", *sorted({s for _, s, _ in rows if s != 'none'})])
        (d / "transfer.txt").write_text(text, encoding="utf-8")
        print(f"seed {seed}:\n{text}", end="")
    return EXIT_OK


def read_meta_variant(path) -> str:
    from .nncore import load_arrays

    _, meta = load_arrays(path)
    return meta.get("variant", "external")


TRANSFER_COLUMNS = ("seed", "target", "critic_source", "task", "auc", "logloss", "s_logloss")


def write_transfer_csv(path: Path, seed: int, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFER_COLUMNS)
        for tgt, src, o in rows:
            for task in TASKS:
                m = o.test.values[task]
                w.writerow([seed, tgt, src, task, repr(m["auc"]), repr(m["logloss"]), repr(m["s_logloss"])])


def transfer_table(rows, targets, sources, task: str = "ctr") -> str:
    """Per target backbone: test AUC and Logloss of the base model and of each critic source."""
    lookup = {(t, s): o.test.values[task] for t, s, o in rows}
    header = ["Target", "Metric", *[("base" if s == "none" else f"{s}-critic") for s in sources]]
    body = []
    for tgt in targets:
        for m in ("auc", "logloss"):
            cells = [tgt.upper(), f"{task}_{m}"]
            for s in sources:
                v = lookup.get((tgt, s))
                cells.append(f"{v[m]:.4f}" if v is not None else "-")
            body.append(cells)
    widths = [max(len(c) for c in col) for col in zip(header, *body)]
    fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([fmt(header), "-+-".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def aggregate(rows: list[dict], split: str) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        if r["split"] == split:
            groups[(r["model"], r["task"])].append(r)
    out = []
    for (model, task), rs in sorted(groups.items()):
        out.append({"model": model, "task": task, "n_seeds": len(rs),
                    **{m: float(np.mean([r[m] for r in rs])) for m in ("auc", "logloss", "s_logloss")}})
    return out


def cmd_report(args) -> int:
    files = []
    for inp in args.inputs:
        p = Path(inp)
        if p.is_file():
            files.append(p)
        elif p.is_dir():
            files += sorted(p.rglob("report.csv"))
        else:
            raise CliFailure(EXIT_DATA, "data", f"not found: {p}")
    if not files:
        raise CliFailure(EXIT_DATA, "data", "no report.csv files found")
    rows = []
    try:
        for f in files:
            rows += read_report_csv(f)
    except (KeyError, ValueError) as exc:
        raise CliFailure(EXIT_DATA, "data", f"malformed report file: {exc}") from exc
    summary = aggregate(rows, args.split)
    models = sorted({r["model"] for r in summary})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["model", "task", "n_seeds", "auc", "logloss", "s_logloss"], lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    text = format_table(summary, models)
    baseline = args.baseline
    tests = []
    if baseline:
        if baseline not in models:
            raise CliFailure(EXIT_CONFIG, "config", f"baseline model {baseline!r} not in reports")
        by = defaultdict(dict)
        for r in rows:
            if r["split"] == args.split:
                by[(r["model"], r["task"])][r["seed"]] = r
        for model in models:
            if model == baseline:
                continue
            for task in TASKS:
                a, b = by.get((model, task), {}), by.get((baseline, task), {})
                seeds = sorted(set(a) & set(b))
                for m in ("auc", "logloss", "s_logloss"):
                    if len(seeds) < 2:
                        continue
                    xa = [a[s][m] for s in seeds]
                    xb = [b[s][m] for s in seeds]
                    t, p = paired_t_test(xa, xb)
                    tests.append({"model": model, "baseline": baseline, "task": task, "metric": m,
                                  "n_seeds": len(seeds), "mean_diff": float(np.mean(xa) - np.mean(xb)),
                                  "t": t, "p": p})
        with open(out / "ttests.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["model", "baseline", "task", "metric", "n_seeds", "mean_diff", "t", "p"],
                               lineterminator="\n")
            w.writeheader()
            for r in tests:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        if tests:
            text += "\npaired t-tests vs " + baseline + " (by seed)\n"
            text += "".join(f"{r['model']} {r['task']} {r['metric']}: diff={r['mean_diff']:+.5f} "
                            f"t={r['t']:.3f} p={r['p']:.4f}\n" for r in tests)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_data(p):
    p.add_argument("--data", required=True, help="session CSV")
    p.add_argument("--schema", required=True, help="schema sidecar (key=value)")


def _add_run(p):
    _add_data(p)
    p.add_argument("--out", required=True, help="output directory (per-seed subdirectories)")
    p.add_argument("--config", help="key=value hyperparameter file")
    p.add_argument("--preset", default="full", choices=sorted(PRESETS),
                   help="base hyperparameters before --config and --set (default: full)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one hyperparameter")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rmtl", description="Multi-task CTR/CTCVR models with actor-critic loss weighting.")
    ap.add_argument("--version", action="version", version=f"rmtl {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic session benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("prep", help="validate, split 6:2:2 by time, rank features by Gini gain")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="y_click", choices=("y_click", "y_convert"))
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("pretrain", help="plain multi-task training of one backbone")
    _add_run(p)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pretrain, then actor-critic retraining (rmtl) or the DDPG baseline (dple)")
    _add_run(p)
    p.add_argument("--variant", choices=VARIANTS, help="backbone (default: ple)")
    p.add_argument("--mode", default="rmtl", choices=("rmtl", "dple"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric report of an actor checkpoint")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare loss-weight schedules on one backbone")
    _add_run(p)
    p.add_argument("--variant", default="ple", choices=VARIANTS)
    p.add_argument("--methods", default="cw,wl,nlc,rmtl", help="comma list from " + ",".join(sorted(METHODS)))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", help="retrain backbones with critics learned on other backbones")
    _add_run(p)
    p.add_argument("--targets", default=",".join(TRANSFER_BACKBONES))
    p.add_argument("--sources", default=",".join(TRANSFER_BACKBONES))
    p.add_argument("--critic", help="use this critic checkpoint as the only source")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report", help="aggregate per-seed report.csv files with paired t-tests")
    p.add_argument("inputs", nargs="+", help="report.csv files or directories searched recursively")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--baseline", help="model tag to test every other model against")
    p.set_defaults(func=cmd_report)
    return ap


def run_command(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliFailure as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except SchemaMismatchError as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except ValidationError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (RmtlError, OSError, ArithmeticError) as exc:
        return _fail(EXIT_OTHER, "runtime", str(exc))


def _fail(code: int, kind: str, message: str) -> int:
    one_line = " ".join(str(message).split())
    print(f"error: code={kind} exit={code} message={one_line}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
