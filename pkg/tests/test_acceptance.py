"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL/SKIP line; the lines are collected in
the pytest terminal summary under "acceptance criteria".  The desk-scale
experiments share one session-scoped fixture so the five-seed ablation runs
once.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from _helpers import (
    critic_grad_report,
    model_grad_report,
    random_features,
    record_criterion,
    repr_grad_report,
)
from rmtl import nncore
from rmtl.backbones import VARIANTS, Features, FeatureSchema, init_model
from rmtl.cli import run_command
from rmtl.config import preset
from rmtl.mdpenv import Batch, Episode, reward
from rmtl.metrics import TASKS, auc, paired_t_test, read_report_csv
from rmtl.nncore import Adam, bce
from rmtl.rltrain import (
    critic_forward_tasks,
    critic_update,
    init_critic,
    load_critic,
    prepare_splits,
    pretrain_actor,
    rng_streams,
    run_methods,
    save_critic,
    soft_update,
    td_error_batch,
    train_rl,
)
from rmtl.rltrain.critic import CriticArch
from rmtl.sessiondata import SyntheticConfig, gen_synthetic, save_schema, save_sessions

SEEDS = (0, 1, 2, 3, 4)
ABLATION = ("cw", "rmtl", "wl", "nlc")


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """The built-in benchmark at its default size, on disk and in memory."""
    ds, _ = gen_synthetic(SyntheticConfig(n_sessions=2000, seed=0))
    root = tmp_path_factory.mktemp("desk")
    save_sessions(root / "sessions.csv", ds)
    save_schema(root / "schema.txt", ds.schema)
    return ds, ["--data", str(root / "sessions.csv"), "--schema", str(root / "schema.txt")]


@pytest.fixture(scope="session")
def desk_runs(desk_data):
    ds, _ = desk_data
    splits = prepare_splits(ds)
    hp = preset("desk")
    start = time.process_time()
    runs = {seed: run_methods(splits, hp, "ple", list(ABLATION), seed=seed) for seed in SEEDS}
    return runs, time.process_time() - start


def mean_auc(runs, method, task):
    return float(np.mean([runs[s][method].test.values[task]["auc"] for s in SEEDS]))


# ---------------------------------------------------------------------------


def test_criterion_01_gradients():
    start = time.process_time()
    worst, failed = 0.0, []
    for seed in range(20):
        reports = {"repr": repr_grad_report(seed), "critic": critic_grad_report(seed)}
        reports.update({v: model_grad_report(v, seed) for v in VARIANTS})
        for name, rep in reports.items():
            worst = max(worst, rep.worst)
            if not rep.passed:
                failed.append(f"{name}@{seed}")
    elapsed = time.process_time() - start
    ok = not failed and elapsed <= 120
    record_criterion(1, "PASS" if ok else "FAIL",
                     f"7 networks x 20 seeds, worst rel error {worst:.2e} (limit 1e-4), "
                     f"{elapsed:.1f}s CPU (limit 120s), failures {failed or 'none'}")
    assert ok


def brute_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).sum() / (len(pos) * len(neg)))


def test_criterion_02_oracles():
    rng = nncore.make_rng(2024)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.random(n), 2 if i % 3 == 0 else 8)
        worst = max(worst, abs(auc(s, y) - brute_auc(s, y)))
    a = rng.random(1000)
    y = rng.integers(0, 2, 1000)
    exact = bool(np.array_equal(reward(a, y), -bce(a, y)))
    ok = worst <= 1e-12 and exact
    record_criterion(2, "PASS" if ok else "FAIL",
                     f"AUC vs brute force max gap {worst:.1e} on 100 instances (limit 1e-12); "
                     f"reward == -bce on 1000 pairs: {exact}")
    assert ok


def test_criterion_03_bellman_fixed_point():
    schema = FeatureSchema(categorical=(("step", 3),))
    labels = np.array([[1, 0], [0, 0], [1, 1]])
    actions = np.tile([0.7, 0.4], (3, 1))
    rewards = np.stack([reward(actions[:, k], labels[:, k]) for k in (0, 1)], axis=1)
    batch = Batch.from_episodes([Episode("e", np.zeros((3, 2)), actions, rewards, labels,
                                         Features(np.arange(3)[:, None], np.zeros((3, 0))))])
    returns = np.zeros((3, 2))
    acc = np.zeros(2)
    for t in (2, 1, 0):
        acc = rewards[t] + 0.95 * acc
        returns[t] = acc
    # frozen actor: its actions only enter through bootstrap terms, fixed to the logged ones
    from rmtl.backbones import ArchConfig, init_actor
    from scipy.special import logit

    actor = init_actor("shared_bottom", 2, nncore.make_rng(0), ArchConfig(tower_dims=(2,)))
    for k, tower in enumerate(actor.towers):
        for layer in tower.layers:
            layer.weight[:] = 0.0
            layer.bias[:] = 0.0
        tower.layers[-1].bias[:] = logit(actions[0, k])
    critic = init_critic(schema, nncore.make_rng(1), CriticArch(4, 8, (16, 8), 4, (16,), -1.0))
    target = init_critic(schema, nncore.make_rng(1), CriticArch(4, 8, (16, 8), 4, (16,), -1.0))
    opt = Adam(critic.named_arrays(), lr=1e-3)
    start = time.process_time()
    for _ in range(5000):
        res = td_error_batch(batch, critic, actor, target, 0.95)
        critic_update(critic, opt, res)
        soft_update(target.named_arrays(), critic.named_arrays(), 0.2)
    q, _ = critic_forward_tasks(critic, batch.feats, {1: actions[:, 0], 2: actions[:, 1]})
    err = float(np.max(np.abs(np.stack([q[1], q[2]], axis=1) - returns)))
    elapsed = time.process_time() - start
    ok = err <= 1e-2 and elapsed <= 60
    record_criterion(3, "PASS" if ok else "FAIL",
                     f"max |Q - discounted return| {err:.2e} after 5000 updates (limit 1e-2), {elapsed:.1f}s CPU")
    assert ok


def test_criterion_04_lambda_zero_reduction():
    ds, _ = gen_synthetic(SyntheticConfig(n_sessions=600, seed=3))
    splits = prepare_splits(ds)
    hp = preset("desk").replace(lam=0.0, epsilon=float("inf"), pretrain_epochs=2, rl_epochs=2,
                                max_critic_epochs=2, seed=7)

    def trajectory(method):
        rngs = rng_streams(hp.seed)
        model = init_model(splits.train.schema, "ple", rngs["init"], hp.arch)
        pretrain_actor(model, splits.train, splits.val, hp, rngs)
        steps = []
        train_rl(model, splits.train, splits.val, hp, method, rngs=rngs,
                 on_step=lambda i, branch, m: steps.append(
                     (branch, {k: v.copy() for k, v in m.actor.named_arrays().items()})))
        return steps

    a, b = trajectory("rmtl"), trajectory("cw")
    gap = max(max(float(np.max(np.abs(pa[k] - pb[k]))) for k in pa) for (_, pa), (_, pb) in zip(a, b))
    branches = {br for br, _ in a} | {br for br, _ in b}
    ok = len(a) == len(b) > 0 and gap <= 1e-10 and branches == {"weighted"}
    record_criterion(4, "PASS" if ok else "FAIL",
                     f"{len(a)} weighted steps, max per-step parameter gap {gap:.1e} (limit 1e-10)")
    assert ok


def test_criterion_05_weight_bounds(desk_runs):
    runs, _ = desk_runs
    counts = {"weights": 0, "q": 0, "violations": 0}
    min_rmtl, min_nlc, max_q = np.inf, np.inf, -np.inf
    for seed in SEEDS:
        for m in ("rmtl", "wl", "nlc"):
            audit = runs[seed][m].audit
            counts["weights"] += audit.n_weights
            counts["q"] += audit.n_q
            counts["violations"] += audit.violations
            max_q = max(max_q, audit.max_q)
            if m == "rmtl":
                min_rmtl = min(min_rmtl, audit.min_weight)
            if m == "nlc":
                min_nlc = min(min_nlc, audit.min_weight)
    ok = counts["violations"] == 0 and counts["q"] > 0 and min_rmtl >= 1 and min_nlc >= 0 and max_q <= 0
    record_criterion(5, "PASS" if ok else "FAIL",
                     f"{counts['weights']} weights and {counts['q']} critic outputs audited, "
                     f"{counts['violations']} violations (min RMTL weight {min_rmtl:.4f}, "
                     f"min NLC weight {min_nlc:.4f}, max Q {max_q:.4f})")
    assert ok


def test_criterion_06_directional_improvement(desk_runs):
    runs, cpu = desk_runs
    parts, ok = [], cpu <= 600
    for task in TASKS:
        r = [runs[s]["rmtl"].test.values[task]["auc"] for s in SEEDS]
        c = [runs[s]["cw"].test.values[task]["auc"] for s in SEEDS]
        diff = float(np.mean(r) - np.mean(c))
        t, p = paired_t_test(r, c)
        ok = ok and diff > 0
        parts.append(f"{task} RMTL {np.mean(r):.5f} vs CW {np.mean(c):.5f} diff {diff:+.5f} t={t:.3f} p={p:.3f}")
    record_criterion(6, "PASS" if ok else "FAIL",
                     "; ".join(parts) + f"; five seeds x four methods {cpu:.0f}s CPU (limit 600s)")
    assert ok


def test_criterion_07_ablation_ordering(desk_runs):
    runs, _ = desk_runs
    parts, holds = [], True
    for task in TASKS:
        m = {k: mean_auc(runs, k, task) for k in ABLATION}
        best_other = max(m["wl"], m["nlc"])
        holds = holds and best_other <= m["rmtl"] + 0.002 and m["cw"] <= m["rmtl"] + 0.002 \
            and best_other >= m["cw"]
        parts.append(f"{task} " + " ".join(f"{k.upper()}={m[k]:.5f}" for k in ABLATION))
    # soft check: the outcome is reported, never failed
    record_criterion(7, "SOFT-PASS" if holds else "SOFT-MISS", "; ".join(parts))


def test_criterion_08_transfer(desk_data, tmp_path, desk_runs):
    _, d = desk_data
    out = tmp_path / "transfer"
    start = time.process_time()
    code = run_command(["transfer", *d, "--out", str(out), "--preset", "desk", "--seeds", "0"])
    elapsed = time.process_time() - start
    rows = (out / "seed_0" / "transfer.csv").read_text().splitlines()[1:] if code == 0 else []
    pairs = {(r.split(",")[1], r.split(",")[2]) for r in rows}
    off_diag = {(t, s) for t in ("esmm", "mmoe", "ple") for s in ("esmm", "mmoe", "ple") if t != s}
    table = (out / "seed_0" / "transfer.txt").read_text() if code == 0 else ""
    shaped = all(t.upper() in table for t in ("esmm", "mmoe", "ple")) and "base" in table
    # serialization: Q values of a trained critic before and after a save/load round trip
    runs, _ = desk_runs
    critic = runs[0]["rmtl"].critic
    schema = runs[0]["rmtl"].model.schema
    save_critic(critic, tmp_path / "c.npz", {"variant": "ple"})
    loaded = load_critic(tmp_path / "c.npz", schema)
    rng = nncore.make_rng(8)
    feats = random_features(schema, 500, rng)
    acts = {1: rng.random(500), 2: rng.random(500)}
    qa, _ = critic_forward_tasks(critic, feats, acts)
    qb, _ = critic_forward_tasks(loaded, feats, acts)
    bitwise = all(qa[k].tobytes() == qb[k].tobytes() for k in (1, 2))
    ok = code == 0 and off_diag <= pairs and shaped and bitwise
    record_criterion(8, "PASS" if ok else "FAIL",
                     f"transfer exit {code}, {len(off_diag & pairs)}/6 ordered pairs reported, "
                     f"table shaped: {shaped}, critic Q bitwise after save/load: {bitwise}, {elapsed:.0f}s CPU")
    assert ok


@pytest.mark.slow
def test_criterion_09_full_data_reproduction(tmp_path):
    data, schema = os.environ.get("RMTL_FULL_DATA"), os.environ.get("RMTL_FULL_SCHEMA")
    if not (data and schema):
        record_criterion(9, "SKIP", "long-running full-data run; set RMTL_FULL_DATA and RMTL_FULL_SCHEMA "
                                    "to a preprocessed session CSV and its schema to enable")
        pytest.skip("full-data reproduction needs a user-supplied dataset")
    code = run_command(["train", "--data", data, "--schema", schema, "--out", str(tmp_path), "--variant", "ple"])
    rows = {r["task"]: r for r in read_report_csv(Path(tmp_path) / "seed_0" / "report.csv") if r["split"] == "test"}
    ctr, ctcvr = rows["ctr"]["auc"], rows["ctcvr"]["auc"]
    ok = code == 0 and abs(ctr - 0.7339) <= 0.005 and abs(ctcvr - 0.7419) <= 0.005
    record_criterion(9, "PASS" if ok else "FAIL", f"RMTL-PLE test AUC ctr {ctr:.4f} (target 0.7339 +- 0.005), "
                                                   f"ctcvr {ctcvr:.4f} (target 0.7419 +- 0.005)")
    assert ok


def test_criterion_10_determinism(tmp_path):
    ds, _ = gen_synthetic(SyntheticConfig(n_sessions=400, seed=5))
    save_sessions(tmp_path / "s.csv", ds)
    save_schema(tmp_path / "schema.txt", ds.schema)
    d = ["--data", str(tmp_path / "s.csv"), "--schema", str(tmp_path / "schema.txt")]
    fast = ["--preset", "desk", "--set", "pretrain_epochs=2", "--set", "rl_epochs=2", "--seeds", "3"]
    runs = [
        ["ablate", *d, "--methods", "cw,rmtl,decay", *fast],
        ["train", *d, "--mode", "dple", *fast],
        ["pretrain", *d, "--variant", "single_task", *fast],
    ]
    checked, mismatched = 0, []
    for i, argv in enumerate(runs):
        a, b, c = (tmp_path / f"{i}{x}" for x in "abc")
        assert run_command([*argv, "--out", str(a)]) == 0
        assert run_command([*argv, "--out", str(b)]) == 0
        # a rerun from the emitted resolved config alone
        cfg = a / "seed_3" / "config.resolved.txt"
        assert run_command([argv[0], *argv[1:argv.index("--preset")], "--config", str(cfg), "--out", str(c)]) == 0
        for name in ("report.csv", "epoch_log.csv"):
            ref = (a / "seed_3" / name).read_bytes()
            for other in (b, c):
                checked += 1
                if (other / "seed_3" / name).read_bytes() != ref:
                    mismatched.append(f"{argv[0]}:{name}")
    ok = not mismatched
    record_criterion(10, "PASS" if ok else "FAIL",
                     f"{checked} metric/log CSV reruns compared byte-for-byte, mismatches {mismatched or 'none'}")
    assert ok
