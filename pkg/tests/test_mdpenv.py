import math

import numpy as np
import pytest

from _helpers import TINY_ARCH, small_dataset
from rmtl import nncore
from rmtl.backbones import init_model
from rmtl.errors import StateError, ValidationError
from rmtl.mdpenv import (
    Batch,
    MdpConfig,
    ReplayBuffer,
    buffer_sample,
    buffer_store,
    build_episode,
    build_episodes,
    reward,
    write_episode_dump,
)
from rmtl.nncore import bce
from rmtl.sessiondata import Session


@pytest.fixture(scope="module")
def world():
    ds, _ = small_dataset(40, seed=1)
    model = init_model(ds.schema, "ple", nncore.make_rng(0), TINY_ARCH)
    return ds, model


def test_reward_values():
    assert reward(0.5, 0) == pytest.approx(math.log(0.5), abs=1e-12)
    assert -1e-6 < reward(1.0, 1) <= 0.0
    with pytest.raises(ValidationError):
        reward(0.5, 2)


def test_reward_is_negative_bce():
    rng = nncore.make_rng(0)
    a = rng.random(1000)
    y = rng.integers(0, 2, 1000)
    assert np.array_equal(reward(a, y), -bce(a, y))


def test_mdp_config_validation():
    assert MdpConfig().gamma == 0.95
    with pytest.raises(ValidationError):
        MdpConfig(gamma=1.5)


def test_episode_chaining(world):
    ds, model = world
    session = next(s for s in ds.sessions if len(s) >= 3)
    ep = build_episode(session, model)
    trs = ep.transitions()
    assert len(trs) == len(session)
    for t in range(len(trs) - 1):
        assert not trs[t].done
        assert trs[t].next_state.tobytes() == trs[t + 1].state.tobytes()
    assert trs[-1].done and trs[-1].next_state is None
    assert np.all(ep.rewards <= 0)
    for tr in trs:
        assert tr.r1 == reward(tr.a1, tr.y1) and tr.r2 == reward(tr.a2, tr.y2)


def test_single_step_session(world):
    ds, model = world
    s = ds.sessions[0]
    session = Session(s.session_id, s.timestamps[:1], s.user_ids[:1], s.item_ids[:1], s.feats.take([0]),
                      s.labels[:1])
    trs = build_episode(session, model).transitions()
    assert len(trs) == 1 and trs[0].done


def test_rebuild_is_bitwise_identical(world):
    ds, model = world
    a = build_episodes(ds, model)
    b = build_episodes(ds, model)
    for x, y in zip(a, b):
        assert x.states.tobytes() == y.states.tobytes() and x.actions.tobytes() == y.actions.tobytes()
    single = build_episode(ds.sessions[3], model)
    assert np.allclose(single.states, a[3].states, rtol=1e-12, atol=1e-14)


def test_buffer_single_episode_sample(world):
    ds, model = world
    buf = ReplayBuffer(rng=nncore.make_rng(0))
    ep = build_episode(ds.sessions[0], model)
    buffer_store(buf, ep)
    trs = buffer_sample(buf, 1)
    assert [t.t for t in trs] == list(range(len(ep)))
    with pytest.raises(StateError):
        ReplayBuffer().sample(4)


def test_buffer_fifo_eviction(world):
    ds, model = world
    buf = ReplayBuffer(capacity=2)
    eps = build_episodes(ds, model)[:3]
    for e in eps:
        buf.store(e)
    assert [e.session_id for e in buf.episodes] == [eps[1].session_id, eps[2].session_id]
    with pytest.raises(ValidationError):
        ReplayBuffer(capacity=0)


def test_sampling_collects_whole_episodes_deterministically(world):
    ds, model = world
    eps = build_episodes(ds, model)

    def draws(seed):
        buf = ReplayBuffer(rng=nncore.make_rng(seed))
        for e in eps:
            buf.store(e)
        assert buf.n_transitions == ds.n_rows
        return [[e.session_id for e in buf.sample_episodes(25)] for _ in range(5)]

    a, b = draws(3), draws(3)
    assert a == b
    order = [e.session_id for e in eps]
    for ids in a:
        assert len(set(ids)) == len(ids)
        total = sum(len(eps[order.index(i)]) for i in ids)
        assert total >= 25
        assert [order.index(i) for i in ids] == sorted(order.index(i) for i in ids)


def test_batch_successor_states(world):
    ds, model = world
    eps = build_episodes(ds, model)[:6]
    batch = Batch.from_episodes(eps)
    assert len(batch) == sum(len(e) for e in eps)
    for i in range(len(batch)):
        if batch.done[i]:
            assert np.all(batch.next_states[i] == 0)
        else:
            assert batch.next_states[i].tobytes() == batch.states[i + 1].tobytes()
            assert batch.steps[i + 1] == batch.steps[i] + 1
    assert np.array_equal(batch.next_feats.cat[~batch.done], batch.feats.cat[1:][~batch.done[:-1]])


def test_episode_dump(tmp_path, world):
    ds, model = world
    eps = build_episodes(ds, model)[:2]
    write_episode_dump(tmp_path / "dump.csv", eps)
    lines = (tmp_path / "dump.csv").read_text().splitlines()
    assert lines[0].startswith("session_id,t,a1")
    assert len(lines) == 1 + sum(len(e) for e in eps)
