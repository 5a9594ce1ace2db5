"""Session MDP environment: episodes, rewards and the replay buffer.

Each session is one deterministic episode.  The state at step ``t`` is the
state-network output for row ``t``, the actions are the actor's
``(pCTR, pCTCVR)``, the rewards are negative BCE against the row labels and
the next state is simply row ``t + 1``.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nncore
from .backbones import Features, MtlModel, actor_forward
from .errors import StateError, ValidationError
from .sessiondata import Session, SessionDataset


@dataclass(frozen=True)
class MdpConfig:
    gamma: float = 0.95
    prob_min: float = nncore.PROB_MIN
    prob_max: float = nncore.PROB_MAX

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError(f"gamma must be in [0, 1], got {self.gamma}")


def reward(a, y):
    """``y log a + (1 - y) log(1 - a)`` on clamped actions; always <= 0."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("labels must be 0 or 1")
    a = nncore.clamp_prob(np.asarray(a, dtype=np.float64))
    r = y * np.log(a) + (1.0 - y) * np.log1p(-a)
    return float(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    a1: float
    a2: float
    r1: float
    r2: float
    next_state: np.ndarray | None  # None marks the terminal step
    done: bool
    session_id: str
    t: int
    y1: int
    y2: int


@dataclass
class Episode:
    session_id: str
    states: np.ndarray  # (T, d)
    actions: np.ndarray  # (T, 2)
    rewards: np.ndarray  # (T, 2)
    labels: np.ndarray  # (T, 2)
    feats: Features

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> list[Transition]:
        T = len(self)
        return [Transition(self.states[t], float(self.actions[t, 0]), float(self.actions[t, 1]),
                           float(self.rewards[t, 0]), float(self.rewards[t, 1]),
                           self.states[t + 1] if t + 1 < T else None, t + 1 == T,
                           self.session_id, t, int(self.labels[t, 0]), int(self.labels[t, 1]))
                for t in range(T)]


def _episode(session: Session, states, a1, a2) -> Episode:
    actions = np.stack([a1, a2], axis=1)
    labels = session.labels.astype(np.float64)
    rewards = np.stack([reward(a1, labels[:, 0]), reward(a2, labels[:, 1])], axis=1)
    return Episode(session.session_id, states, actions, rewards, session.labels.copy(), session.feats)


def build_episode(session: Session, model: MtlModel) -> Episode:
    """Roll one session through the frozen state network and actor."""
    if len(session) == 0:
        raise ValidationError(f"session {session.session_id} is empty")
    states, _ = model.states(session.feats)
    a1, a2, _ = actor_forward(model.actor, states)
    return _episode(session, states, a1, a2)


def build_episodes(ds: SessionDataset, model: MtlModel) -> list[Episode]:
    """Vectorized :func:`build_episode` over every session, in dataset order."""
    if ds.n_sessions == 0:
        return []
    states, _ = model.states(ds.features())
    a1, a2, _ = actor_forward(model.actor, states)
    out, start = [], 0
    for s in ds.sessions:
        stop = start + len(s)
        out.append(_episode(s, states[start:stop], a1[start:stop], a2[start:stop]))
        start = stop
    return out


@dataclass
class Batch:
    """Transitions of several whole episodes, stacked row-wise."""

    states: np.ndarray
    next_states: np.ndarray  # rows at terminal steps are zeros
    actions: np.ndarray
    rewards: np.ndarray
    labels: np.ndarray
    done: np.ndarray  # bool
    feats: Features
    next_feats: Features  # terminal rows repeat their own features; masked by ``done``
    steps: np.ndarray
    session_ids: list[str]

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def from_episodes(cls, episodes: list[Episode]) -> "Batch":
        if not episodes:
            raise ValidationError("cannot build an empty batch")
        states = np.concatenate([e.states for e in episodes])
        nxt, ncat, nnum, done, steps = [], [], [], [], []
        for e in episodes:
            T = len(e)
            nxt.append(np.vstack([e.states[1:], np.zeros((1, e.states.shape[1]))]))
            idx = np.minimum(np.arange(1, T + 1), T - 1)
            ncat.append(e.feats.cat[idx])
            nnum.append(e.feats.num[idx])
            d = np.zeros(T, dtype=bool)
            d[-1] = True
            done.append(d)
            steps.append(np.arange(T))
        return cls(states, np.concatenate(nxt), np.concatenate([e.actions for e in episodes]),
                   np.concatenate([e.rewards for e in episodes]),
                   np.concatenate([e.labels for e in episodes]), np.concatenate(done),
                   Features.concat([e.feats for e in episodes]),
                   Features(np.concatenate(ncat), np.concatenate(nnum)), np.concatenate(steps),
                   [e.session_id for e in episodes for _ in range(len(e))])


class ReplayBuffer:
    """FIFO store of whole episodes with seeded episode-level sampling."""

    def __init__(self, capacity: int | None = None, rng: np.random.Generator | None = None):
        if capacity is not None and capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque()
        self.rng = rng if rng is not None else nncore.make_rng(0)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    def clear(self):
        self.episodes.clear()

    def store(self, episode: Episode):
        self.episodes.append(episode)
        if self.capacity is not None:
            while len(self.episodes) > self.capacity:
                self.episodes.popleft()

    def sample_episodes(self, batch_size: int) -> list[Episode]:
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.episodes:
            raise StateError("cannot sample from an empty replay buffer")
        order = self.rng.permutation(len(self.episodes))
        picked, total = [], 0
        for i in order:
            picked.append(int(i))
            total += len(self.episodes[i])
            if total >= batch_size:
                break
        return [self.episodes[i] for i in sorted(picked)]

    def sample(self, batch_size: int) -> Batch:
        return Batch.from_episodes(self.sample_episodes(batch_size))


def buffer_store(buf: ReplayBuffer, episode: Episode):
    buf.store(episode)


def buffer_sample(buf: ReplayBuffer, batch_size: int) -> list[Transition]:
    return [tr for ep in buf.sample_episodes(batch_size) for tr in ep.transitions()]


DUMP_COLUMNS = ("session_id", "t", "a1", "a2", "r1", "r2", "y_click", "y_convert", "done")


def write_episode_dump(path, episodes: list[Episode]):
    """One transition per line; debugging aid only."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_COLUMNS)
        for e in episodes:
            for tr in e.transitions():
                w.writerow([tr.session_id, tr.t, repr(tr.a1), repr(tr.a2), repr(tr.r1), repr(tr.r2),
                            tr.y1, tr.y2, int(tr.done)])
