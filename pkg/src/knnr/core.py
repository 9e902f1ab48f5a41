"""Domain types shared by estimators and environments.

Episodes are stored as fixed-length arrays of ``T + 1`` entries with an
``effective_len`` cursor; entries at or beyond the cursor are padding and are
ignored everywhere. The *transition set* is every ``(i, t)`` with
``t + 1 < effective_len[i]``, i.e. the data without each episode's final
period.

Policies, behavior samplers, densities and metric transforms all operate on
batches: states arrive as ``(m, d1)`` arrays and actions as ``(m, d2)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "Episode",
    "Dataset",
    "FlatRef",
    "TransitionSet",
    "PolicySpec",
    "BehaviorSpec",
    "Metric",
    "TerminalRule",
    "TransitionReward",
    "RngStream",
    "flatten",
    "distance",
    "save_dataset",
    "load_dataset",
]


def _as_batch(x, dim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if dim is not None and arr.shape[1] != dim:
        raise InvalidInputError(f"expected dimension {dim}, got {arr.shape[1]}")
    return arr


class FlatRef(NamedTuple):
    """Position ``(episode, time)`` of one transition in a dataset."""

    episode: int
    time: int


@dataclass(frozen=True)
class Episode:
    """One rolled-out trajectory.

    ``terminal_reward_included`` marks that the entry at ``effective_len - 1``
    is a settlement: its reward is a deterministic function of the state and
    its action is not a decision.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    effective_len: int
    terminal_reward_included: bool = False

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        actions = np.asarray(self.actions, dtype=float)
        if actions.ndim == 1:
            actions = actions.reshape(-1, 1)
        rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        if not (len(states) == len(actions) == len(rewards)):
            raise InvalidInputError("states, actions and rewards must share their length")
        if not 1 <= int(self.effective_len) <= len(states):
            raise InvalidInputError(
                f"effective_len must lie in 1..{len(states)}, got {self.effective_len}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "effective_len", int(self.effective_len))

    @property
    def n_decisions(self) -> int:
        return self.effective_len - 1 if self.terminal_reward_included else self.effective_len

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards[: self.effective_len]))


@dataclass(frozen=True)
class TransitionSet:
    """Flat, row-major view of a dataset's transitions.

    Row ``k`` is the transition ``(episode[k], time[k])``; ``next_states[k]``
    is the state recorded at ``time[k] + 1`` and ``next_is_last[k]`` tells
    whether that successor is the final stored entry of its episode.
    """

    episode: np.ndarray
    time: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_is_last: np.ndarray

    def __len__(self) -> int:
        return len(self.episode)


class Dataset:
    """``n`` episodes of common horizon ``T`` (stored length ``T + 1``)."""

    def __init__(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        effective_len: Optional[np.ndarray] = None,
        terminal_reward_included: Optional[np.ndarray] = None,
        meta: Optional[dict] = None,
    ):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        rewards = np.asarray(rewards, dtype=float)
        if actions.ndim == 2:
            actions = actions[:, :, None]
        if states.ndim != 3 or actions.ndim != 3 or rewards.ndim != 2:
            raise InvalidInputError("expected states (n,T+1,d1), actions (n,T+1,d2), rewards (n,T+1)")
        n, length = rewards.shape
        if n < 1:
            raise InvalidInputError("a dataset needs at least one episode")
        if states.shape[:2] != (n, length) or actions.shape[:2] != (n, length):
            raise InvalidInputError("every episode must have stored length T+1")
        if effective_len is None:
            effective_len = np.full(n, length)
        effective_len = np.asarray(effective_len, dtype=np.int64).reshape(n)
        if np.any(effective_len < 1) or np.any(effective_len > length):
            raise InvalidInputError("effective_len must lie in 1..T+1")
        if terminal_reward_included is None:
            terminal_reward_included = np.zeros(n, dtype=bool)
        terminal_reward_included = np.asarray(terminal_reward_included, dtype=bool).reshape(n)

        # padding never contributes: zero its rewards so plain sums are returns
        pad = np.arange(length)[None, :] >= effective_len[:, None]
        if np.any(rewards[pad] != 0.0):
            rewards = rewards.copy()
            rewards[pad] = 0.0

        for arr in (states, actions, rewards, effective_len, terminal_reward_included):
            arr.flags.writeable = False
        self.states = states
        self.actions = actions
        self.rewards = rewards
        self.effective_len = effective_len
        self.terminal_reward_included = terminal_reward_included
        self.meta = dict(meta or {})

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], meta: Optional[dict] = None) -> "Dataset":
        if not episodes:
            raise InvalidInputError("a dataset needs at least one episode")
        return cls(
            np.stack([e.states for e in episodes]),
            np.stack([e.actions for e in episodes]),
            np.stack([e.rewards for e in episodes]),
            np.array([e.effective_len for e in episodes]),
            np.array([e.terminal_reward_included for e in episodes]),
            meta=meta,
        )

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1] - 1

    @property
    def d1(self) -> int:
        return self.states.shape[2]

    @property
    def d2(self) -> int:
        return self.actions.shape[2]

    def episode(self, i: int) -> Episode:
        return Episode(
            self.states[i],
            self.actions[i],
            self.rewards[i],
            int(self.effective_len[i]),
            bool(self.terminal_reward_included[i]),
        )

    @property
    def episodes(self) -> list[Episode]:
        return [self.episode(i) for i in range(self.n)]

    def returns(self) -> np.ndarray:
        """Cumulative reward of every episode (padding is zero)."""
        return self.rewards.sum(axis=1)

    def initial_states(self) -> np.ndarray:
        return np.array(self.states[:, 0, :])

    def decision_mask(self) -> np.ndarray:
        """``(n, T+1)`` mask of entries that are genuine decisions."""
        steps = np.arange(self.horizon + 1)[None, :]
        n_dec = self.effective_len - self.terminal_reward_included.astype(np.int64)
        return steps < n_dec[:, None]

    def valid_mask(self) -> np.ndarray:
        return np.arange(self.horizon + 1)[None, :] < self.effective_len[:, None]

    @cached_property
    def _offsets(self) -> np.ndarray:
        counts = self.effective_len - 1
        return np.concatenate([[0], np.cumsum(counts)])

    @property
    def n_transitions(self) -> int:
        return int(self._offsets[-1])

    def flat_ref(self, k: int) -> FlatRef:
        if not 0 <= k < self.n_transitions:
            raise InvalidInputError(f"flat index {k} out of range")
        i = int(np.searchsorted(self._offsets, k, side="right") - 1)
        return FlatRef(i, int(k - self._offsets[i]))

    def flat_index(self, ref: FlatRef) -> int:
        i, t = ref
        if not (0 <= i < self.n and 0 <= t < self.effective_len[i] - 1):
            raise InvalidInputError(f"{ref} is not a transition")
        return int(self._offsets[i] + t)

    @cached_property
    def transitions(self) -> TransitionSet:
        length = self.horizon + 1
        steps = np.arange(length)
        mask = steps[None, :] + 1 < self.effective_len[:, None]
        ep, tt = np.nonzero(mask)
        ts = TransitionSet(
            episode=ep,
            time=tt,
            states=self.states[ep, tt],
            actions=self.actions[ep, tt],
            rewards=self.rewards[ep, tt],
            next_states=self.states[ep, tt + 1],
            next_is_last=(tt + 2 == self.effective_len[ep]),
        )
        for arr in vars(ts).values():
            arr.flags.writeable = False
        return ts

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.effective_len, other.effective_len)
            and np.array_equal(self.terminal_reward_included, other.terminal_reward_included)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, T={self.horizon}, d1={self.d1}, d2={self.d2})"


def flatten(dataset: Dataset) -> list[FlatRef]:
    """Every transition ``(i, t)`` in episode-major, time-minor order."""
    ts = dataset.transitions
    return [FlatRef(int(i), int(t)) for i, t in zip(ts.episode, ts.time)]


@dataclass(frozen=True)
class PolicySpec:
    """Deterministic feedback policy ``u_t(x)``.

    ``fn(t, X)`` maps a step index and an ``(m, d1)`` batch of states to an
    ``(m, d2)`` batch of actions.
    """

    fn: Callable[[int, np.ndarray], np.ndarray]
    name: str = "policy"

    def act_batch(self, t: int, states) -> np.ndarray:
        X = _as_batch(states)
        U = np.asarray(self.fn(t, X), dtype=float)
        return U.reshape(len(X), -1)

    def act(self, t: int, x) -> np.ndarray:
        return self.act_batch(t, x)[0]


@dataclass(frozen=True)
class BehaviorSpec:
    """Stochastic logging policy.

    ``sample(t, X, rng)`` draws one action per row; ``log_density(t, X, U)``
    (optional) is the natural-log density or log-pmf per row.
    """

    sample: Callable[[int, np.ndarray, np.random.Generator], np.ndarray]
    log_density: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "behavior"


@dataclass(frozen=True)
class TerminalRule:
    """Deterministic end-of-episode settlement.

    ``is_terminal(X)`` flags absorbing states (checked on every successor) and
    ``reward(X)`` is the settlement paid in a terminal state or at the horizon.
    """

    is_terminal: Callable[[np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TransitionReward:
    """Known reward model ``r(X, U, X_next)`` booked along stitched paths.

    Needed when the metric identifies state-action pairs whose recorded
    rewards differ (e.g. a projection onto post-action quantities): the
    path then books the reward of its own transition instead of the
    neighbor's.
    """

    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, X, U, X_next) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.asarray(self.fn(X, np.atleast_2d(U), np.atleast_2d(X_next)), dtype=float).reshape(len(X))


@dataclass(frozen=True)
class Metric:
    """Weighted Euclidean distance on (optionally transformed) state-action pairs."""

    transform: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    weights: Optional[tuple] = None

    def __post_init__(self):
        if self.weights is not None:
            w = tuple(float(v) for v in np.asarray(self.weights).reshape(-1))
            if any(not v > 0 for v in w):
                raise InvalidInputError("metric weights must be positive")
            object.__setattr__(self, "weights", w)

    def features(self, states, actions) -> np.ndarray:
        X = _as_batch(states)
        U = _as_batch(actions)
        if len(X) != len(U):
            raise InvalidInputError("state and action batches differ in length")
        F = np.hstack([X, U]) if self.transform is None else np.asarray(self.transform(X, U), dtype=float)
        F = F.reshape(len(X), -1)
        if self.weights is not None:
            if len(self.weights) != F.shape[1]:
                raise InvalidInputError(
                    f"{len(self.weights)} weights for {F.shape[1]} feature dimensions"
                )
            F = F * np.asarray(self.weights)
        return F


def distance(metric: Metric, a, b) -> float:
    """Distance between two ``(state, action)`` pairs under ``metric``."""
    fa = metric.features(*a)
    fb = metric.features(*b)
    if fa.shape != fb.shape:
        raise InvalidInputError(f"feature dimensions differ: {fa.shape[1]} vs {fb.shape[1]}")
    return float(np.sqrt(np.sum((fa - fb) ** 2)))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream)``.

    Backed by PCG64 seeded through ``SeedSequence(seed, spawn_key=(stream,))``
    so distinct stream ids give independent sequences.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream) & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "RngStream":
        return RngStream(derive_seed(self.seed, self.stream), stream)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
            words.append(0x1F)
        else:
            words.append(int(p) & (2**32 - 1))
            words.append((int(p) >> 32) & (2**32 - 1))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


# ---------------------------------------------------------------- serialization

_FORMAT = "knnr-dataset/1"


def dataset_to_dict(dataset: Dataset) -> dict:
    episodes = []
    for i in range(dataset.n):
        eff = int(dataset.effective_len[i])
        episodes.append(
            {
                "states": dataset.states[i].tolist(),
                "actions": dataset.actions[i].tolist(),
                "rewards": dataset.rewards[i].tolist(),
                "effective_len": eff,
                "terminal_reward_included": bool(dataset.terminal_reward_included[i]),
            }
        )
    return {
        "format": _FORMAT,
        "horizon": dataset.horizon,
        "d1": dataset.d1,
        "d2": dataset.d2,
        "meta": dataset.meta,
        "episodes": episodes,
    }


def dataset_from_dict(doc: dict) -> Dataset:
    try:
        eps = doc["episodes"]
        T, d1, d2 = int(doc["horizon"]), int(doc["d1"]), int(doc["d2"])
        states = np.array([e["states"] for e in eps], dtype=float).reshape(len(eps), T + 1, d1)
        actions = np.array([e["actions"] for e in eps], dtype=float).reshape(len(eps), T + 1, d2)
        rewards = np.array([e["rewards"] for e in eps], dtype=float).reshape(len(eps), T + 1)
        eff = np.array([e["effective_len"] for e in eps], dtype=np.int64)
        term = np.array([e.get("terminal_reward_included", False) for e in eps], dtype=bool)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed dataset document: {exc}") from exc
    return Dataset(states, actions, rewards, eff, term, meta=doc.get("meta"))


def save_dataset(dataset: Dataset, path) -> Path:
    """Write ``dataset`` as JSON (``.json``) or a numpy archive (``.npz``).

    JSON floats use Python's shortest round-trip repr, so both formats are
    lossless for float64.
    """
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(
            path,
            states=dataset.states,
            actions=dataset.actions,
            rewards=dataset.rewards,
            effective_len=dataset.effective_len,
            terminal_reward_included=dataset.terminal_reward_included,
            meta=np.array(json.dumps(dataset.meta, sort_keys=True)),
        )
    else:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataset_to_dict(dataset), fh, allow_nan=False)
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return Dataset(
                z["states"],
                z["actions"],
                z["rewards"],
                z["effective_len"],
                z["terminal_reward_included"],
                meta=json.loads(str(z["meta"])),
            )
    with open(path, encoding="utf-8") as fh:
        return dataset_from_dict(json.load(fh))
