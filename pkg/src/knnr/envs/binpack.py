"""Online stochastic bin packing with capacity-coupled item sizes.

State: counts ``N_1..N_{B-1}`` of open bins per fill level plus the size
``j`` of the arriving item. Action ``0`` opens a new bin, ``b > 0`` puts the
item into a bin at level ``b``. Reward is the negative increase of unused
capacity. The next item is drawn from a Poisson law truncated to ``1..J``
whose intensity is the mean free space over open bins (``J`` if no bin is
open or the mean exceeds ``J``), computed from the post-action counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from ..core import BehaviorSpec, Dataset, Metric, PolicySpec, TerminalRule, TransitionReward
from ..errors import InvalidActionError, InvalidInputError
from ..is_estimators import TargetDensitySpec
from ._gen import Actor, block_streams

BLOCK = 4096


@dataclass(frozen=True)
class BinPackParams:
    T: int = 30
    J: int = 9
    B: int = 10

    def __post_init__(self):
        if not 1 <= self.J < self.B:
            raise InvalidInputError("need 1 <= J < B")

    def with_overrides(self, **kw) -> "BinPackParams":
        return replace(self, **kw)


def _split(params: BinPackParams, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    counts = np.rint(X[:, : params.B - 1]).astype(np.int64)
    j = np.rint(X[:, params.B - 1]).astype(np.int64)
    return counts, j


def feasible_mask(params: BinPackParams, counts: np.ndarray, j: np.ndarray) -> np.ndarray:
    """``(m, B)`` mask over actions ``0..B-1``."""
    counts = np.atleast_2d(counts)
    levels = np.arange(1, params.B)
    fits = (counts >= 1) & (levels[None, :] + np.asarray(j).reshape(-1, 1) <= params.B)
    return np.hstack([np.ones((len(counts), 1), dtype=bool), fits])


def apply_action(params: BinPackParams, counts, j, a):
    """Post-action counts and rewards for a batch; raises on infeasible actions."""
    counts = np.array(np.atleast_2d(counts), dtype=np.int64)
    j = np.asarray(j, dtype=np.int64).reshape(-1)
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    m = len(counts)
    ok = (a >= 0) & (a < params.B)
    ok[ok] = feasible_mask(params, counts[ok], j[ok])[np.arange(int(ok.sum())), a[ok]]
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise InvalidActionError(f"action {a[bad]} infeasible for item {j[bad]} and counts {counts[bad].tolist()}")
    rows = np.arange(m)
    new = a == 0
    reward = np.where(new, -(params.B - j), j).astype(float)
    nr = rows[new]
    counts[nr, j[new] - 1] += 1
    er = rows[~new]
    b = a[~new]
    counts[er, b - 1] -= 1
    level = b + j[~new]
    partial = level < params.B
    counts[er[partial], level[partial] - 1] += 1
    return counts, reward


def bp_step(params: BinPackParams, state, action):
    """One placement: ``(post-action counts, reward)`` for a single state."""
    counts, j = _split(params, state)
    nxt, r = apply_action(params, counts, j, [action])
    return nxt[0], float(r[0])


def item_intensity(params: BinPackParams, counts) -> np.ndarray:
    counts = np.atleast_2d(counts)
    n_open = counts.sum(axis=1)
    free = unused_capacity(params, counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = free / n_open
    return np.where((n_open == 0) | (lam > params.J), float(params.J), lam)


def item_pmf(params: BinPackParams, lam) -> np.ndarray:
    """Truncated Poisson pmf over ``1..J`` for each intensity."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    j = np.arange(1, params.J + 1)
    logp = j[None, :] * np.log(lam)[:, None] - gammaln(j + 1)[None, :]
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def bp_item_sampler(params: BinPackParams, counts, rng: np.random.Generator) -> np.ndarray:
    pmf = item_pmf(params, item_intensity(params, counts))
    cdf = np.cumsum(pmf, axis=1)
    u = rng.random(len(pmf))
    j = (u[:, None] >= cdf).sum(axis=1) + 1
    return np.minimum(j, params.J)


def sum_of_squares_action(params: BinPackParams, counts, j) -> np.ndarray:
    """Feasible action minimizing the post-action sum of squared counts; ties to the smallest action."""
    counts = np.atleast_2d(np.asarray(counts, dtype=np.int64))
    j = np.asarray(j, dtype=np.int64).reshape(-1)
    feas = feasible_mask(params, counts, j)
    m = len(counts)
    base = np.sum(counts**2, axis=1)
    score = np.full((m, params.B), np.inf)
    rows = np.arange(m)
    # opening a bin: N_j -> N_j + 1
    score[:, 0] = base + 2 * counts[rows, j - 1] + 1
    for b in range(1, params.B):
        ok = feas[:, b]
        if not np.any(ok):
            continue
        r = rows[ok]
        nb = counts[r, b - 1]
        s = base[r] - 2 * nb + 1
        level = b + j[r]
        part = level < params.B
        tgt = counts[r[part], level[part] - 1]
        s[part] += 2 * tgt + 1
        score[r, b] = s
    return np.argmin(score, axis=1)


def bp_sum_of_squares_policy(params: BinPackParams) -> PolicySpec:
    def act(t, X):
        counts, j = _split(params, X)
        return sum_of_squares_action(params, counts, j).astype(float)[:, None]

    return PolicySpec(act, name="sum_of_squares")


def behavior_policy(params: BinPackParams) -> BehaviorSpec:
    def sample(t, X, rng):
        counts, j = _split(params, X)
        feas = feasible_mask(params, counts, j)
        n_feas = feas.sum(axis=1)
        k = np.floor(rng.random(len(X)) * n_feas).astype(np.int64)
        k = np.minimum(k, n_feas - 1)
        pos = np.argmax(np.cumsum(feas, axis=1) > k[:, None], axis=1)
        return pos.astype(float)[:, None]

    def log_density(t, X, U):
        counts, j = _split(params, X)
        feas = feasible_mask(params, counts, j)
        a = np.rint(np.asarray(U, dtype=float).reshape(-1)).astype(np.int64)
        inside = (a >= 0) & (a < params.B)
        ok = np.zeros(len(a), dtype=bool)
        ok[inside] = feas[np.flatnonzero(inside), a[inside]]
        return np.where(ok, -np.log(feas.sum(axis=1)), -np.inf)

    return BehaviorSpec(sample, log_density, name="bp_uniform_feasible")


def bp_metric(params: BinPackParams) -> Metric:
    """Euclidean distance on post-action bin counts."""

    def project(X, U):
        counts, j = _split(params, X)
        a = np.rint(np.asarray(U, dtype=float).reshape(-1)).astype(np.int64)
        try:
            post, _ = apply_action(params, counts, j, a)
        except InvalidActionError as exc:
            raise InvalidInputError(str(exc)) from exc
        return post.astype(float)

    return Metric(transform=project)


def unused_capacity(params: BinPackParams, counts) -> np.ndarray:
    counts = np.atleast_2d(counts)
    return counts @ (params.B - np.arange(1, params.B)).astype(float)


def bp_reward_model(params: BinPackParams) -> TransitionReward:
    """Negative increment of unused capacity between a state and its successor.

    Equals the logged reward on real transitions; on stitched paths it keeps
    the reward consistent with the path's own states, since the projection
    metric matches pairs whose logged rewards differ.
    """

    def fn(X, U, X_next):
        c0, _ = _split(params, X)
        c1, _ = _split(params, X_next)
        return unused_capacity(params, c0) - unused_capacity(params, c1)

    return TransitionReward(fn)


def terminal_rule() -> TerminalRule:
    # the horizon entry carries a zero settlement; no state is absorbing
    return TerminalRule(
        lambda X: np.zeros(len(np.atleast_2d(X)), dtype=bool),
        lambda X: np.zeros(len(np.atleast_2d(X))),
    )


def _rollout_block(params: BinPackParams, actor: Actor, m: int, rng: np.random.Generator):
    T, B = params.T, params.B
    states = np.zeros((m, T + 1, B))
    actions = np.zeros((m, T + 1, 1))
    rewards = np.zeros((m, T + 1))
    counts = np.zeros((m, B - 1), dtype=np.int64)
    j = bp_item_sampler(params, counts, rng)
    for t in range(T):
        X = np.column_stack([counts, j]).astype(float)
        a = actor(t, X, rng)[:, 0]
        states[:, t] = X
        actions[:, t, 0] = a
        counts, r = apply_action(params, counts, j, np.rint(a).astype(np.int64))
        rewards[:, t] = r
        j = bp_item_sampler(params, counts, rng)
    states[:, T] = np.column_stack([counts, j])
    return states, actions, rewards


def bp_generate(params: BinPackParams, actor, n: int, rng=0) -> Dataset:
    act = Actor.wrap(actor)
    parts = [_rollout_block(params, act, m, g) for m, g in block_streams(n, BLOCK, rng)]
    s, a, r = (np.concatenate(p) for p in zip(*parts))
    return Dataset(s, a, r, None, np.ones(len(s), dtype=bool), meta={"env": "bp"})


@dataclass
class BinPackEnv:
    params: BinPackParams = field(default_factory=BinPackParams)

    id = "bp"
    allow_reuse = True
    tie_break = "random"
    fqe_nn_exponent = 0.5

    @property
    def horizon(self) -> int:
        return self.params.T

    @property
    def terminal(self) -> TerminalRule:
        return terminal_rule()

    @property
    def reward_model(self) -> TransitionReward:
        return bp_reward_model(self.params)

    def target(self) -> PolicySpec:
        return bp_sum_of_squares_policy(self.params)

    def behavior(self) -> BehaviorSpec:
        return behavior_policy(self.params)

    def target_density(self) -> TargetDensitySpec:
        return TargetDensitySpec(self.target(), None)

    def metric(self) -> Metric:
        return bp_metric(self.params)

    def rates(self, n: int) -> tuple[int, int]:
        if n < 10:
            raise InvalidInputError(f"default rates need n >= 10, got {n}")
        return (5 if n < 10**4 else 7), max(1, n // 10)

    def generate(self, actor, n: int, rng=0) -> Dataset:
        return bp_generate(self.params, actor, n, rng)

    def closed_form_value(self):
        return None
