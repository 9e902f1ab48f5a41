"""Nearest-neighbor trajectory resampling estimators.

``knnr_estimate`` stitches ``l`` paths from logged transitions: at every step
it queries the ``K`` nearest logged state-action pairs to the current state
and the target action, picks the ``K_s``-th with ``K_s`` uniform on
``{1..K}``, books its reward and jumps to its recorded successor.
``mfmc_estimate`` is the model-free Monte Carlo baseline (1-NN, consuming
every used transition) and ``mnn_oracle`` averages over *all* ``K``-NN paths.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Dataset, Metric, PolicySpec, RngStream, TerminalRule, TransitionReward
from .errors import InvalidConfigError, InvalidInputError, ResourceError
from .knn_index import NeighborIndex

MNN_BUDGET = 10**6


@dataclass(frozen=True)
class KnnrConfig:
    K: int
    l: int
    allow_reuse: bool = True
    initial_state_mode: str = "dataset_uniform"
    seed: int = 0
    workers: int = 1
    tie_break: str = "index"

    def __post_init__(self):
        if self.K < 1:
            raise InvalidConfigError(f"K must be >= 1, got {self.K}")
        if self.l < 1:
            raise InvalidConfigError(f"l must be >= 1, got {self.l}")
        if self.initial_state_mode not in ("dataset_uniform", "sampler"):
            raise InvalidConfigError(f"unknown initial_state_mode {self.initial_state_mode!r}")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        if self.tie_break not in ("index", "random"):
            raise InvalidConfigError(f"unknown tie_break {self.tie_break!r}")
        if self.tie_break == "random" and not self.allow_reuse:
            raise InvalidConfigError("tie_break='random' requires allow_reuse=True")


@dataclass
class ValueEstimate:
    """Point estimate with the per-path (or per-episode) terms it averages."""

    value: float
    path_returns: np.ndarray
    std_error: float
    wall_clock_seconds: float = 0.0
    estimator: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_returns(cls, returns, estimator: str = "", seconds: float = 0.0, **extra) -> "ValueEstimate":
        r = np.asarray(returns, dtype=float)
        se = float(np.std(r, ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
        return cls(float(np.mean(r)), r, se, seconds, estimator, dict(extra))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path_returns"] = [float(v) for v in self.path_returns]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def default_rates(n: int) -> tuple[int, int]:
    """``K = floor(n**0.25)`` and ``l = floor(0.1 n)``, both at least 1."""
    if n < 10:
        raise InvalidInputError(f"default rates need n >= 10, got {n}")
    return max(1, math.isqrt(math.isqrt(n))), max(1, n // 10)


def _check_terminal(dataset: Dataset, terminal: Optional[TerminalRule]) -> None:
    if terminal is None and np.any(dataset.terminal_reward_included):
        raise InvalidInputError("dataset carries terminal settlements but no terminal rule was given")


def _n_steps(dataset: Dataset, terminal: Optional[TerminalRule]) -> int:
    # with a settlement the last stored entry is paid by the rule, not queried
    return dataset.horizon if terminal is not None else dataset.horizon + 1


class _PathEngine:
    """Shared immutable context for stitching paths."""

    def __init__(self, dataset, policy, metric, K, allow_reuse, terminal, reward_model=None, index=None):
        _check_terminal(dataset, terminal)
        self.ts = dataset.transitions
        if len(self.ts) == 0:
            raise InvalidInputError("dataset has no transitions")
        if K > len(self.ts):
            raise InvalidConfigError(f"K={K} exceeds the {len(self.ts)} available transitions")
        self.index = index if index is not None else NeighborIndex(dataset, metric)
        self.policy = policy
        self.metric = metric
        self.K = K
        self.allow_reuse = allow_reuse
        self.terminal = terminal
        self.reward_model = reward_model
        self.n_steps = _n_steps(dataset, terminal)
        self.m = len(self.ts)

    def run(self, starts: np.ndarray, ks: np.ndarray, ties: Optional[np.ndarray] = None) -> np.ndarray:
        """Returns of paths from ``starts`` (P, d1) with rank choices ``ks`` (P, n_steps).

        ``ties`` (P, n_steps) of uniforms switches to random tie-breaking.
        """
        P = len(starts)
        x = np.array(starts, dtype=float).reshape(P, -1)
        ret = np.zeros(P)
        alive = np.ones(P, dtype=bool)
        used = np.full((P, self.n_steps), -1, dtype=np.int64)
        for s in range(self.n_steps):
            rows = np.flatnonzero(alive)
            if len(rows) == 0:
                break
            xs = x[rows]
            us = self.policy.act_batch(s, xs)
            feats = self.metric.features(xs, us)
            choice = ks[rows, s]
            if self.allow_reuse:
                hits, dist = self.index.query_features(feats, self.K)
                pick = hits[np.arange(len(rows)), choice - 1]
                if ties is not None:
                    kth = dist[np.arange(len(rows)), choice - 1]
                    pick = self.index.points.sample_ties(feats, pick, kth, ties[rows, s])
            else:
                kq = min(self.K + s, self.m)
                hits, _ = self.index.query_features(feats, kq)
                prev = used[rows, :s]
                fresh = ~(hits[:, :, None] == prev[:, None, :]).any(axis=2)
                cum = np.cumsum(fresh, axis=1)
                if np.any(cum[:, -1] < choice):
                    raise InvalidConfigError("not enough unused transitions left for a no-reuse path")
                pos = np.argmax((cum == choice[:, None]) & fresh, axis=1)
                pick = hits[np.arange(len(rows)), pos]
            used[rows, s] = pick
            x[rows] = self.ts.next_states[pick]
            if self.reward_model is None:
                ret[rows] += self.ts.rewards[pick]
            else:
                ret[rows] += self.reward_model(xs, us, x[rows])
            if self.terminal is not None:
                xn = x[rows]
                done = np.asarray(self.terminal.is_terminal(xn), dtype=bool).reshape(-1)
                if s + 1 == self.n_steps:
                    done[:] = True
                if np.any(done):
                    ret[rows[done]] += np.asarray(self.terminal.reward(xn[done]), dtype=float).reshape(-1)
                    alive[rows[done]] = False
        return ret


def knnr_path_returns(
    dataset: Dataset,
    policy: PolicySpec,
    metric: Metric,
    K: int,
    starts,
    ks,
    allow_reuse: bool = True,
    terminal: Optional[TerminalRule] = None,
    reward_model: Optional[TransitionReward] = None,
) -> np.ndarray:
    """Path returns for explicit start states and explicit rank sequences.

    ``ks[j, s]`` in ``1..K`` is the neighbor rank taken by path ``j`` at step
    ``s``. This is the deterministic core of ``knnr_estimate``.
    """
    engine = _PathEngine(dataset, policy, metric, K, allow_reuse, terminal, reward_model)
    ks = np.asarray(ks, dtype=np.int64).reshape(len(starts), -1)
    if ks.shape[1] < engine.n_steps:
        raise InvalidInputError(f"need {engine.n_steps} ranks per path, got {ks.shape[1]}")
    if ks.min() < 1 or ks.max() > K:
        raise InvalidInputError("ranks must lie in 1..K")
    return engine.run(np.asarray(starts, dtype=float), ks)


def _draw_path_inputs(dataset, cfg, n_steps, initial_sampler, lo, hi):
    starts = np.empty((hi - lo, dataset.d1))
    ks = np.empty((hi - lo, n_steps), dtype=np.int64)
    ties = np.empty((hi - lo, n_steps)) if cfg.tie_break == "random" else None
    init = dataset.states[:, 0, :]
    for j in range(lo, hi):
        rng = RngStream(cfg.seed, j).generator()
        if cfg.initial_state_mode == "dataset_uniform":
            starts[j - lo] = init[rng.integers(dataset.n)]
        else:
            starts[j - lo] = np.asarray(initial_sampler(rng), dtype=float).reshape(-1)
        ks[j - lo] = rng.integers(1, cfg.K + 1, size=n_steps)
        if ties is not None:
            ties[j - lo] = rng.random(n_steps)
    return starts, ks, ties


def knnr_estimate(
    dataset: Dataset,
    policy: PolicySpec,
    metric: Metric,
    cfg: KnnrConfig,
    terminal: Optional[TerminalRule] = None,
    initial_sampler: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
    reward_model: Optional[TransitionReward] = None,
) -> ValueEstimate:
    """K-nearest-neighbor resampling estimate of the target policy's value.

    Path ``j`` draws its start state and its rank sequence from its own
    stream ``RngStream(cfg.seed, j)``, so the result does not depend on
    ``cfg.workers``.
    """
    if cfg.initial_state_mode == "sampler" and initial_sampler is None:
        raise InvalidConfigError("initial_state_mode='sampler' needs an initial_sampler")
    t0 = time.perf_counter()
    engine = _PathEngine(dataset, policy, metric, cfg.K, cfg.allow_reuse, terminal, reward_model)

    def work(bounds):
        lo, hi = bounds
        starts, ks, ties = _draw_path_inputs(dataset, cfg, engine.n_steps, initial_sampler, lo, hi)
        return engine.run(starts, ks, ties)

    w = min(cfg.workers, cfg.l)
    edges = np.linspace(0, cfg.l, w + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    if w == 1:
        parts = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=w) as pool:
            parts = list(pool.map(work, chunks))
    returns = np.concatenate(parts)
    return ValueEstimate.from_returns(
        returns,
        "knnr",
        time.perf_counter() - t0,
        K=cfg.K,
        l=cfg.l,
        allow_reuse=cfg.allow_reuse,
        tie_break=cfg.tie_break,
    )


def mfmc_estimate(
    dataset: Dataset,
    policy: PolicySpec,
    metric: Metric,
    l: int,
    rng=0,
    terminal: Optional[TerminalRule] = None,
    reward_model: Optional[TransitionReward] = None,
) -> ValueEstimate:
    """Model-free Monte Carlo: 1-NN paths over a shrinking transition set.

    The search is a masked linear scan; a tree cannot help because the set
    changes after every step. Start states are drawn uniformly from the
    dataset's initial states, path ``j`` from ``RngStream(seed, j)``.
    """
    _check_terminal(dataset, terminal)
    if l < 1:
        raise InvalidConfigError("l must be >= 1")
    t0 = time.perf_counter()
    ts = dataset.transitions
    m = len(ts)
    if m == 0:
        raise InvalidInputError("dataset has no transitions")
    n_steps = _n_steps(dataset, terminal)
    if l * n_steps > m:
        raise InvalidConfigError(f"l*steps = {l * n_steps} exceeds the {m} transitions")
    seed = rng.seed if isinstance(rng, RngStream) else int(rng)

    F = np.ascontiguousarray(metric.features(ts.states, ts.actions))
    consumed = np.zeros(m, dtype=bool)
    init = dataset.states[:, 0, :]
    returns = np.zeros(l)
    for j in range(l):
        g = RngStream(seed, j).generator()
        x = init[g.integers(dataset.n)].copy()
        r = 0.0
        for s in range(n_steps):
            u = policy.act(s, x)
            q = metric.features(x, u)[0]
            diff = F - q
            d2 = np.einsum("ij,ij->i", diff, diff)
            d2[consumed] = np.inf
            k = int(np.argmin(d2))
            if consumed[k]:
                raise InvalidConfigError("transition set exhausted mid-path")
            consumed[k] = True
            nxt = ts.next_states[k].copy()
            r += ts.rewards[k] if reward_model is None else float(reward_model(x, u, nxt)[0])
            x = nxt
            if terminal is not None:
                done = bool(np.asarray(terminal.is_terminal(x[None, :])).reshape(-1)[0])
                if done or s + 1 == n_steps:
                    r += float(np.asarray(terminal.reward(x[None, :])).reshape(-1)[0])
                    break
        returns[j] = r
    return ValueEstimate.from_returns(returns, "mfmc", time.perf_counter() - t0, l=l)


def mnn_oracle(
    dataset: Dataset,
    policy: PolicySpec,
    metric: Metric,
    K: int,
    start_states,
    terminal: Optional[TerminalRule] = None,
    allow_reuse: bool = True,
    budget: int = MNN_BUDGET,
    reward_model: Optional[TransitionReward] = None,
) -> float:
    """Average return over *all* ``K``-NN paths from each start state.

    Exponential in the horizon; for tests on tiny instances only.
    """
    engine = _PathEngine(dataset, policy, metric, K, allow_reuse, terminal, reward_model)
    starts = np.atleast_2d(np.asarray(start_states, dtype=float))
    if K ** engine.n_steps * len(starts) > budget:
        raise ResourceError(
            f"{K}^{engine.n_steps} paths x {len(starts)} starts exceeds the budget of {budget}"
        )
    ts = engine.ts
    index = engine.index

    def expand(x, s, used):
        # mean return-to-go over the K^(remaining) continuations
        u = policy.act(s, x)
        q = metric.features(x, u)
        kq = K if allow_reuse else min(K + len(used), engine.m)
        hits, _ = index.query_features(q, kq)
        hits = [h for h in hits[0] if allow_reuse or h not in used][:K]
        if len(hits) < K:
            raise InvalidConfigError("not enough unused transitions left for a no-reuse path")
        total = 0.0
        for h in hits:
            nxt = ts.next_states[h]
            val = ts.rewards[h] if reward_model is None else float(reward_model(x, u, nxt)[0])
            if terminal is not None:
                done = bool(np.asarray(terminal.is_terminal(nxt[None, :])).reshape(-1)[0])
                if done or s + 1 == engine.n_steps:
                    total += val + float(np.asarray(terminal.reward(nxt[None, :])).reshape(-1)[0])
                    continue
            if s + 1 < engine.n_steps:
                val += expand(nxt, s + 1, used + (h,))
            total += val
        return total / K

    return float(np.mean([expand(x, 0, ()) for x in starts]))


def knnr_sequence_expectation(
    dataset: Dataset,
    policy: PolicySpec,
    metric: Metric,
    K: int,
    start_states,
    terminal: Optional[TerminalRule] = None,
    allow_reuse: bool = True,
    reward_model: Optional[TransitionReward] = None,
) -> float:
    """Mean KNNR path return over every rank sequence in ``{1..K}^steps``.

    Runs the resampler's own path engine once per sequence, so it checks the
    production path code against ``mnn_oracle``'s recursive enumeration.
    """
    engine = _PathEngine(dataset, policy, metric, K, allow_reuse, terminal, reward_model)
    starts = np.atleast_2d(np.asarray(start_states, dtype=float))
    seqs = np.array(list(itertools.product(range(1, K + 1), repeat=engine.n_steps)), dtype=np.int64)
    totals = []
    for x in starts:
        rep = np.repeat(x[None, :], len(seqs), axis=0)
        totals.append(np.mean(engine.run(rep, seqs)))
    return float(np.mean(totals))
