"""Episodic fitted Q-evaluation by backward induction.

One regressor per step ``t = 0..T``. ``Q_t`` is fitted on the logged pairs
``(X_t, U_t)`` against ``R_t + Q_{t+1}(X_{t+1}, u_{t+1}(X_{t+1}))``; the
bootstrap is dropped at an episode's last entry. With a terminal rule the
last regressor is the settlement itself and a transition into a settlement
entry bootstraps on the recorded settlement reward.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, Metric, PolicySpec, TerminalRule
from .errors import InvalidConfigError, InvalidInputError, NumericError
from .knn_index import PointIndex
from .resamplers import ValueEstimate


@dataclass(frozen=True)
class LinQuadFeatures:
    """``[1, z, upper-triangle of z z^T]`` for ``z = (x, u)``.

    ``ridge=None`` picks ``1e-8 * trace(Phi^T Phi) / p`` on column-scaled
    features; ``ridge=0`` is plain least squares and fails on rank deficiency.
    """

    ridge: Optional[float] = None

    @staticmethod
    def transform(Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(Z)
        iu, ju = np.triu_indices(Z.shape[1])
        return np.hstack([np.ones((len(Z), 1)), Z, Z[:, iu] * Z[:, ju]])

    @staticmethod
    def dim(d: int) -> int:
        return 1 + d + d * (d + 1) // 2


class _Constant:
    def __init__(self, c: float = 0.0):
        self.c = c

    def __call__(self, X, U):
        return np.full(len(X), self.c)


class _LinQuad:
    def __init__(self, beta: np.ndarray):
        self.beta = beta

    def __call__(self, X, U):
        return LinQuadFeatures.transform(np.hstack([X, U])) @ self.beta


class _KnnAverage:
    def __init__(self, index: PointIndex, targets: np.ndarray, k: int, metric: Metric):
        self.index, self.targets, self.k, self.metric = index, targets, k, metric

    def __call__(self, X, U):
        ids, _ = self.index.query(self.metric.features(X, U), self.k)
        return self.targets[ids].mean(axis=1)


class _Settlement:
    def __init__(self, terminal: TerminalRule):
        self.terminal = terminal

    def __call__(self, X, U):
        return np.asarray(self.terminal.reward(X), dtype=float).reshape(-1)


def _fit_linquad(X, U, y, feats: LinQuadFeatures) -> _LinQuad:
    Phi = LinQuadFeatures.transform(np.hstack([X, U]))
    p = Phi.shape[1]
    scale = np.max(np.abs(Phi), axis=0)
    scale[scale == 0] = 1.0
    Ps = Phi / scale
    if feats.ridge == 0:
        beta_s, _, rank, _ = np.linalg.lstsq(Ps, y, rcond=None)
        if rank < p:
            raise NumericError(f"singular normal equations (rank {rank} < {p}); set a positive ridge")
    else:
        A = Ps.T @ Ps
        lam = feats.ridge if feats.ridge is not None else 1e-8 * np.trace(A) / p
        try:
            beta_s = np.linalg.solve(A + lam * np.eye(p), Ps.T @ y)
        except np.linalg.LinAlgError as exc:
            raise NumericError(str(exc)) from exc
    return _LinQuad(beta_s / scale)


@dataclass
class FittedQ:
    """Step-indexed Q functions ``Q_0..Q_T``."""

    regressors: list
    kind: str
    policy: PolicySpec
    terminal: Optional[TerminalRule] = None
    params: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.regressors) - 1

    def predict(self, t: int, states, actions) -> np.ndarray:
        X = np.atleast_2d(np.asarray(states, dtype=float))
        U = np.asarray(actions, dtype=float).reshape(len(X), -1)
        return np.asarray(self.regressors[t](X, U), dtype=float).reshape(-1)

    def value(self, t: int, states) -> np.ndarray:
        X = np.atleast_2d(np.asarray(states, dtype=float))
        return self.predict(t, X, self.policy.act_batch(t, X))

    def _table(self, dataset: Dataset, logged: bool) -> np.ndarray:
        out = np.zeros((dataset.n, dataset.horizon + 1))
        valid = dataset.valid_mask()
        settle = valid & ~dataset.decision_mask()
        for t in range(dataset.horizon + 1):
            rows = np.flatnonzero(valid[:, t] & ~settle[:, t])
            if len(rows):
                X = dataset.states[rows, t]
                out[rows, t] = self.predict(t, X, dataset.actions[rows, t]) if logged else self.value(t, X)
            srows = np.flatnonzero(settle[:, t])
            if len(srows):
                out[srows, t] = dataset.rewards[srows, t]
        return out

    def q_table(self, dataset: Dataset) -> np.ndarray:
        """``Q_t`` at every logged pair; settlements map to their own reward."""
        return self._table(dataset, logged=True)

    def v_table(self, dataset: Dataset) -> np.ndarray:
        """``Q_t(x, u_t(x))`` at every logged state; settlements as in ``q_table``."""
        return self._table(dataset, logged=False)


def fqe_fit(
    dataset: Dataset,
    policy: PolicySpec,
    kind: str = "lin",
    ridge: Optional[float] = None,
    k_reg: Optional[int] = None,
    metric: Optional[Metric] = None,
    terminal: Optional[TerminalRule] = None,
) -> FittedQ:
    if kind not in ("lin", "nn"):
        raise InvalidConfigError(f"unknown FQE kind {kind!r}")
    if kind == "nn" and (k_reg is None or k_reg < 1):
        raise InvalidConfigError("FQE NN needs k_reg >= 1")
    if terminal is None and np.any(dataset.terminal_reward_included):
        raise InvalidInputError("dataset carries terminal settlements but no terminal rule was given")
    metric = metric or Metric()
    feats = LinQuadFeatures(ridge)
    T = dataset.horizon
    dec = dataset.decision_mask()
    eff = dataset.effective_len
    regs: list = [None] * (T + 1)
    for t in range(T, -1, -1):
        if terminal is not None and t == T:
            regs[t] = _Settlement(terminal)
            continue
        rows = np.flatnonzero(dec[:, t])
        if len(rows) == 0:
            regs[t] = _Constant(0.0)
            continue
        X = dataset.states[rows, t]
        U = dataset.actions[rows, t]
        y = dataset.rewards[rows, t].copy()
        has_next = t + 1 < eff[rows]
        if t < T and np.any(has_next):
            nr = rows[has_next]
            nxt_settle = ~dec[nr, t + 1]
            boot = np.empty(len(nr))
            boot[nxt_settle] = dataset.rewards[nr[nxt_settle], t + 1]
            live = nr[~nxt_settle]
            if len(live):
                Xn = dataset.states[live, t + 1]
                Un = policy.act_batch(t + 1, Xn)
                boot[~nxt_settle] = np.asarray(regs[t + 1](Xn, Un), dtype=float).reshape(-1)
            y[has_next] += boot
        if kind == "lin":
            regs[t] = _fit_linquad(X, U, y, feats)
        else:
            k = min(k_reg, len(rows))
            regs[t] = _KnnAverage(PointIndex(metric.features(X, U)), y, k, metric)
    return FittedQ(regs, kind, policy, terminal, {"ridge": ridge, "k_reg": k_reg})


def fqe_value(q: FittedQ, policy: PolicySpec, initial_states) -> ValueEstimate:
    """Mean of ``Q_0(x, u_0(x))`` over the given initial states."""
    t0 = time.perf_counter()
    X = np.atleast_2d(np.asarray(initial_states, dtype=float))
    vals = q.predict(0, X, policy.act_batch(0, X))
    est = ValueEstimate.from_returns(vals, f"fqe_{q.kind}", time.perf_counter() - t0)
    return est


def fqe_estimate(dataset: Dataset, policy: PolicySpec, kind: str = "lin", **kwargs) -> ValueEstimate:
    """Fit and evaluate at the dataset's own initial states."""
    t0 = time.perf_counter()
    q = fqe_fit(dataset, policy, kind, **kwargs)
    est = fqe_value(q, policy, dataset.initial_states())
    est.wall_clock_seconds = time.perf_counter() - t0
    return est


def default_k_reg(n: int, exponent: float) -> int:
    return max(1, math.floor(n**exponent + 1e-9))
