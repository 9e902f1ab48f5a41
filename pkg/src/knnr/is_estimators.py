"""Self-normalized importance sampling baselines and the naive average.

All estimators are the *weighted* variants: per-episode (PEIS), per-decision
(PDIS) and doubly robust with per-decision weights (WDR). Deterministic
continuous targets are smoothed into a Gaussian around the policy action so
that ratios are defined; discrete targets use their exact point mass.

Entries that are not decisions (settlements, padding after early
termination) carry a ratio of one, so terminated episodes keep their weight
and contribute zero reward afterwards.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from .core import BehaviorSpec, Dataset, PolicySpec
from .errors import DegenerateWeightsError, DensityUnavailableError, SupportViolationError
from .resamplers import ValueEstimate

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TargetDensitySpec:
    """Randomized target: ``N(u_t(x), sigma^2)`` per action dimension.

    ``sigma=None`` means the target is used as an exact point mass (discrete
    actions): log-pmf 0 on the policy action and ``-inf`` elsewhere.
    """

    policy: PolicySpec
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive for continuous targets")

    def log_density(self, t: int, states, actions) -> np.ndarray:
        mu = self.policy.act_batch(t, states)
        U = np.asarray(actions, dtype=float).reshape(mu.shape)
        if self.sigma is None:
            return np.where(np.all(U == mu, axis=1), 0.0, -np.inf)
        z = (U - mu) / self.sigma
        return np.sum(-0.5 * z * z - math.log(self.sigma) - 0.5 * _LOG_2PI, axis=1)


@dataclass(frozen=True)
class ISWeights:
    """Per-step log ratios ``log pi_e - log pi_b``; zero on non-decision entries."""

    log_ratios: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.log_ratios, axis=1)

    @property
    def episode(self) -> np.ndarray:
        return self.log_ratios.sum(axis=1)


def is_weights(dataset: Dataset, behavior: BehaviorSpec, target: TargetDensitySpec) -> ISWeights:
    if behavior.log_density is None:
        raise DensityUnavailableError(
            f"support/density unavailable: behavior {behavior.name!r} has no log-density"
        )
    dec = dataset.decision_mask()
    out = np.zeros(dec.shape)
    for t in range(dec.shape[1]):
        rows = np.flatnonzero(dec[:, t])
        if len(rows) == 0:
            continue
        X = dataset.states[rows, t]
        U = dataset.actions[rows, t]
        lb = np.asarray(behavior.log_density(t, X, U), dtype=float).reshape(-1)
        bad = ~np.isfinite(lb)
        if np.any(bad):
            i = int(rows[np.flatnonzero(bad)[0]])
            raise SupportViolationError(
                f"behavior density is zero at the observed action of episode {i}, step {t}"
            )
        le = np.asarray(target.log_density(t, X, U), dtype=float).reshape(-1)
        out[rows, t] = le - lb
    return ISWeights(out)


def _normalize(logw: np.ndarray, what: str) -> np.ndarray:
    """Self-normalize log weights along axis 0."""
    top = np.max(logw, axis=0)
    if np.any(np.isneginf(top)):
        raise DegenerateWeightsError(f"all importance weights are zero ({what})")
    w = np.exp(logw - top)
    return w / w.sum(axis=0)


def peis_from_weights(weights: ISWeights, dataset: Dataset) -> ValueEstimate:
    wbar = _normalize(weights.episode, "per-episode")
    G = dataset.returns()
    value = float(np.dot(wbar, G))
    se = float(np.sqrt(np.sum(wbar**2 * (G - value) ** 2)))
    return ValueEstimate(value, dataset.n * wbar * G, se, estimator="peis")


def _per_decision(weights: ISWeights) -> np.ndarray:
    return _normalize(weights.cumulative, "per-decision")


def pdis_from_weights(weights: ISWeights, dataset: Dataset) -> ValueEstimate:
    wbar = _per_decision(weights)
    contrib = np.sum(wbar * dataset.rewards, axis=1)
    value = float(np.sum(np.sum(wbar * dataset.rewards, axis=0)))
    se = float(np.std(dataset.n * contrib, ddof=1) / math.sqrt(dataset.n)) if dataset.n > 1 else 0.0
    return ValueEstimate(value, dataset.n * contrib, se, estimator="pdis")


class QModel(Protocol):
    def q_table(self, dataset: Dataset) -> np.ndarray: ...

    def v_table(self, dataset: Dataset) -> np.ndarray: ...


def wdr_from_weights(weights: ISWeights, dataset: Dataset, model: QModel) -> ValueEstimate:
    """Weighted doubly robust with per-decision self-normalized weights.

    ``sum_t sum_i [w_it (R_it - Q_it) + w_i,t-1 V_it]`` with ``w_i,-1 = 1/n``.
    """
    wbar = _per_decision(weights)
    prev = np.hstack([np.full((dataset.n, 1), 1.0 / dataset.n), wbar[:, :-1]])
    Q = np.asarray(model.q_table(dataset), dtype=float)
    V = np.asarray(model.v_table(dataset), dtype=float)
    terms = wbar * (dataset.rewards - Q) + prev * V
    value = float(np.sum(np.sum(terms, axis=0)))
    contrib = dataset.n * terms.sum(axis=1)
    se = float(np.std(contrib, ddof=1) / math.sqrt(dataset.n)) if dataset.n > 1 else 0.0
    return ValueEstimate(value, contrib, se, estimator="wdr")


def _timed(fn, *args):
    t0 = time.perf_counter()
    est = fn(*args)
    est.wall_clock_seconds = time.perf_counter() - t0
    return est


def peis_estimate(dataset: Dataset, behavior: BehaviorSpec, target: TargetDensitySpec) -> ValueEstimate:
    return _timed(lambda: peis_from_weights(is_weights(dataset, behavior, target), dataset))


def pdis_estimate(dataset: Dataset, behavior: BehaviorSpec, target: TargetDensitySpec) -> ValueEstimate:
    return _timed(lambda: pdis_from_weights(is_weights(dataset, behavior, target), dataset))


def wdr_estimate(
    dataset: Dataset, behavior: BehaviorSpec, target: TargetDensitySpec, model: QModel
) -> ValueEstimate:
    return _timed(lambda: wdr_from_weights(is_weights(dataset, behavior, target), dataset, model))


def naive_average(dataset: Dataset) -> ValueEstimate:
    t0 = time.perf_counter()
    return ValueEstimate.from_returns(dataset.returns(), "na", time.perf_counter() - t0)


def lqr_behavior_log_density(t: int, states, actions) -> np.ndarray:
    """Exact log-density of ``U = -(K1 x1 + K2 x2)``, ``K1~U[0,1]``, ``K2~U[1,2]``.

    The two scaled uniforms convolve to a trapezoid (a triangle when
    ``|x1| = |x2|``); a zero state component collapses it to one uniform.
    Both components zero means a point mass and raises
    ``SupportViolationError``.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    u = np.asarray(actions, dtype=float).reshape(-1)
    x1, x2 = X[:, 0], X[:, 1]
    if np.any((x1 == 0) & (x2 == 0)):
        raise SupportViolationError("behavior action is a point mass at the origin state")
    lo1, hi1 = np.minimum(0.0, -x1), np.maximum(0.0, -x1)
    lo2, hi2 = np.minimum(-2 * x2, -x2), np.maximum(-2 * x2, -x2)
    w1, w2 = hi1 - lo1, hi2 - lo2
    with np.errstate(divide="ignore", invalid="ignore"):
        overlap = np.minimum(hi1, u - lo2) - np.maximum(lo1, u - hi2)
        dens = np.maximum(overlap, 0.0) / (w1 * w2)
        only2 = w1 == 0
        dens = np.where(only2, np.where((u >= lo2) & (u <= hi2), 1.0 / w2, 0.0), dens)
        only1 = w2 == 0
        dens = np.where(only1, np.where((u >= lo1) & (u <= hi1), 1.0 / w1, 0.0), dens)
        return np.log(dens)
