"""Double-integrator LQR with a random-gain behavior policy.

Per-step reward is the quadratic cost ``x'Qx + R u^2`` stored as is, so a
better policy has a *smaller* value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..core import BehaviorSpec, Dataset, Metric, PolicySpec, RngStream
from ..errors import NumericError
from ..is_estimators import TargetDensitySpec, lqr_behavior_log_density
from ..resamplers import default_rates
from ._gen import Actor, block_streams

BLOCK = 4096


@dataclass(frozen=True)
class LqrParams:
    A: tuple = ((1.0, 1.0), (0.0, 1.0))
    B: tuple = (0.0, 1.0)
    Q: tuple = ((1.0, 0.0), (0.0, 0.0))
    R: float = 0.5
    noise_cov: tuple = ((1e-2, 0.0), (0.0, 1e-2))
    horizon: int = 10
    x0_mean: tuple = (-1.0, 0.0)
    x0_std: tuple = (0.5, 1.0)

    def arrays(self):
        return (
            np.array(self.A, dtype=float),
            np.array(self.B, dtype=float).reshape(2, 1),
            np.array(self.Q, dtype=float),
            float(self.R),
            np.array(self.noise_cov, dtype=float),
        )

    def with_overrides(self, **kw) -> "LqrParams":
        return replace(self, **{k: _tuplify(v) for k, v in kw.items()})


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


@dataclass(frozen=True)
class RiccatiSolution:
    gain: np.ndarray  # (1, 2)
    M: np.ndarray
    iterations: int


def riccati_gain(params: LqrParams, tol: float = 1e-12, max_iter: int = 10**5) -> RiccatiSolution:
    """Stationary gain ``(R + B'MB)^-1 B'MA`` from the Riccati fixed point.

    Iterates the Riccati map from ``M = Q`` until successive iterates agree
    to ``tol`` in max norm.
    """
    A, B, Q, R, _ = params.arrays()
    M = Q.copy()
    for it in range(1, max_iter + 1):
        S = R + (B.T @ M @ B).item()
        BtMA = B.T @ M @ A
        M_new = Q + A.T @ M @ A - (BtMA.T @ BtMA) / S
        if np.max(np.abs(M_new - M)) < tol:
            M = M_new
            break
        M = M_new
    else:
        raise NumericError(f"Riccati iteration did not converge in {max_iter} steps")
    gain = (B.T @ M @ A) / (R + (B.T @ M @ B).item())
    return RiccatiSolution(gain, M, it)


def finite_horizon_riccati(params: LqrParams):
    """Backward recursion ``M_T = Q``; returns the lists ``(M_t, K_t)``, ``t = 0..T``."""
    A, B, Q, R, _ = params.arrays()
    T = params.horizon
    Ms = [None] * (T + 1)
    Ks = [None] * (T + 1)
    Ms[T] = Q.copy()
    Ks[T] = np.zeros((1, 2))
    for t in range(T - 1, -1, -1):
        M = Ms[t + 1]
        S = R + (B.T @ M @ B).item()
        Ks[t] = (B.T @ M @ A) / S
        Ms[t] = Q + A.T @ M @ A - (A.T @ M @ B) @ Ks[t]
    return Ms, Ks


def lqr_closed_form_value(params: LqrParams, gain) -> float:
    """Exact expected cumulative cost of ``u = -gain x`` over ``T + 1`` steps.

    Backward recursion ``P_T = Q + K'RK``, ``P_t = Q + K'RK + Acl' P_{t+1} Acl``;
    the noise injected before step ``t + 1`` costs ``tr(P_{t+1} W)``.
    """
    A, B, Q, R, W = params.arrays()
    K = np.asarray(gain, dtype=float).reshape(1, 2)
    stage = Q + R * (K.T @ K)
    Acl = A - B @ K
    mu = np.array(params.x0_mean, dtype=float)
    Sigma0 = np.diag(np.array(params.x0_std, dtype=float) ** 2)
    P = stage.copy()
    noise_cost = 0.0
    for _ in range(params.horizon):
        noise_cost += float(np.trace(P @ W))
        P = stage + Acl.T @ P @ Acl
    return float(mu @ P @ mu + np.trace(P @ Sigma0) + noise_cost)


def linear_policy(gain) -> PolicySpec:
    k1, k2 = (float(v) for v in np.asarray(gain, dtype=float).reshape(-1))

    def act(t, X):
        return -(k1 * X[:, 0] + k2 * X[:, 1])[:, None]

    return PolicySpec(act, name="linear")


def behavior_policy() -> BehaviorSpec:
    def sample(t, X, rng):
        k1 = rng.uniform(0.0, 1.0, size=len(X))
        k2 = rng.uniform(1.0, 2.0, size=len(X))
        return -(k1 * X[:, 0] + k2 * X[:, 1])[:, None]

    return BehaviorSpec(sample, lqr_behavior_log_density, name="lqr_random_gain")


def _noise_factor(W: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(W)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _rollout_block(params: LqrParams, actor: Actor, m: int, rng: np.random.Generator):
    A, B, Q, R, W = params.arrays()
    L = _noise_factor(W)
    T = params.horizon
    states = np.empty((m, T + 1, 2))
    actions = np.empty((m, T + 1, 1))
    rewards = np.empty((m, T + 1))
    x = np.array(params.x0_mean) + np.array(params.x0_std) * rng.standard_normal((m, 2))
    for t in range(T + 1):
        u = actor(t, x, rng)
        states[:, t] = x
        actions[:, t] = u
        rewards[:, t] = Q[0, 0] * x[:, 0] ** 2 + (Q[0, 1] + Q[1, 0]) * x[:, 0] * x[:, 1] + Q[1, 1] * x[:, 1] ** 2 + R * u[:, 0] ** 2
        if t < T:
            e = rng.standard_normal((m, 2)) @ L.T
            x = x @ A.T + u @ B.T + e
    return states, actions, rewards


def lqr_generate(params: LqrParams, actor, n: int, rng=0) -> Dataset:
    """``n`` independent episodes under a policy or behavior spec.

    Episodes are simulated in blocks of ``BLOCK``; block ``b`` draws from
    its own stream, so output does not depend on how blocks are scheduled.
    """
    act = Actor.wrap(actor)
    parts = [_rollout_block(params, act, m, g) for m, g in block_streams(n, BLOCK, rng)]
    s, a, r = (np.concatenate(p) for p in zip(*parts))
    return Dataset(s, a, r, meta={"env": "lqr"})


@dataclass
class LqrEnv:
    params: LqrParams = field(default_factory=LqrParams)
    target_sigma: float = 0.01

    id = "lqr"
    allow_reuse = False
    reward_model = None
    tie_break = "index"
    fqe_nn_exponent = 0.25
    terminal = None

    @property
    def horizon(self) -> int:
        return self.params.horizon

    def target(self) -> PolicySpec:
        return linear_policy(riccati_gain(self.params).gain)

    def behavior(self) -> BehaviorSpec:
        return behavior_policy()

    def target_density(self) -> TargetDensitySpec:
        return TargetDensitySpec(self.target(), self.target_sigma)

    def metric(self) -> Metric:
        return Metric()

    def rates(self, n: int) -> tuple[int, int]:
        return default_rates(n)

    def generate(self, actor, n: int, rng=0) -> Dataset:
        return lqr_generate(self.params, actor, n, rng)

    def closed_form_value(self) -> Optional[float]:
        return lqr_closed_form_value(self.params, riccati_gain(self.params).gain)
