"""Discretized optimal execution in a limit order book.

State ``(S_t, q_t)``: mid-price and remaining inventory. Action ``delta_t``:
quoted premium over the mid-price. Per step an order arrives with
probability ``min(lambda dt, 1)`` and, given an arrival, one unit sells with
probability ``min(1, exp(-kappa delta))`` at ``S_t + delta_t``. The episode
ends when the inventory is gone or at the horizon, where the remaining
inventory is settled at ``q (S - alpha q)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, logsumexp

from ..core import BehaviorSpec, Dataset, Metric, PolicySpec, TerminalRule
from ..is_estimators import TargetDensitySpec
from ..resamplers import default_rates
from ._gen import Actor, block_streams

BLOCK = 4096


@dataclass(frozen=True)
class LobParams:
    inventory: int = 3
    T: float = 20.0
    lam: float = 50.0 / 60.0
    kappa: float = 100.0
    alpha: float = 0.1
    S0: float = 30.0
    sigma: float = 0.1
    dt: float = 1.0
    behavior_low: float = -0.01
    behavior_high: float = 0.04

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def with_overrides(self, **kw) -> "LobParams":
        return replace(self, **kw)


def fill_probability(delta, kappa: float) -> np.ndarray:
    """``exp(-kappa delta)`` capped at one (negative premiums always fill)."""
    return np.minimum(1.0, np.exp(-kappa * np.asarray(delta, dtype=float)))


def settlement(params: LobParams, X) -> np.ndarray:
    X = np.atleast_2d(X)
    q = X[:, 1]
    return q * (X[:, 0] - params.alpha * q)


def terminal_rule(params: LobParams) -> TerminalRule:
    return TerminalRule(lambda X: np.atleast_2d(X)[:, 1] <= 0, lambda X: settlement(params, X))


def _log_omega(params: LobParams, tau: float, q: int) -> float:
    lam_t = params.lam * math.exp(-1.0)
    n = np.arange(q + 1)
    terms = n * math.log(lam_t) - gammaln(n + 1) - params.kappa * params.alpha * (q - n) ** 2
    if tau > 0:
        terms = terms + n * math.log(tau)
    else:
        terms = terms[:1]
    return float(logsumexp(terms))


def optimal_delta(params: LobParams, t: int, q: int) -> float:
    """Optimal premium with ``T - t`` time to go and ``q >= 1`` units left, in log space."""
    tau = params.T - t * params.dt
    return (1.0 + _log_omega(params, tau, q) - _log_omega(params, tau, q - 1)) / params.kappa


def optimal_delta_direct(params: LobParams, t: int, q: int) -> float:
    """Same formula with plain sums (overflows for large inputs)."""
    lam_t = params.lam * math.exp(-1.0)
    tau = params.T - t * params.dt

    def omega(qq):
        return sum(
            lam_t**n / math.factorial(n) * math.exp(-params.kappa * params.alpha * (qq - n) ** 2) * tau**n
            for n in range(qq + 1)
        )

    return (1.0 + math.log(omega(q) / omega(q - 1))) / params.kappa


def lob_optimal_policy(params: LobParams) -> PolicySpec:
    steps = params.n_steps
    qmax = max(params.inventory, 1)
    table = np.zeros((steps + 1, qmax + 1))
    for t in range(steps + 1):
        for q in range(1, qmax + 1):
            table[t, q] = optimal_delta(params, t, q)

    def act(t, X):
        q = np.clip(np.rint(X[:, 1]).astype(int), 0, qmax)
        return table[min(t, steps), q][:, None]

    return PolicySpec(act, name="lob_optimal")


def behavior_policy(params: LobParams) -> BehaviorSpec:
    lo, hi = params.behavior_low, params.behavior_high
    log_dens = -math.log(hi - lo)

    def sample(t, X, rng):
        return rng.uniform(lo, hi, size=(len(X), 1))

    def log_density(t, X, U):
        u = np.asarray(U, dtype=float).reshape(-1)
        return np.where((u >= lo) & (u <= hi), log_dens, -np.inf)

    return BehaviorSpec(sample, log_density, name="lob_uniform_quote")


def _rollout_block(params: LobParams, actor: Actor, m: int, rng: np.random.Generator):
    T = params.n_steps
    states = np.zeros((m, T + 1, 2))
    actions = np.zeros((m, T + 1, 1))
    rewards = np.zeros((m, T + 1))
    eff = np.full(m, T + 1, dtype=np.int64)
    x = np.tile([params.S0, float(params.inventory)], (m, 1))
    p_arrival = min(params.lam * params.dt, 1.0)
    alive = np.ones(m, dtype=bool)

    done0 = x[:, 1] <= 0
    if np.any(done0):
        states[done0, 0] = x[done0]
        eff[done0] = 1
        alive &= ~done0

    for t in range(T):
        rows = np.flatnonzero(alive)
        if len(rows) == 0:
            break
        xs = x[rows]
        delta = actor(t, xs, rng)
        states[rows, t] = xs
        actions[rows, t] = delta
        arrive = rng.random(len(rows)) < p_arrival
        fill = rng.random(len(rows)) < fill_probability(delta[:, 0], params.kappa)
        sold = arrive & fill & (xs[:, 1] > 0)
        rewards[rows, t] = np.where(sold, xs[:, 0] + delta[:, 0], 0.0)
        xn = np.column_stack(
            [xs[:, 0] + params.sigma * math.sqrt(params.dt) * rng.standard_normal(len(rows)), xs[:, 1] - sold]
        )
        x[rows] = xn
        ended = (xn[:, 1] <= 0) | (t + 1 == T)
        if np.any(ended):
            er = rows[ended]
            states[er, t + 1] = xn[ended]
            rewards[er, t + 1] = settlement(params, xn[ended])
            eff[er] = t + 2
            alive[er] = False

    # padding repeats the final state so every stored entry is a valid state
    idx = np.minimum(np.arange(T + 1)[None, :], eff[:, None] - 1)
    states = np.take_along_axis(states, idx[:, :, None], axis=1)
    return states, actions, rewards, eff


def lob_generate(params: LobParams, actor, n: int, rng=0) -> Dataset:
    act = Actor.wrap(actor)
    parts = [_rollout_block(params, act, m, g) for m, g in block_streams(n, BLOCK, rng)]
    s, a, r, e = (np.concatenate(p) for p in zip(*parts))
    return Dataset(s, a, r, e, np.ones(len(e), dtype=bool), meta={"env": "lob"})


@dataclass
class LobEnv:
    params: LobParams = field(default_factory=LobParams)
    target_sigma: float = 0.005

    id = "lob"
    allow_reuse = False
    reward_model = None
    tie_break = "index"
    fqe_nn_exponent = 0.25

    @property
    def horizon(self) -> int:
        return self.params.n_steps

    @property
    def terminal(self) -> TerminalRule:
        return terminal_rule(self.params)

    def target(self) -> PolicySpec:
        return lob_optimal_policy(self.params)

    def behavior(self) -> BehaviorSpec:
        return behavior_policy(self.params)

    def target_density(self) -> TargetDensitySpec:
        return TargetDensitySpec(self.target(), self.target_sigma)

    def metric(self) -> Metric:
        return Metric()

    def rates(self, n: int) -> tuple[int, int]:
        return default_rates(n)

    def generate(self, actor, n: int, rng=0) -> Dataset:
        return lob_generate(self.params, actor, n, rng)

    def closed_form_value(self):
        return None
