import math

import numpy as np
import pytest

from knnr.core import Dataset, PolicySpec, TerminalRule
from knnr.errors import InvalidConfigError, NumericError
from knnr.fqe import FittedQ, LinQuadFeatures, default_k_reg, fqe_estimate, fqe_fit, fqe_value


def _quadratic(X, U):
    x1, x2, u = X[:, 0], X[:, 1], U[:, 0]
    return 1.0 + x1 - 2.0 * u + 0.5 * x1 * x2 + 3.0 * u * u - x2 * x2 + 0.7 * x1 * u


def _one_step(rng, n=200):
    X = rng.normal(size=(n, 1, 2))
    U = rng.normal(size=(n, 1, 1))
    return Dataset(X, U, _quadratic(X[:, 0], U[:, 0])[:, None])


ZERO = PolicySpec(lambda t, X: np.zeros((len(X), 1)))


def test_feature_dimension():
    assert LinQuadFeatures.dim(3) == 1 + 3 + 6
    assert LinQuadFeatures.transform(np.ones((4, 3))).shape == (4, 10)


def test_quadratic_reward_reproduced_on_held_out_points():
    rng = np.random.default_rng(0)
    q = fqe_fit(_one_step(rng), ZERO, "lin", ridge=0)
    Xh, Uh = rng.normal(size=(50, 2)), rng.normal(size=(50, 1))
    assert np.allclose(q.predict(0, Xh, Uh), _quadratic(Xh, Uh), rtol=0, atol=1e-8)


def test_residuals_orthogonal_to_features():
    rng = np.random.default_rng(1)
    d = _one_step(rng)
    y = d.rewards[:, 0] + 0.1 * rng.normal(size=d.n)
    d = Dataset(d.states, d.actions, y[:, None])
    q = fqe_fit(d, ZERO, "lin", ridge=0)
    Phi = LinQuadFeatures.transform(np.hstack([d.states[:, 0], d.actions[:, 0]]))
    resid = y - q.predict(0, d.states[:, 0], d.actions[:, 0])
    assert np.max(np.abs(Phi.T @ resid)) <= 1e-8 * np.max(np.abs(Phi.T @ y))


@pytest.mark.parametrize("kind", ["lin", "nn"])
def test_constant_reward_backward_induction(kind):
    rng = np.random.default_rng(2)
    n, T, c = 80, 4, 1.5
    d = Dataset(rng.normal(size=(n, T + 1, 2)), rng.normal(size=(n, T + 1, 1)), np.full((n, T + 1), c))
    q = fqe_fit(d, ZERO, kind, k_reg=3)
    assert q.horizon == T and len(q.regressors) == T + 1
    for t in range(T + 1):
        got = q.predict(t, d.states[:, t], d.actions[:, t])
        assert np.allclose(got, (T - t + 1) * c, atol=1e-8)


def test_settlement_is_last_regressor():
    rng = np.random.default_rng(3)
    n, T = 30, 3
    rewards = np.ones((n, T + 1))
    rewards[:, T] = 2.0
    d = Dataset(rng.normal(size=(n, T + 1, 2)), rng.normal(size=(n, T + 1, 1)), rewards, None, np.ones(n, bool))
    rule = TerminalRule(lambda X: np.zeros(len(X), bool), lambda X: np.full(len(np.atleast_2d(X)), 2.0))
    q = fqe_fit(d, ZERO, "lin", terminal=rule)
    for t in range(T):
        assert np.allclose(q.predict(t, d.states[:, t], d.actions[:, t]), (T - t) + 2.0, atol=1e-8)
    assert np.allclose(q.value(T, d.states[:, T]), 2.0)


def test_nn_k1_returns_training_target():
    rng = np.random.default_rng(4)
    d = _one_step(rng, 60)
    q = fqe_fit(d, ZERO, "nn", k_reg=1)
    assert np.array_equal(q.predict(0, d.states[:, 0], d.actions[:, 0]), d.rewards[:, 0])


def test_refit_is_deterministic(lqr_env):
    d = lqr_env.generate(lqr_env.behavior(), 300, rng=5)
    a = fqe_fit(d, lqr_env.target(), "lin")
    b = fqe_fit(d, lqr_env.target(), "lin")
    for ra, rb in zip(a.regressors, b.regressors):
        assert np.array_equal(ra.beta, rb.beta)


def test_singular_system_without_ridge():
    rng = np.random.default_rng(6)
    X = np.zeros((40, 1, 2))
    d = Dataset(X, rng.normal(size=(40, 1, 1)), rng.normal(size=(40, 1)))
    with pytest.raises(NumericError):
        fqe_fit(d, ZERO, "lin", ridge=0)
    fqe_fit(d, ZERO, "lin", ridge=1e-6)


def test_kind_and_k_validation():
    d = _one_step(np.random.default_rng(7), 10)
    with pytest.raises(InvalidConfigError):
        fqe_fit(d, ZERO, "tree")
    with pytest.raises(InvalidConfigError):
        fqe_fit(d, ZERO, "nn", k_reg=0)


def test_fqe_value_examples():
    five = FittedQ([lambda X, U: np.full(len(X), 5.0)], "lin", ZERO)
    assert fqe_value(five, ZERO, np.random.default_rng(0).normal(size=(7, 2))).value == 5.0
    q = fqe_fit(_one_step(np.random.default_rng(8)), ZERO, "lin", ridge=0)
    x = np.array([[0.3, -0.4]])
    assert fqe_value(q, ZERO, x).value == pytest.approx(_quadratic(x, np.zeros((1, 1)))[0], abs=1e-8)


@pytest.mark.parametrize("n,e,k", [(10**4, 0.25, 10), (100, 0.5, 10), (10**4, 0.5, 100), (3, 0.25, 1)])
def test_default_k_reg(n, e, k):
    assert default_k_reg(n, e) == k


@pytest.mark.slow
def test_lqr_fqe_lin_near_closed_form(lqr_env):
    d = lqr_env.generate(lqr_env.behavior(), 10**4, rng=31)
    est = fqe_estimate(d, lqr_env.target(), "lin")
    truth = lqr_env.closed_form_value()
    assert abs(est.value - truth) <= 3 * est.std_error
