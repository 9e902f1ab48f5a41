import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from knnr.core import distance
from knnr.envs.binpack import (
    BinPackParams,
    behavior_policy,
    bp_generate,
    bp_item_sampler,
    bp_metric,
    bp_reward_model,
    bp_step,
    bp_sum_of_squares_policy,
    item_intensity,
    item_pmf,
    unused_capacity,
)
from knnr.errors import InvalidActionError, InvalidInputError

P = BinPackParams()


def _state(j, **levels):
    """State vector from ``N<b>=count`` keywords and the arriving item ``j``."""
    counts = [0] * (P.B - 1)
    for k, v in levels.items():
        counts[int(k[1:]) - 1] = v
    return np.array(counts + [j], dtype=float)


def _feasible(x):
    counts, j = x[:-1], int(x[-1])
    return [0] + [b for b in range(1, P.B) if counts[b - 1] >= 1 and b + j <= P.B]


def _free(counts):
    return sum(c * (P.B - b) for b, c in enumerate(counts, start=1))


# --------------------------------------------------------------------- step


def test_open_bin_for_large_item():
    counts, r = bp_step(P, _state(9), 0)
    assert counts.tolist() == _state(0, N9=1)[:-1].tolist()
    assert r == -1.0


def test_item_fills_bin_exactly():
    counts, r = bp_step(P, _state(9, N1=1), 1)
    assert counts.sum() == 0
    assert r == 9.0


def test_item_moves_bin_up():
    counts, r = bp_step(P, _state(3, N5=2), 5)
    assert counts.tolist() == _state(0, N5=1, N8=1)[:-1].tolist()
    assert r == 3.0


@pytest.mark.parametrize("x,a", [(_state(3), 2), (_state(6, N5=1), 5), (_state(3), 10), (_state(3), -1)])
def test_infeasible_actions_rejected(x, a):
    with pytest.raises(InvalidActionError):
        bp_step(P, x, a)


# ------------------------------------------------------------------ sampler


def test_intensity_examples():
    assert item_intensity(P, _state(0)[None, :-1])[0] == 9.0
    assert item_intensity(P, _state(0, N8=1)[None, :-1])[0] == 2.0
    # mean free space (9 + 5) / 2 = 7
    assert item_intensity(P, _state(0, N1=1, N5=1)[None, :-1])[0] == 7.0


def test_truncated_poisson_pmf_exact():
    for lam in (2.0, 9.0, 0.3):
        raw = [lam**j * math.exp(-lam) / math.factorial(j) for j in range(1, 10)]
        assert np.allclose(item_pmf(P, lam)[0], np.array(raw) / sum(raw), rtol=1e-12, atol=0)


def test_sampler_chi_square():
    m = 10**6
    counts = np.tile(_state(0, N8=1)[:-1].astype(int), (m, 1))
    draws = bp_item_sampler(P, counts, np.random.default_rng(0))
    observed = np.bincount(draws, minlength=P.J + 1)[1:]
    expected = item_pmf(P, 2.0)[0] * m
    # pool sparse tail buckets so every expected count is at least 5
    keep = expected >= 5
    obs, exp = observed[keep], expected[keep]
    if not keep.all():
        obs, exp = np.append(obs, observed[~keep].sum()), np.append(exp, expected[~keep].sum())
    assert stats.chisquare(obs, exp).pvalue > 1e-3


# ------------------------------------------------------------------- policy


def _ss(x):
    return int(bp_sum_of_squares_policy(P).act(0, x)[0])


def test_ss_examples():
    assert _ss(_state(4)) == 0
    assert _ss(_state(9, N1=1)) == 1
    assert _ss(_state(3, N5=1, N7=1)) == 7


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=9, max_size=9), st.integers(1, 9))
def test_ss_minimizes_sum_of_squares(counts, j):
    x = np.array(counts + [j], dtype=float)
    scores = {}
    for a in _feasible(x):
        post, _ = bp_step(P, x, a)
        scores[a] = int(np.sum(post**2))
    best = min(scores.values())
    assert _ss(x) == min(a for a, s in scores.items() if s == best)
    assert _ss(x) == _ss(x.copy())


# --------------------------------------------------------------- generation


def test_single_step_episodes():
    p = BinPackParams(T=1)
    d = bp_generate(p, behavior_policy(p), 50, rng=0)
    assert d.n_transitions == 50
    j = d.states[:, 0, -1]
    assert np.all(d.actions[:, 0, 0] == 0)
    assert np.array_equal(d.rewards[:, 0], -(p.B - j))
    assert np.any(j == 9) and np.all(d.rewards[j == 9, 0] == -1)


@pytest.mark.parametrize("which", ["behavior", "target"])
def test_conservation_and_feasibility(which):
    actor = behavior_policy(P) if which == "behavior" else bp_sum_of_squares_policy(P)
    d = bp_generate(P, actor, 1000, rng=1)
    assert d.horizon == P.T and d.n_transitions == 1000 * P.T
    finals = d.states[:, -1, :-1]
    expected = -np.array([_free(c) for c in finals.astype(int)])
    assert np.array_equal(d.returns(), expected)
    for i in range(0, 1000, 37):
        for t in range(P.T):
            assert int(d.actions[i, t, 0]) in _feasible(d.states[i, t])


def test_reward_model_equals_logged_rewards():
    d = bp_generate(P, behavior_policy(P), 300, rng=2)
    ts = d.transitions
    model = bp_reward_model(P)
    assert np.array_equal(model(ts.states, ts.actions, ts.next_states), ts.rewards)


def test_unused_capacity():
    assert unused_capacity(P, _state(0, N1=2, N9=1)[None, :-1])[0] == 2 * 9 + 1


# -------------------------------------------------------------------- metric


def test_metric_projection_collision():
    m = bp_metric(P)
    # both placements fill their bin, leaving no open bin
    a = (_state(9, N1=1), [1.0])
    b = (_state(8, N2=1), [2.0])
    assert distance(m, a, b) == 0.0


def test_metric_sqrt2_example():
    m = bp_metric(P)
    assert distance(m, (_state(9), [0.0]), (_state(5), [0.0])) == pytest.approx(math.sqrt(2), rel=1e-15)


def test_metric_dimension_and_infeasible():
    m = bp_metric(P)
    assert m.features(_state(3)[None], np.zeros((1, 1))).shape == (1, 9)
    with pytest.raises(InvalidInputError):
        m.features(_state(3)[None], np.ones((1, 1)))
