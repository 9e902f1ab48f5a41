from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnr.core import Dataset, FlatRef, Metric
from knnr.envs.binpack import bp_generate
from knnr.errors import InvalidInputError
from knnr.knn_index import PointIndex, brute_force_knn, build_index, query_knn


def _scan(points, q, k):
    # independent oracle: python sort on (distance, index)
    d = [float(np.sqrt(np.sum((np.asarray(p) - q) ** 2))) for p in points]
    order = sorted(range(len(points)), key=lambda i: (d[i], i))[:k]
    return order, [d[i] for i in order]


def _random_dataset(rng, n=3, T=8, d1=2):
    return Dataset(rng.normal(size=(n, T + 1, d1)), rng.normal(size=(n, T + 1, 1)), rng.normal(size=(n, T + 1)))


def test_point_count_matches_transitions():
    d = _random_dataset(np.random.default_rng(0))
    assert d.n_transitions == 24
    assert build_index(d, Metric()).point_count == 24


def test_empty_transition_set_rejected():
    d = Dataset(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1)))
    with pytest.raises(InvalidInputError):
        build_index(d, Metric())


def test_bp_index_uses_projected_counts(bp_env):
    d = bp_generate(bp_env.params, bp_env.behavior(), 5, rng=0)
    index = build_index(d, bp_env.metric())
    assert index.features.shape == (d.n_transitions, 9)
    assert d.states.shape[2] + d.actions.shape[2] == 11


def test_identical_datasets_identical_results():
    a = build_index(_random_dataset(np.random.default_rng(3)), Metric())
    b = build_index(_random_dataset(np.random.default_rng(3)), Metric())
    q = np.random.default_rng(4).normal(size=(30, 3))
    ia, da = a.query_features(q, 5)
    ib, db = b.query_features(q, 5)
    assert np.array_equal(ia, ib) and np.array_equal(da, db)


def test_self_match():
    d = _random_dataset(np.random.default_rng(5))
    index = build_index(d, Metric())
    ts = d.transitions
    for k in range(d.n_transitions):
        [(ref, dist)] = query_knn(index, (ts.states[k], ts.actions[k]), 1)
        assert ref == d.flat_ref(k)
        assert dist == 0.0


def test_full_k_returns_everything_in_order():
    d = _random_dataset(np.random.default_rng(6))
    index = build_index(d, Metric())
    q = (np.zeros(2), np.zeros(1))
    hits = query_knn(index, q, index.point_count)
    feats = index.features
    order, dist = _scan(feats, np.zeros(3), len(feats))
    assert [h[0] for h in hits] == [d.flat_ref(k) for k in order]
    assert np.allclose([h[1] for h in hits], dist, rtol=1e-12, atol=0)


@pytest.mark.parametrize("kind", ["kd", "ball"])
def test_matches_brute_force_200_points(kind):
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(200, 3))
    index = PointIndex(pts, kind=kind)
    queries = rng.normal(size=(50, 3))
    ids, dist = index.query(queries, 7)
    for q, row_ids, row_d in zip(queries, ids, dist):
        ref_ids, ref_d = _scan(pts, q, 7)
        assert row_ids.tolist() == ref_ids
        assert np.allclose(row_d, ref_d, rtol=1e-12, atol=0)


@pytest.mark.parametrize("kind", ["kd", "ball"])
def test_ties_break_by_ascending_index(kind):
    # integer lattice with many duplicates: ties everywhere
    rng = np.random.default_rng(8)
    pts = rng.integers(0, 3, size=(300, 4)).astype(float)
    index = PointIndex(pts, kind=kind)
    queries = np.vstack([pts[:20], rng.integers(0, 3, size=(20, 4)) + 0.5])
    for k in (1, 5, 40, 300):
        ids, dist = index.query(queries, k)
        for q, row_ids, row_d in zip(queries, ids, dist):
            ref_ids, ref_d = _scan(pts, q, k)
            assert row_ids.tolist() == ref_ids
            assert np.allclose(row_d, ref_d, rtol=1e-12, atol=0)


def test_high_dimension_uses_ball_tree():
    pts = np.random.default_rng(9).normal(size=(50, 16))
    index = PointIndex(pts)
    assert index.kind == "ball"
    ids, _ = index.query(pts[:3], 4)
    assert ids[:, 0].tolist() == [0, 1, 2]


def test_brute_force_reference_agrees_with_scan():
    rng = np.random.default_rng(10)
    pts = rng.integers(0, 2, size=(40, 2)).astype(float)
    q = np.array([0.5, 0.5])
    ids, d = brute_force_knn(pts, q, 10)
    ref_ids, ref_d = _scan(pts, q, 10)
    assert ids.tolist() == ref_ids and np.allclose(d, ref_d)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 60), st.booleans())
def test_prefix_property(seed, m, lattice):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, size=(m, 2)).astype(float) if lattice else rng.normal(size=(m, 2))
    index = PointIndex(pts)
    q = rng.normal(size=(5, 2))
    prev_ids, prev_d = index.query(q, 1)
    for k in range(2, m + 1):
        ids, d = index.query(q, k)
        assert np.array_equal(ids[:, : k - 1], prev_ids)
        assert np.array_equal(d[:, : k - 1], prev_d)
        assert np.all(np.diff(d, axis=1) >= 0)
        prev_ids, prev_d = ids, d


def test_k_out_of_range():
    index = PointIndex(np.zeros((4, 2)))
    with pytest.raises(InvalidInputError):
        index.query(np.zeros(2), 0)
    with pytest.raises(InvalidInputError):
        index.query(np.zeros(2), 5)
    with pytest.raises(InvalidInputError):
        index.query(np.zeros(3), 1)


def test_concurrent_queries_match_serial():
    rng = np.random.default_rng(11)
    pts = rng.integers(0, 4, size=(2000, 3)).astype(float)
    index = PointIndex(pts)
    batches = [rng.normal(size=(40, 3)) * 2 for _ in range(32)]
    serial = [index.query(b, 9) for b in batches]
    with ThreadPoolExecutor(max_workers=8) as pool:
        parallel = list(pool.map(lambda b: index.query(b, 9), batches))
    for (si, sd), (pi, pd) in zip(serial, parallel):
        assert np.array_equal(si, pi) and np.array_equal(sd, pd)


def test_queries_do_not_mutate_index():
    pts = np.random.default_rng(12).normal(size=(30, 2))
    index = PointIndex(pts)
    before = index.points.copy()
    index.query(pts + 0.1, 5)
    assert np.array_equal(index.points, before)
    with pytest.raises(ValueError):
        index.points[0, 0] = 1.0


# ------------------------------------------------------------ tie groups


def test_tie_group_lists_all_equidistant_points():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 0], [2, 2], [-1, 0]], dtype=float)
    index = PointIndex(pts)
    assert index.tie_group([0, 0], 1.0).tolist() == [1, 2, 3, 5]
    assert index.tie_group([1, 0], 0.0).tolist() == [1, 3]


@pytest.mark.parametrize("query,dist", [([1.0, 0.0], 0.0), ([0.0, 0.0], 1.0)])
def test_sample_ties_enumerates_group_uniformly(query, dist):
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 0], [2, 2], [-1, 0], [1, 0]], dtype=float)
    index = PointIndex(pts)
    group = index.tie_group(query, dist)
    g = len(group)
    # u at cell midpoints hits every member exactly once
    u = (np.arange(g) + 0.5) / g
    out = index.sample_ties(np.tile(query, (g, 1)), np.full(g, group[0]), np.full(g, dist), u)
    assert sorted(out.tolist()) == group.tolist()


def test_sample_ties_singleton_is_identity():
    pts = np.random.default_rng(13).normal(size=(20, 2))
    index = PointIndex(pts)
    ids, dist = index.query(pts[:5] + 0.01, 1)
    out = index.sample_ties(pts[:5] + 0.01, ids[:, 0], dist[:, 0], np.full(5, 0.99))
    assert np.array_equal(out, ids[:, 0])
