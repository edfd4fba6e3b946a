import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.cluster import KMeans

from kmap.model import CarryState
from kmap.numcore import Tensor
from kmap.profiling import (ProfileLedger, StateStore, convergence_loss, epoch_cluster, kmeans, normalized_mean,
                            row_normalize, silhouette_loss)


def carry(v):
    return CarryState(np.full((2, 3), v), np.full(4, v), np.full(4, v), np.array(0), np.array(1), np.array(2))


def test_state_store_copies_on_put():
    store = StateStore()
    st_ = carry(1.0)
    store.put(5, st_)
    st_.h[:] = 9.0
    assert np.all(store.get(5).h == 1.0)
    assert store.segments_seen[5] == 1 and 5 in store
    assert store.get(6) is None


def test_ledger_records_first_order_snapshot():
    led = ProfileLedger()
    s = led.record_segment(3, np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.1, np.ones(2))
    np.testing.assert_allclose(s, [0.95, 2.1])
    np.testing.assert_allclose(led.offsets[3][0], [-0.05, 0.1])
    assert led.students == [3]
    led.clear()
    assert led.students == []


def test_row_normalize_and_mean():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(row_normalize(x), [[0.6, 0.8], [0.0, 0.0]])
    np.testing.assert_allclose(normalized_mean([[2.0, 0.0], [0.0, 5.0]]), [0.5, 0.5])


def brute_force_wcss(x, k):
    best = math.inf
    for assign in itertools.product(range(k), repeat=len(x)):
        a = np.array(assign)
        if len(set(assign)) < k:
            continue
        wcss = sum(((x[a == j] - x[a == j].mean(axis=0)) ** 2).sum() for j in range(k))
        best = min(best, wcss)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_finds_global_optimum_on_separated_blobs(seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    x = np.concatenate([c + rng.normal(scale=0.5, size=(3, 2)) for c in centers])
    res = kmeans(x, 3, seed=seed)
    assert res.inertia == pytest.approx(brute_force_wcss(x, 3), rel=1e-12)
    ref = KMeans(3, n_init=10, random_state=0).fit(x)
    assert res.inertia == pytest.approx(ref.inertia_, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_kmeans_is_a_lloyd_fixed_point_with_monotone_wcss(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 3))
    res = kmeans(x, k, seed=seed)
    hist = np.array(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9)
    d2 = ((x[:, None] - res.centers[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(res.labels, d2.argmin(1))
    assert res.n_iter <= 100


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)


def test_convergence_loss_example():
    snaps = [Tensor(np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])), Tensor(np.zeros((1, 2)))]
    # pairs: 5 + 0 + 5 for the first student, nothing for the second
    assert convergence_loss(snaps).item() == pytest.approx(5.0)


def test_silhouette_loss_example():
    v = Tensor(np.array([[0.0, 0.0], [4.0, 0.0]]))
    cm = np.array([[1.0, 0.0], [4.0, 0.0]])
    # student 0: d_ic=1, d_nc=4 -> frac 0.75; student 1: d_ic=0, d_nc=3 -> frac 1
    want = (math.exp(-0.75 / 0.5) + math.exp(-1.0 / 0.5)) / 2
    assert silhouette_loss(v, np.array([0, 1]), cm, 0.5).item() == pytest.approx(want, rel=1e-14)


def test_silhouette_loss_skips_empty_clusters():
    v = Tensor(np.array([[0.0, 0.0], [4.0, 0.0]]))
    cm = np.array([[1.0, 0.0], [4.0, 0.0], [0.0, 0.0]])
    occupied = np.array([True, True, False])
    a = silhouette_loss(v, np.array([0, 1]), cm, 0.5, occupied).item()
    b = silhouette_loss(v, np.array([0, 1]), cm[:2], 0.5).item()
    assert a == b
    with pytest.raises(ValueError):
        silhouette_loss(v, np.array([0, 0]), cm, 0.5, np.array([True, False, False]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_silhouette_terms_are_bounded(seed, tau):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    cm = rng.normal(size=(3, 3))
    loss = silhouette_loss(Tensor(v), labels, cm, tau).item()
    assert math.exp(-1 / tau) * (1 - 1e-12) <= loss <= math.exp(1 / tau) * (1 + 1e-12)


def test_epoch_cluster_on_ledger():
    led = ProfileLedger()
    rng = np.random.default_rng(0)
    for s in range(1, 7):
        direction = np.eye(3)[s % 2]
        for _ in range(2):
            led.record_segment(s, rng.normal(size=4), rng.normal(size=4), 0.1, direction + 0.01 * rng.normal(size=3))
    res = epoch_cluster(led, 2, seed=0)
    assert res.students == list(range(1, 7))
    assert len(set(res.labels[::2])) == 1 and len(set(res.labels[1::2])) == 1
    assert res.labels[0] != res.labels[1]
    assert np.all(res.d_ic >= 0) and res.occupied.all()
    with pytest.raises(ValueError):
        epoch_cluster(led, 7)
