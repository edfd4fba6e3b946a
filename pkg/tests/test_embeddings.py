import numpy as np
import pytest

from kmap.embeddings import ConceptProjections, EmbeddingTables, concept_weights, lookup
from kmap.numcore import functional as F


def tables(rng):
    return EmbeddingTables(rng, 4, 5, 3, d_s=3, d_qk=2, d_lk=2, d_r=2, d_z=2, d_qb=2, d_lb=2)


def test_shapes_and_padding_rows(rng):
    t = tables(rng)
    assert t.A_s.shape == (5, 3) and t.A_z.shape == (3, 2) and t.A_r.shape == (2, 2)
    for table in (t.A_s, t.A_qk, t.A_lk, t.A_qb, t.A_lb):
        np.testing.assert_array_equal(table.data[0], 0.0)


def test_mismatched_behaviour_dims_rejected(rng):
    with pytest.raises(ValueError):
        EmbeddingTables(rng, 2, 2, 2, d_qb=4, d_lb=3)


def test_lookup_gradient_touches_only_used_rows(rng):
    t = tables(rng)
    F.sum(F.square(lookup(t.A_qk, np.array([2, 0, 2, 4])))).backward()
    touched = np.flatnonzero(np.abs(t.A_qk.grad).sum(axis=1))
    np.testing.assert_array_equal(touched, [2, 4])
    np.testing.assert_allclose(t.A_qk.grad[2], 4.0 * t.A_qk.data[2])


def test_lookup_mask_zeroes_rows(rng):
    t = tables(rng)
    out = lookup(t.A_r, np.array([1, 1]), mask=np.array([True, False]))
    np.testing.assert_array_equal(out.data[1], 0.0)
    np.testing.assert_array_equal(out.data[0], t.A_r.data[1])


def test_concept_weights_are_softmax_and_pad_is_uniform(rng):
    c = ConceptProjections(rng, 4, 3, n_concepts=5)
    w = concept_weights(c, np.array([0, 2]), 0).data
    np.testing.assert_allclose(w[0], 0.2)
    ref = np.exp(c.A_w_q.data[2]) / np.exp(c.A_w_q.data[2]).sum()
    np.testing.assert_allclose(w[1], ref, rtol=1e-14)
    wl = concept_weights(c, np.array([3]), 1).data
    np.testing.assert_allclose(wl.sum(), 1.0)
