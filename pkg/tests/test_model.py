import numpy as np
import pytest

from kmap.config import LOSS_TERMS
from kmap.dataio import sample_negatives, segment
from kmap.model import BatchArrays, KMaPNetwork, ntxent_loss, ntxent_term, weighted_total
from kmap.numcore import Tensor

from _statefulness import compare_split
from conftest import small_config
import _oracles


def build(tiny, **kw):
    vocab, _, _, streams = tiny
    cfg = small_config(**kw)
    net = KMaPNetwork(cfg, vocab.n_students, vocab.n_questions, vocab.n_lectures, seed=0)
    segs = [sample_negatives(s, vocab, cfg.k_train, (0,)) for s in segment(streams, cfg.T) if s.segment_index == 1]
    batch = BatchArrays.from_segments(segs)
    return cfg, net, batch


def test_forward_produces_all_terms(tiny):
    cfg, net, batch = build(tiny)
    out = net.forward(batch, net.initial_state(batch.size, np.random.default_rng(0)), keep_records=True)
    assert set(out.terms) == set(LOSS_TERMS)
    assert out.n_valid == int(batch.next_valid.sum())
    assert all(np.isfinite(t.item()) and t.item() >= 0 for t in out.terms.values())
    assert out.records["dist_q"].shape == (batch.size, cfg.T, cfg.k_train + 1)


def test_truth_position_does_not_change_losses(tiny):
    _, net, batch = build(tiny)
    st = net.initial_state(batch.size, np.random.default_rng(0))
    a = net.forward(batch, st, truth_first=True)
    b = net.forward(batch, st, truth_first=False)
    for name in LOSS_TERMS:
        assert a.terms[name].item() == pytest.approx(b.terms[name].item(), rel=1e-12)


def test_inference_skips_reconstruction(tiny):
    _, net, batch = build(tiny)
    out = net.predict_segment(batch, net.initial_state(batch.size, np.random.default_rng(0)))
    assert out.terms["rec"].item() == 0.0
    assert not out.terms["cont"].requires_grad


def test_inner_parameters_exclude_base_table(tiny):
    _, net, _ = build(tiny)
    names = {p.name for p in net.inner_parameters()}
    assert "embed.A_s" not in names and "concepts.A_w_q" in names
    _, frozen, _ = build(tiny, freeze_concepts=True)
    assert "concepts.A_w_q" not in {p.name for p in frozen.inner_parameters()}


def test_split_forward_equals_whole_stream():
    assert compare_split(small_config(), n_events=24, cut=8, n_students=3) < 1e-12


def test_ntxent_matches_ratio_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, p, n = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
        a2, p2, n2 = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
        got = ntxent_loss(a, p, n, a2, p2, n2).item()
        want = _oracles.ntxent(a, p, n) + _oracles.ntxent(a2, p2, n2)
        assert got == pytest.approx(want, rel=1e-12)


def test_ntxent_term_truth_position():
    d = Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert ntxent_term(d, 0).item() == pytest.approx(np.exp(-1.0) + np.exp(-2.0))
    assert ntxent_term(d, 2).item() == pytest.approx(np.exp(2.0) + np.exp(1.0))


def test_weighted_total_accounting():
    terms = {n: Tensor(np.array(float(i + 1))) for i, n in enumerate(LOSS_TERMS)}
    means, total = weighted_total(terms, 4, {"type": 0.0})
    assert means["rec"].item() == 0.5
    assert total.item() == pytest.approx((1 + 2 + 3 + 4) / 4)
    means, total = weighted_total(terms, 0, {})
    assert total.item() == 0.0


from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-20, 20)), arrays(np.float64, (2, 3, 4), elements=st.floats(-20, 20)))
def test_ntxent_is_positive(pairs, negs):
    loss = ntxent_loss(pairs[0], pairs[1], negs[0], pairs[0], pairs[1], negs[1]).item()
    assert loss > 0
