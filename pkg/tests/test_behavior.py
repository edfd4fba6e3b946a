import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmap import behavior as bm
from kmap.numcore import Tensor

import _oracles


def _lin(layer, x):
    y = x @ layer.W.data
    return y if layer.b is None else y + layer.b.data


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_lstm_cell_matches_reference(rng):
    P = bm.LSTMParams(rng, d_b=3, d_z=2, d_k=4, d_s=2, d_h=5)
    x = rng.normal(size=(2, 5))
    h0, m0 = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    out = bm.lstm_cell(P, Tensor(x), bm.BehaviorState(Tensor(h0), Tensor(m0)))
    g = _lin(P.W_x, x) + _lin(P.W_h, h0)
    i, f, c, o = _sig(g[:, :5]), _sig(g[:, 5:10]), np.tanh(g[:, 10:15]), _sig(g[:, 15:])
    m = f * m0 + i * c
    np.testing.assert_allclose(out.m.data, m, atol=1e-14)
    np.testing.assert_allclose(out.h.data, o * np.tanh(m), atol=1e-14)


def test_lstm_input_mixes_material_by_type(rng):
    P = bm.LSTMParams(rng, d_b=3, d_z=2, d_k=4, d_s=2, d_h=5)
    qb, lb = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    z_emb, s = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    mem = rng.normal(size=(2, 6, 4))
    got = bm.lstm_input(P, np.array([0.0, 1.0]), Tensor(qb), Tensor(lb), Tensor(z_emb), Tensor(mem), Tensor(s)).data
    mat = np.stack([qb[0], lb[1]])
    want = _lin(P.W_in, np.concatenate([mat, z_emb, mem.mean(axis=1), s], axis=1))
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_lstm_step_respects_mask(rng):
    P = bm.LSTMParams(rng, d_b=3, d_z=2, d_k=4, d_s=2, d_h=5)
    prev = bm.BehaviorState(Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(2, 5))))
    args = [Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))]
    out = bm.lstm_step(P, np.zeros(2), *args, prev, Tensor(rng.normal(size=(2, 6, 4))),
                       Tensor(rng.normal(size=(2, 2))), valid=np.array([False, True]))
    np.testing.assert_array_equal(out.h.data[0], prev.h.data[0])
    assert not np.allclose(out.h.data[1], prev.h.data[1])


def encdec(rng):
    return bm.EncoderDecoderParams(rng, d_h=4, d_qb=3, d_lb=3, n_concepts=2, d_v=5)


def test_encoder_matches_oracle(rng):
    P = encdec(rng)
    h, mat, w, c = (rng.normal(size=(2, n)) for n in (4, 3, 2, 5))
    ctx = [rng.normal(size=(2, n)) for n in (2, 5, 2, 5)]
    got = bm.encode_anchor(P.enc_q, Tensor(h), Tensor(mat), Tensor(w), Tensor(c),
                           (Tensor(ctx[0]), Tensor(ctx[1])), (Tensor(ctx[2]), Tensor(ctx[3]))).data
    for b in range(2):
        want = _oracles.feed_forward(P.enc_q, [h[b], mat[b], w[b], c[b], *(x[b] for x in ctx)])
        np.testing.assert_allclose(got[b], want, atol=1e-12)


def test_candidate_encoder_broadcasts_context(rng):
    P = encdec(rng)
    h = rng.normal(size=(2, 4))
    mat, w, c = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 5))
    ctx = [rng.normal(size=(2, n)) for n in (2, 5, 2, 5)]
    got = bm.encode_candidate(P.enc_l, Tensor(h), Tensor(mat), Tensor(w), Tensor(c),
                              (Tensor(ctx[0]), Tensor(ctx[1])), (Tensor(ctx[2]), Tensor(ctx[3]))).data
    assert got.shape == (2, 3, 5)
    want = _oracles.feed_forward(P.enc_l, [h[1], mat[1, 2], w[1, 2], c[1, 2], *(x[1] for x in ctx)])
    np.testing.assert_allclose(got[1, 2], want, atol=1e-12)


def test_decoder_matches_oracle_and_is_training_only(rng):
    P = encdec(rng)
    slot = 2 + 5
    latent = rng.normal(size=(2, 5))
    slots = [rng.normal(size=(2, n)) for n in (2, 5, 3, 2, 5, 3, 2, 5, 3, 2, 5)]
    assert sum(s.shape[1] for s in slots) == 4 * slot + 2 * 3 + 3
    got = bm.decode(P.dec_q, Tensor(latent), [Tensor(s) for s in slots], training=True).data
    want = _oracles.feed_forward(P.dec_q, [latent[0], *(s[0] for s in slots)])
    np.testing.assert_allclose(got[0], want, atol=1e-12)
    with pytest.raises(RuntimeError):
        bm.decode(P.dec_q, Tensor(latent), [Tensor(s) for s in slots], training=False)


def test_rank_candidates_example():
    anchor = np.array([0.0, 0.0])
    enc = np.array([[3.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
    np.testing.assert_array_equal(bm.rank_candidates(anchor, enc), [1, 2, 3, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ranking_invariant_under_rotation_and_translation(seed):
    rng = np.random.default_rng(seed)
    anchor, enc = rng.normal(size=4), rng.normal(size=(7, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    shift = rng.normal(size=4)
    d0 = np.linalg.norm(enc - anchor, axis=1)
    d1 = np.linalg.norm((enc @ q + shift) - (anchor @ q + shift), axis=1)
    if np.min(np.abs(np.subtract.outer(d0, d0)) + np.eye(7)) < 1e-9:
        return  # near-ties may legitimately swap
    np.testing.assert_array_equal(bm.rank_candidates(anchor, enc), bm.rank_candidates(anchor @ q + shift, enc @ q + shift))
    np.testing.assert_allclose(d0, d1, atol=1e-12)


def test_contrastive_scores_shape(rng):
    P = encdec(rng)
    out = bm.contrastive_scores(P, Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(2, 4, 5))))
    assert out.shape == (2, 4)


def type_head(rng):
    return bm.TypeHeadParams(rng, d_s=3, d_qb=2, d_r=2, d_lb=2, d_h=3, attn_dim=8, n_heads=4)


def test_type_head_matches_reference_attention(rng):
    P = type_head(rng)
    s, qb, r, lb, h = (rng.normal(size=(2, n)) for n in (3, 2, 2, 2, 3))
    logit, attn = bm.type_attention(P, Tensor(s), Tensor(qb), Tensor(r), Tensor(lb), Tensor(h))
    assert attn.shape == (2, 4, 4)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0)
    for b in range(2):
        toks = np.stack([_lin(P.tok_q, qb[b]), _lin(P.tok_r, r[b]), _lin(P.tok_l, lb[b]), _lin(P.tok_h, h[b])])
        q, k, v = _lin(P.W_Q, s[b]), _lin(P.W_K, toks), _lin(P.W_V, toks)
        ctx = []
        for head in range(4):
            sl = slice(2 * head, 2 * head + 2)
            sc = k[:, sl] @ q[sl] / np.sqrt(2.0)
            a = np.exp(sc - sc.max())
            a /= a.sum()
            np.testing.assert_allclose(attn.data[b, head], a, atol=1e-14)
            ctx.append(a @ v[:, sl])
        want = _lin(P.final, _lin(P.W_O, np.concatenate(ctx)))[0]
        assert logit.data[b] == pytest.approx(want, abs=1e-13)
    p = bm.predict_type(P, Tensor(s), Tensor(qb), Tensor(r), Tensor(lb), Tensor(h)).data
    np.testing.assert_allclose(p, 1 / (1 + np.exp(-logit.data)))


def test_type_head_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError):
        bm.TypeHeadParams(rng, 3, 2, 2, 2, 3, attn_dim=6, n_heads=4)
