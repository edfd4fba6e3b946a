"""Behaviour modelling: memory-conditioned LSTM, contrastive material
encoder/decoder, L2 candidate ranking and the cross-attention type head."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .layers import FeedForward, Linear, Module
from .numcore import Tensor
from .numcore import functional as F


class BehaviorState(NamedTuple):
    h: Tensor
    m: Tensor


class LSTMParams(Module):
    def __init__(self, rng, d_b, d_z, d_k, d_s, d_h=32):
        self.W_in = Linear(rng, d_b + d_z + d_k + d_s, d_h)
        self.W_x = Linear(rng, d_h, 4 * d_h)
        self.W_h = Linear(rng, d_h, 4 * d_h, bias=False)
        self.d_h = d_h


def lstm_input(params: LSTMParams, z, qb, lb, z_emb, memory, s) -> Tensor:
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    material = F.mul(1.0 - z, qb) + F.mul(z, lb)
    summary = F.mean(memory, axis=1)
    return params.W_in(F.concat([material, z_emb, summary, s], axis=-1))


def lstm_cell(params: LSTMParams, x: Tensor, prev: BehaviorState) -> BehaviorState:
    """Standard LSTM gates (input, forget, candidate, output)."""
    d = params.d_h
    gates = params.W_x(x) + params.W_h(prev.h)
    i = F.sigmoid(gates[..., :d])
    f = F.sigmoid(gates[..., d:2 * d])
    g = F.tanh(gates[..., 2 * d:3 * d])
    o = F.sigmoid(gates[..., 3 * d:])
    m = F.mul(f, prev.m) + F.mul(i, g)
    return BehaviorState(F.mul(o, F.tanh(m)), m)


def lstm_step(params: LSTMParams, z, qb, lb, z_emb, prev: BehaviorState, memory, s, valid=None) -> BehaviorState:
    new = lstm_cell(params, lstm_input(params, z, qb, lb, z_emb, memory, s), prev)
    if valid is None:
        return new
    keep = np.asarray(valid, dtype=bool).reshape(-1, 1)
    return BehaviorState(F.where(keep, new.h, prev.h), F.where(keep, new.m, prev.m))


class EncoderDecoderParams(Module):
    def __init__(self, rng, d_h, d_qb, d_lb, n_concepts, d_v=32):
        slot = n_concepts + d_v
        self.enc_q = FeedForward(rng, d_h + d_qb + 3 * slot, 2 * d_v, d_v)
        self.enc_l = FeedForward(rng, d_h + d_lb + 3 * slot, 2 * d_v, d_v)
        self.dec_q = FeedForward(rng, d_v + 4 * slot + 2 * d_lb + d_qb, 2 * d_v, d_qb)
        self.dec_l = FeedForward(rng, d_v + 4 * slot + 2 * d_qb + d_lb, 2 * d_v, d_lb)
        self.score_net = FeedForward(rng, 2 * d_v, d_v, 1)
        self.d_v = d_v


def _tile(x: Tensor, k: int) -> Tensor:
    # (B, d) -> (B, k, d)
    return F.broadcast_to(F.expand_dims(x, -2), (x.shape[0], k, x.shape[-1]))


def encode(ff: FeedForward, h: Tensor, material: Tensor, w: Tensor, c: Tensor, context: list) -> Tensor:
    """Encoder over ``[h ⊕ material ⊕ w ⊕ c ⊕ context...]``.

    ``material``/``w``/``c`` may carry a candidate axis (B, K, ·); ``h`` and
    the context slots are then broadcast along it.
    """
    if material.ndim == 3:
        k = material.shape[1]
        h = _tile(h, k)
        context = [_tile(x, k) for x in context]
    return ff(F.concat([h, material, w, c, *context], axis=-1))


def encode_anchor(ff, h, material, w, c, prev_same, prev_other) -> Tensor:
    """Anchor for the current material; ``prev_*`` are ``(w, c)`` pairs of the
    most recent earlier step of each type (zeros when none)."""
    return encode(ff, h, material, w, c, [prev_same[0], prev_same[1], prev_other[0], prev_other[1]])


def encode_candidate(ff, h, material, w, c, cur_same, cur_other) -> Tensor:
    """Encoding of a candidate next material; for the true next material this
    is the positive."""
    return encode(ff, h, material, w, c, [cur_same[0], cur_same[1], cur_other[0], cur_other[1]])


def decode(ff: FeedForward, latent: Tensor, slots: list, training: bool) -> Tensor:
    """Reconstruct a material embedding from a latent code and context slots."""
    if not training:
        raise RuntimeError("the decoder is only available during training")
    return ff(F.concat([latent, *slots], axis=-1))


def contrastive_scores(params: EncoderDecoderParams, anchor: Tensor, encodings: Tensor) -> Tensor:
    """Scalar score per candidate from ``[anchor ⊕ encoding]``; (B, K)."""
    k = encodings.shape[1]
    out = params.score_net(F.concat([_tile(anchor, k), encodings], axis=-1))
    return F.reshape(out, out.shape[:-1])


def l2_distances(anchor: Tensor, encodings: Tensor) -> Tensor:
    return F.l2_norm(F.sub(F.expand_dims(anchor, -2), encodings), axis=-1)


def rank_candidates(anchor, encodings) -> np.ndarray:
    """Candidate indices by ascending L2 distance; ties keep index order."""
    a = np.asarray(getattr(anchor, "data", anchor), dtype=np.float64)
    enc = np.asarray(getattr(encodings, "data", encodings), dtype=np.float64)
    dist = np.sqrt(((enc - a[..., None, :]) ** 2).sum(axis=-1))
    return np.argsort(dist, axis=-1, kind="stable")


class TypeHeadParams(Module):
    """Single-query multi-head cross-attention over four context tokens."""

    def __init__(self, rng, d_s, d_qb, d_r, d_lb, d_h, attn_dim=32, n_heads=4):
        if attn_dim % n_heads:
            raise ValueError(f"{n_heads} heads do not divide attention dim {attn_dim}")
        self.tok_q = Linear(rng, d_qb, attn_dim)
        self.tok_r = Linear(rng, d_r, attn_dim)
        self.tok_l = Linear(rng, d_lb, attn_dim)
        self.tok_h = Linear(rng, d_h, attn_dim)
        self.W_Q = Linear(rng, d_s, attn_dim)
        self.W_K = Linear(rng, attn_dim, attn_dim)
        self.W_V = Linear(rng, attn_dim, attn_dim)
        self.W_O = Linear(rng, attn_dim, attn_dim)
        self.final = Linear(rng, attn_dim, 1)
        self.n_heads = n_heads
        self.attn_dim = attn_dim


def type_attention(params: TypeHeadParams, s, qb, r, lb, h, projections=None):
    """Returns ``(logit, attention)``; attention has shape (B, heads, 4)."""
    projections = projections or (params.tok_q, params.tok_r, params.tok_l, params.tok_h)
    tokens = F.stack([proj(x) for proj, x in zip(projections, (qb, r, lb, h))], axis=1)  # (B, 4, D)
    b, n_tok, dim = tokens.shape
    heads, dh = params.n_heads, dim // params.n_heads
    q = F.reshape(params.W_Q(s), (b, heads, 1, dh))
    k = F.swapaxes(F.reshape(params.W_K(tokens), (b, n_tok, heads, dh)), 1, 2)   # (B, H, 4, dh)
    v = F.swapaxes(F.reshape(params.W_V(tokens), (b, n_tok, heads, dh)), 1, 2)
    scores = F.mul(F.matmul(q, F.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))      # (B, H, 1, 4)
    attn = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.matmul(attn, v), (b, dim))
    out = params.final(params.W_O(ctx))
    return F.reshape(out, (b,)), F.reshape(attn, (b, heads, n_tok))


def predict_type(params: TypeHeadParams, s, qb, r, lb, h) -> Tensor:
    """Probability that the next material is non-assessed."""
    logit, _ = type_attention(params, s, qb, r, lb, h)
    return F.sigmoid(logit)
