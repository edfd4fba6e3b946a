"""Knowledge tracing: concept value memory with erase-then-add writes,
type-gated mastery reads, and the correctness head.

All functions are batched: leading axis is the student, memory has shape
``(B, n_concepts, d_k)``.
"""

from __future__ import annotations

import numpy as np

from .layers import Linear, Module, init_param
from .numcore import Parameter, Tensor
from .numcore import functional as F


class KTParams(Module):
    def __init__(self, rng, d_qk, d_lk, d_r, d_z, d_s, d_h, d_k=32, std=0.1):
        self.E_q = Linear(rng, d_qk + d_r, d_k, bias=False)
        self.E_l = Linear(rng, d_lk, d_k, bias=False)
        self.E_h = Linear(rng, d_h, d_k, bias=False)
        self.E_s = Linear(rng, d_s, d_k, bias=False)
        self.b_e = Parameter("", np.zeros(d_k))
        self.D_q = Linear(rng, d_qk + d_r, d_k, bias=False)
        self.D_l = Linear(rng, d_lk, d_k, bias=False)
        self.D_b = Linear(rng, d_h, d_k, bias=False)
        self.D_s = Linear(rng, d_s, d_k, bias=False)
        self.b_d = Parameter("", np.zeros(d_k))
        # stored transposed: [z_prev ⊕ z_cur] @ W_tr -> d_k
        self.W_tr = init_param(rng, (2 * d_z, d_k), std)
        self.perf_hidden = Linear(rng, d_k + d_qk + d_h, d_k)
        self.perf_out = Linear(rng, d_k, 1)
        self.d_k = d_k


def transition_gate(params: KTParams, z_prev: Tensor, z_cur: Tensor) -> Tensor:
    return F.tanh(F.matmul(F.concat([z_prev, z_cur], axis=-1), params.W_tr))


def erase_add_vectors(params: KTParams, z, qk, r, lk, h_prev, s):
    """Erase (sigmoid) and add (tanh) vectors for one step.

    ``z`` is a float array of shape (B, 1): 0 for assessed, 1 for lectures.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    x_q = F.concat([qk, r], axis=-1)
    e = F.sigmoid(F.mul(1.0 - z, params.E_q(x_q)) + F.mul(z, params.E_l(lk))
                  + params.E_h(h_prev) + params.E_s(s) + params.b_e)
    d = F.tanh(F.mul(1.0 - z, params.D_q(x_q)) + F.mul(z, params.D_l(lk))
               + params.D_b(h_prev) + params.D_s(s) + params.b_d)
    return e, d


def erase_add_update(params: KTParams, memory: Tensor, z, qk, r, lk, z_prev_emb, z_emb, w, h_prev, s, valid=None):
    """One memory write.

    Row ``i`` becomes ``gate * M(i) * (1 - w(i) e) + w(i) d`` where ``gate``
    depends on the previous and current material types. Steps with
    ``valid`` false keep the old memory. Returns ``(memory, e, d)``.
    """
    e, d = erase_add_vectors(params, z, qk, r, lk, h_prev, s)
    gate = transition_gate(params, z_prev_emb, z_emb)
    w3 = F.expand_dims(w, -1)                       # (B, Nc, 1)
    keep = 1.0 - F.mul(w3, F.expand_dims(e, -2))    # (B, Nc, dk)
    new = F.mul(F.mul(F.expand_dims(gate, -2), memory), keep) + F.mul(w3, F.expand_dims(d, -2))
    if valid is not None:
        new = F.where(np.asarray(valid, dtype=bool).reshape(-1, 1, 1), new, memory)
    return new, e, d


def read_mastery(params: KTParams, memory: Tensor, w: Tensor, z_prev_emb: Tensor, z_target_emb: Tensor) -> Tensor:
    """Concept-weighted, type-gated read of the memory.

    ``w`` may be (B, Nc) or (B, K, Nc) for K candidates; the result is
    (B, dk) or (B, K, dk).
    """
    gate = transition_gate(params, z_prev_emb, z_target_emb)   # (B, dk)
    if w.ndim == 2:
        read = F.matmul(F.expand_dims(w, -2), memory)         # (B, 1, dk)
        return F.mul(F.reshape(read, (read.shape[0], read.shape[2])), gate)
    read = F.matmul(w, memory)                                # (B, K, dk)
    return F.mul(read, F.expand_dims(gate, -2))


def performance_logit(params: KTParams, c_next: Tensor, q_next: Tensor, h: Tensor) -> Tensor:
    hidden = F.tanh(params.perf_hidden(F.concat([c_next, q_next, h], axis=-1)))
    out = params.perf_out(hidden)
    return F.reshape(out, out.shape[:-1])


def predict_performance(params: KTParams, c_next: Tensor, q_next: Tensor, h: Tensor, next_type=None) -> Tensor:
    """Probability that the next (assessed) material is answered correctly."""
    if next_type is not None and np.any(np.asarray(next_type) != 0):
        raise ValueError("performance head is only defined when the next material is assessed")
    return F.sigmoid(performance_logit(params, c_next, q_next, h))
