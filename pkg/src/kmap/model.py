"""The joint knowledge/behaviour network and its per-segment forward pass.

Slot conventions used throughout:

* ``*_t`` and ``*_next`` material slots are strict: they hold the step's
  material only when its type matches, otherwise zero vectors.
* ``prev`` slots refer to the most recent step of that type strictly before
  ``t``; ``last`` slots to the most recent step at or before ``t``. Both
  carry over segment boundaries through :class:`CarryState`.
* Every read of the memory at step ``t`` uses the memory after the write of
  step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import behavior as bm
from . import knowledge as kt
from .config import LOSS_TERMS, TrainConfig
from .dataio import ASSESSED, NON_ASSESSED, SegmentBatch
from .embeddings import TYPE_L, TYPE_Q, TYPE_START, ConceptProjections, EmbeddingTables, concept_weights, lookup
from .layers import Module
from .numcore import Tensor, no_grad
from .numcore import functional as F


@dataclass
class CarryState:
    """Detached per-student state handed from one segment to the next."""

    memory: np.ndarray      # (B, Nc, dk)
    h: np.ndarray           # (B, dh)
    m: np.ndarray           # (B, dh)
    last_type: np.ndarray   # (B,) in {TYPE_Q, TYPE_L, TYPE_START}
    last_q: np.ndarray      # (B,) most recent question index, 0 if none
    last_l: np.ndarray      # (B,) most recent lecture index, 0 if none

    def row(self, i: int) -> "CarryState":
        return CarryState(*(np.array(getattr(self, f)[i]) for f in self._fields()))

    @staticmethod
    def _fields():
        return ("memory", "h", "m", "last_type", "last_q", "last_l")

    @classmethod
    def stack(cls, rows: Sequence["CarryState"]) -> "CarryState":
        return cls(*(np.stack([getattr(r, f) for r in rows]) for f in cls._fields()))


@dataclass
class BatchArrays:
    """Segment-synchronous batch: one segment per student, shared length."""

    students: np.ndarray
    material: np.ndarray
    mtype: np.ndarray
    response: np.ndarray
    mask: np.ndarray
    next_material: np.ndarray
    next_type: np.ndarray
    next_response: np.ndarray
    next_valid: np.ndarray
    negatives: Optional[np.ndarray]

    @classmethod
    def from_segments(cls, segments: Sequence[SegmentBatch]) -> "BatchArrays":
        lengths = {s.length for s in segments}
        if len(lengths) != 1:
            raise ValueError(f"segments in a batch must share a length, got {sorted(lengths)}")
        targets = [s.target_arrays() for s in segments]
        negs = None
        if all(s.negatives is not None for s in segments):
            negs = np.stack([s.negatives for s in segments])
        return cls(
            students=np.array([s.student_index for s in segments], dtype=np.int64),
            material=np.stack([s.material for s in segments]),
            mtype=np.stack([s.mtype for s in segments]),
            response=np.stack([s.response for s in segments]),
            mask=np.stack([s.mask for s in segments]),
            next_material=np.stack([t[0] for t in targets]),
            next_type=np.stack([t[1] for t in targets]),
            next_response=np.stack([t[2] for t in targets]),
            next_valid=np.stack([t[3] for t in targets]),
            negatives=negs,
        )

    @property
    def size(self) -> int:
        return len(self.students)

    @property
    def length(self) -> int:
        return self.material.shape[1]


@dataclass
class SegmentOutput:
    terms: Dict[str, Tensor]          # summed (not averaged) loss per term
    n_valid: int
    state: CarryState
    student_emb: Tensor
    records: Dict[str, np.ndarray] = field(default_factory=dict)


class KMaPNetwork(Module):
    def __init__(self, config: TrainConfig, n_students: int, n_questions: int, n_lectures: int, seed: int = 0):
        c = config
        rng = np.random.default_rng(seed)
        self.config = c
        self.embed = EmbeddingTables(rng, n_students, n_questions, n_lectures, d_s=c.d_s, d_qk=c.d_qk,
                                     d_lk=c.d_lk, d_r=c.d_r, d_z=c.d_z, d_qb=c.d_qb, d_lb=c.d_lb, std=c.init_std)
        self.concepts = ConceptProjections(rng, n_questions, n_lectures, c.n_concepts, std=c.init_std)
        self.kt = kt.KTParams(rng, c.d_qk, c.d_lk, c.d_r, c.d_z, c.d_s, c.d_h, d_k=c.d_v, std=c.init_std)
        self.lstm = bm.LSTMParams(rng, c.d_qb, c.d_z, c.d_v, c.d_s, d_h=c.d_h)
        self.encdec = bm.EncoderDecoderParams(rng, c.d_h, c.d_qb, c.d_lb, c.n_concepts, d_v=c.d_v)
        self.type_head = bm.TypeHeadParams(rng, c.d_s, c.d_qb, c.d_r, c.d_lb, c.d_h,
                                           attn_dim=c.attn_dim, n_heads=c.n_heads)
        self._rename()
        self.n_students, self.n_questions, self.n_lectures = n_students, n_questions, n_lectures

    # -- parameter groups ----------------------------------------------------
    def inner_parameters(self):
        """Everything the inner loop optimises: all but the base student table
        (and the concept projections when frozen)."""
        skip = {"embed.A_s"}
        if self.config.freeze_concepts:
            skip |= {"concepts.A_w_q", "concepts.A_w_l"}
        return [p for name, p in self.named_parameters() if name not in skip]

    # -- state ---------------------------------------------------------------
    def initial_state(self, n: int, rng: np.random.Generator) -> CarryState:
        c = self.config
        return CarryState(
            memory=rng.normal(0.0, c.memory_init_std, size=(n, c.n_concepts, c.d_v)),
            h=np.zeros((n, c.d_h)),
            m=np.zeros((n, c.d_h)),
            last_type=np.full(n, TYPE_START, dtype=np.int64),
            last_q=np.zeros(n, dtype=np.int64),
            last_l=np.zeros(n, dtype=np.int64),
        )

    # -- helpers -------------------------------------------------------------
    def _weights(self, index, material_type: int, present) -> Tensor:
        w = concept_weights(self.concepts, index, material_type)
        p = np.asarray(present, dtype=np.float64)
        return F.mul(w, p[..., None])

    # -- forward -------------------------------------------------------------
    def forward(self, batch: BatchArrays, state: CarryState, training: bool = True,
                truth_first: bool = True, keep_records: bool = False) -> SegmentOutput:
        """Run one segment batch.

        Candidates per step are the true next material plus the attached
        negatives; the truth sits at index 0 when ``truth_first`` else last.
        """
        E, kp = self.embed, self.kt
        B, T = batch.size, batch.length
        s = lookup(E.A_s, batch.students)
        memory = Tensor(state.memory)
        beh = bm.BehaviorState(Tensor(state.h), Tensor(state.m))
        last_type = state.last_type.copy()
        last_q, last_l = state.last_q.copy(), state.last_l.copy()
        zeros_b = np.zeros(B, dtype=np.int64)
        zq = lookup(E.A_z, zeros_b + TYPE_Q)
        zl = lookup(E.A_z, zeros_b + TYPE_L)

        negs = batch.negatives
        k = 0 if negs is None else negs.shape[2]
        tpos = 0 if truth_first else k
        terms = {name: None for name in LOSS_TERMS}
        records = {key: [] for key in ("perf_logit", "type_logit", "dist_q", "dist_l", "anchor_q", "anchor_l",
                                       "h", "pair_valid", "next_type", "next_response")} if keep_records else None
        n_valid = 0

        for t in range(T):
            valid = batch.mask[:, t]
            typ = np.where(valid, batch.mtype[:, t], ASSESSED)
            is_q = valid & (typ == ASSESSED)
            is_l = valid & (typ == NON_ASSESSED)
            zf = is_l.astype(np.float64)
            q_idx = np.where(is_q, batch.material[:, t], 0)
            l_idx = np.where(is_l, batch.material[:, t], 0)
            r_idx = np.where(is_q, batch.response[:, t], 0)

            pair = batch.next_valid[:, t] & valid
            ntyp = batch.next_type[:, t]
            nq = pair & (ntyp == ASSESSED)
            nl = pair & (ntyp == NON_ASSESSED)
            nq_idx = np.where(nq, batch.next_material[:, t], 0)
            nl_idx = np.where(nl, batch.next_material[:, t], 0)

            qk, lk = lookup(E.A_qk, q_idx), lookup(E.A_lk, l_idx)
            r = lookup(E.A_r, r_idx, mask=is_q)
            qb, lb = lookup(E.A_qb, q_idx), lookup(E.A_lb, l_idx)
            z_emb = lookup(E.A_z, np.where(is_l, TYPE_L, TYPE_Q))
            z_prev = lookup(E.A_z, last_type)

            w_q_t = self._weights(q_idx, ASSESSED, is_q)
            w_l_t = self._weights(l_idx, NON_ASSESSED, is_l)
            w_t = F.where(is_l[:, None], w_l_t, w_q_t)

            # knowledge write, then behaviour update on the new memory
            memory, _, _ = kt.erase_add_update(kp, memory, zf, qk, r, lk, z_prev, z_emb, w_t, beh.h, s, valid)
            beh = bm.lstm_step(self.lstm, zf, qb, lb, z_emb, beh, memory, s, valid)
            h = beh.h

            # previous-of-type (< t) and last-of-type (<= t)
            prev_q, prev_l = last_q, last_l
            cur_q = np.where(is_q, q_idx, last_q)
            cur_l = np.where(is_l, l_idx, last_l)

            w_q_prev = self._weights(prev_q, ASSESSED, prev_q != 0)
            w_l_prev = self._weights(prev_l, NON_ASSESSED, prev_l != 0)
            w_q_last = F.where(is_q[:, None], w_q_t, w_q_prev)
            w_l_last = F.where(is_l[:, None], w_l_t, w_l_prev)
            w_q_next = self._weights(nq_idx, ASSESSED, nq)
            w_l_next = self._weights(nl_idx, NON_ASSESSED, nl)

            read_q = lambda w: kt.read_mastery(kp, memory, w, z_emb, zq)  # noqa: E731
            read_l = lambda w: kt.read_mastery(kp, memory, w, z_emb, zl)  # noqa: E731
            c_q_t, c_l_t = read_q(w_q_t), read_l(w_l_t)
            c_q_prev, c_l_prev = read_q(w_q_prev), read_l(w_l_prev)
            c_q_last = F.where(is_q[:, None], c_q_t, c_q_prev)
            c_l_last = F.where(is_l[:, None], c_l_t, c_l_prev)
            c_q_next, c_l_next = read_q(w_q_next), read_l(w_l_next)

            a_q = bm.encode_anchor(self.encdec.enc_q, h, qb, w_q_t, c_q_t, (w_q_prev, c_q_prev), (w_l_prev, c_l_prev))
            a_l = bm.encode_anchor(self.encdec.enc_l, h, lb, w_l_t, c_l_t, (w_l_prev, c_l_prev), (w_q_prev, c_q_prev))

            # performance and type heads
            qk_next = lookup(E.A_qk, nq_idx)
            perf_logit = kt.performance_logit(kp, c_q_next, qk_next, h)
            type_logit, _ = bm.type_attention(self.type_head, s, qb, r, lb, h)

            step = {}
            nqf, nlf, pairf = nq.astype(float), nl.astype(float), pair.astype(float)
            step["perf"] = F.mul(F.bce_with_logits(perf_logit, np.where(nq, batch.next_response[:, t], 0)), nqf)
            step["type"] = F.mul(F.bce_with_logits(type_logit, ntyp.astype(float)), pairf)

            dist_q = dist_l = None
            if negs is not None:
                neg_t = negs[:, t, :]
                truth = batch.next_material[:, t][:, None]
                cand = np.concatenate([truth, neg_t], axis=1) if truth_first else np.concatenate([neg_t, truth], axis=1)
                cand_q = np.where(nq[:, None], cand, 0)
                cand_l = np.where(nl[:, None], cand, 0)
                w_cq = self._weights(cand_q, ASSESSED, cand_q != 0)
                w_cl = self._weights(cand_l, NON_ASSESSED, cand_l != 0)
                enc_q = bm.encode_candidate(self.encdec.enc_q, h, lookup(E.A_qb, cand_q), w_cq, read_q(w_cq),
                                            (w_q_last, c_q_last), (w_l_last, c_l_last))
                enc_l = bm.encode_candidate(self.encdec.enc_l, h, lookup(E.A_lb, cand_l), w_cl, read_l(w_cl),
                                            (w_l_last, c_l_last), (w_q_last, c_q_last))
                dist_q = bm.l2_distances(a_q, enc_q)
                dist_l = bm.l2_distances(a_l, enc_l)

                ce_q = F.mul(F.log_softmax(bm.contrastive_scores(self.encdec, a_q, enc_q))[:, tpos], -1.0)
                ce_l = F.mul(F.log_softmax(bm.contrastive_scores(self.encdec, a_l, enc_l))[:, tpos], -1.0)
                step["cont"] = F.mul(ce_q, nqf) + F.mul(ce_l, nlf)
                step["ntxent"] = F.mul(ntxent_term(dist_q, tpos), nqf) + F.mul(ntxent_term(dist_l, tpos), nlf)

                if training:
                    p_q, p_l = enc_q[:, tpos], enc_l[:, tpos]
                    q_t_slots = [w_q_t, c_q_t]
                    l_t_slots = [w_l_t, c_l_t]
                    qb_next, lb_next = lookup(E.A_qb, nq_idx), lookup(E.A_lb, nl_idx)
                    q_n_slots = [w_q_next, c_q_next]
                    l_n_slots = [w_l_next, c_l_next]
                    dec_q, dec_l = self.encdec.dec_q, self.encdec.dec_l
                    q_hat_t = bm.decode(dec_q, p_q, [*q_t_slots, lb, *l_t_slots, qb_next, *q_n_slots, lb_next, *l_n_slots], training)
                    q_hat_n = bm.decode(dec_q, a_q, [*q_n_slots, lb_next, *l_n_slots, qb, *q_t_slots, lb, *l_t_slots], training)
                    l_hat_t = bm.decode(dec_l, p_l, [*l_t_slots, qb, *q_t_slots, lb_next, *l_n_slots, qb_next, *q_n_slots], training)
                    l_hat_n = bm.decode(dec_l, a_l, [*l_n_slots, qb_next, *q_n_slots, lb, *l_t_slots, qb, *q_t_slots], training)
                    step["rec"] = (F.mul(F.mse(q_hat_t, qb, axis=-1), (nq & is_q).astype(float))
                                   + F.mul(F.mse(q_hat_n, qb_next, axis=-1), nqf)
                                   + F.mul(F.mse(l_hat_t, lb, axis=-1), (nl & is_l).astype(float))
                                   + F.mul(F.mse(l_hat_n, lb_next, axis=-1), nlf))

            for name, val in step.items():
                val = F.sum(val)
                terms[name] = val if terms[name] is None else terms[name] + val
            n_valid += int(pair.sum())

            if keep_records:
                records["perf_logit"].append(perf_logit.data)
                records["type_logit"].append(type_logit.data)
                records["anchor_q"].append(a_q.data)
                records["anchor_l"].append(a_l.data)
                records["h"].append(h.data)
                records["pair_valid"].append(pair)
                records["next_type"].append(ntyp)
                records["next_response"].append(batch.next_response[:, t])
                if dist_q is not None:
                    records["dist_q"].append(dist_q.data)
                    records["dist_l"].append(dist_l.data)

            last_type = np.where(valid, typ, last_type)
            last_q, last_l = cur_q, cur_l

        for name in LOSS_TERMS:
            if terms[name] is None:
                terms[name] = Tensor(0.0)
        out_state = CarryState(memory.data.copy(), beh.h.data.copy(), beh.m.data.copy(),
                               last_type, last_q, last_l)
        out = SegmentOutput(terms, n_valid, out_state, s)
        if keep_records:
            out.records = {key: np.stack(val, axis=1) for key, val in records.items() if val}
        return out

    def predict_segment(self, batch: BatchArrays, state: CarryState, truth_first: bool = False) -> SegmentOutput:
        with no_grad():
            return self.forward(batch, state, training=False, truth_first=truth_first, keep_records=True)


def ntxent_term(distances: Tensor, truth_pos: int) -> Tensor:
    """Exponentiated NT-Xent for one type from (B, K) anchor distances.

    Equals ``sum_k exp(-d_neg_k) / exp(-d_pos)``, evaluated as
    ``sum_k exp(d_pos - d_neg_k)``.
    """
    k = distances.shape[1]
    d_pos = distances[:, truth_pos:truth_pos + 1]
    neg_idx = [j for j in range(k) if j != truth_pos]
    d_neg = distances[:, neg_idx]
    return F.sum(F.exp(F.sub(d_pos, d_neg)), axis=-1)


def ntxent_loss(anchor_q, positive_q, negatives_q, anchor_l, positive_l, negatives_l) -> Tensor:
    """Two-type exponentiated NT-Xent for single vectors (no batch axis)."""
    total = None
    for a, p, negs in ((anchor_q, positive_q, negatives_q), (anchor_l, positive_l, negatives_l)):
        a = F.reshape(a, (1, -1)) if isinstance(a, Tensor) else Tensor(np.reshape(a, (1, -1)))
        enc = F.concat([F.reshape(p, (1, 1, -1)) if isinstance(p, Tensor) else Tensor(np.reshape(p, (1, 1, -1))),
                        F.reshape(negs, (1, -1, a.shape[1])) if isinstance(negs, Tensor)
                        else Tensor(np.reshape(negs, (1, -1, a.shape[1])))], axis=1)
        term = ntxent_term(bm.l2_distances(a, enc), 0)
        total = term if total is None else total + term
    return F.reshape(total, ())


def weighted_total(terms: Dict[str, Tensor], n_valid: int, weights: Dict[str, float]) -> tuple:
    """Average each summed term over valid steps and add them up."""
    if n_valid == 0:
        means = {name: Tensor(0.0) for name in LOSS_TERMS}
    else:
        means = {name: F.mul(terms[name], 1.0 / n_valid) for name in LOSS_TERMS}
    total = None
    for name in LOSS_TERMS:
        w = weights.get(name, 1.0)
        part = means[name] if w == 1.0 else F.mul(means[name], w)
        total = part if total is None else total + part
    return means, total
