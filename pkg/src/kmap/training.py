"""Two-stage optimisation: the inner loop over segment batches and the outer
profiling step per epoch, plus evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import LOSS_TERMS, TrainConfig
from .dataio import ASSESSED, NON_ASSESSED, SegmentBatch, Stream, Vocab, augment_drop, sample_negatives, segment
from .embeddings import lookup
from .metrics import auc, rank_of_truth, ranking_summary
from .model import BatchArrays, CarryState, KMaPNetwork, ntxent_loss, weighted_total
from .numcore import Tensor, adam_step, clip_grad_norm, no_grad, zero_grad
from .numcore import functional as F
from .profiling import (ClusterResult, ProfileLedger, StateStore, convergence_loss, epoch_cluster,
                        init_segment_state, silhouette_loss)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kmap-checkpoint"
CHECKPOINT_VERSION = 1

__all__ = [
    "LossBreakdown", "Trainer", "reconstruction_loss", "contrastive_ce_loss", "ntxent_loss",
    "save_checkpoint", "load_checkpoint", "evaluate",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    L_cont: float
    L_rec: float
    L_ntxent: float
    L_perf: float
    L_type: float
    total: float
    valid_steps: int

    @classmethod
    def from_terms(cls, means: Dict[str, Tensor], total: Tensor, n_valid: int) -> "LossBreakdown":
        return cls(*(means[t].item() for t in LOSS_TERMS), total.item(), n_valid)

    def terms(self) -> Dict[str, float]:
        return dict(zip(LOSS_TERMS, (self.L_cont, self.L_rec, self.L_ntxent, self.L_perf, self.L_type)))

    def recomputed_total(self, weights: Optional[Dict[str, float]] = None) -> float:
        weights = weights or {}
        total = 0.0
        for i, (name, val) in enumerate(self.terms().items()):
            w = weights.get(name, 1.0)
            part = val if w == 1.0 else val * w
            total = part if i == 0 else total + part
        return total


# ---------------------------------------------------------------------------
# standalone loss terms


def reconstruction_loss(targets: Sequence, reconstructions: Sequence, masks: Optional[Sequence] = None) -> Tensor:
    """Sum of per-pair MSEs, each averaged over dims and over its valid rows."""
    total = None
    for i, (y, y_hat) in enumerate(zip(targets, reconstructions)):
        err = F.mse(y_hat, y, axis=-1)
        if masks is not None:
            m = np.asarray(masks[i], dtype=np.float64)
            err = F.mul(F.sum(F.mul(err, m)), 1.0 / max(m.sum(), 1.0))
        else:
            err = F.mean(err)
        total = err if total is None else total + err
    return total


def contrastive_ce_loss(scores, truth_index: int = 0) -> Tensor:
    """Cross-entropy of softmax over candidate scores against the truth.

    ``scores`` is (K,) or (B, K); the batch mean is returned.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    if s.ndim == 1:
        s = F.reshape(s, (1, -1))
    return F.mul(F.mean(F.log_softmax(s)[:, truth_index]), -1.0)


# ---------------------------------------------------------------------------
# batching


def group_by_student(segments: Sequence[SegmentBatch]) -> Dict[int, List[SegmentBatch]]:
    out: Dict[int, List[SegmentBatch]] = {}
    for sg in segments:
        out.setdefault(sg.student_index, []).append(sg)
    for segs in out.values():
        segs.sort(key=lambda s: s.segment_index)
    return out


def iter_batches(per_student: Dict[int, List[SegmentBatch]], batch_size: int,
                 order: Optional[Sequence[int]] = None) -> Iterator[List[SegmentBatch]]:
    """Segment-synchronous batches: a chunk of students, one segment index at
    a time, so each student's segments are visited in order."""
    students = list(per_student) if order is None else list(order)
    for lo in range(0, len(students), batch_size):
        chunk = students[lo:lo + batch_size]
        depth = max(len(per_student[s]) for s in chunk)
        for i in range(depth):
            batch = [per_student[s][i] for s in chunk if i < len(per_student[s])]
            if batch:
                yield batch


# ---------------------------------------------------------------------------
# trainer


@dataclass
class EpochRecord:
    epoch: int
    losses: Dict[str, float]
    outer: Dict[str, float] = field(default_factory=dict)
    eval: Dict[str, float] = field(default_factory=dict)


class Trainer:
    def __init__(self, config: TrainConfig, vocab: Vocab, network: Optional[KMaPNetwork] = None):
        self.config = config.validate()
        self.vocab = vocab
        if network is None:
            network = KMaPNetwork(config, vocab.n_students, vocab.n_questions, vocab.n_lectures, seed=config.seed)
            if config.concept_weights_path:
                load_concept_weights(network, config.concept_weights_path)
        self.network = network
        self.store = StateStore()
        self.ledger = ProfileLedger()
        self.clusters: Optional[ClusterResult] = None
        self.history: List[EpochRecord] = []
        self.step_log: List[LossBreakdown] = []
        self.epoch = 0

    # -- inner loop ------------------------------------------------------------
    def train_step(self, segments: Sequence[SegmentBatch], rng: np.random.Generator, augment: bool = True,
                   batch_seed=0) -> LossBreakdown:
        c, net = self.config, self.network
        if augment:
            segments = augment_drop(segments, c.drop_frac, c.user_frac, batch_seed)
        segments = [sample_negatives(sg, self.vocab, c.k_train, (c.seed, self.epoch)) for sg in segments]
        batch = BatchArrays.from_segments(segments)
        first = [sg.segment_index == 1 for sg in segments]
        state = init_segment_state(net, self.store, batch.students, first, rng)

        out = net.forward(batch, state, training=True)
        means, total = weighted_total(out.terms, out.n_valid, c.loss_weights)
        for name in LOSS_TERMS:
            if not np.isfinite(means[name].item()):
                raise TrainingError(f"non-finite loss term '{name}' at epoch {self.epoch}")
        record = LossBreakdown.from_terms(means, total, out.n_valid)

        A_s = net.embed.A_s
        base = A_s.data[batch.students].copy()
        params = net.inner_parameters()
        zero_grad(net.parameters())
        if out.n_valid > 0 and total.requires_grad:
            total.backward()
        grad_s = A_s.grad[batch.students].copy() if A_s.grad is not None else np.zeros_like(base)
        A_s.grad = None  # the inner optimiser never moves the base table
        if out.n_valid > 0:
            clip_grad_norm(params, c.clip_norm)
            adam_step(params, c.lr, c.betas, c.adam_eps)
        zero_grad(net.parameters())

        for i, student in enumerate(batch.students):
            self.store.put(int(student), out.state.row(i))
            self.ledger.record_segment(int(student), base[i], grad_s[i], c.lr, out.state.h[i])
        self.step_log.append(record)
        return record

    def inner_epoch(self, segments: Sequence[SegmentBatch], augment: bool = True) -> List[LossBreakdown]:
        c = self.config
        per_student = group_by_student(segments)
        order_rng = np.random.default_rng([c.seed, self.epoch, 1])
        order = order_rng.permutation(sorted(per_student)).tolist()
        init_rng = np.random.default_rng([c.seed, self.epoch, 2])
        records = []
        for b, batch in enumerate(iter_batches(per_student, c.batch_size, order)):
            records.append(self.train_step(batch, init_rng, augment=augment, batch_seed=[c.seed, self.epoch, 3, b]))
        return records

    # -- outer loop ------------------------------------------------------------
    def outer_losses(self, res: ClusterResult) -> tuple:
        """Convergence and silhouette losses of the current ledger as
        functions of the base student table. The silhouette term is None when
        fewer than two clusters are occupied."""
        c, A_s = self.config, self.network.embed.A_s
        snaps = []
        for student in res.students:
            offsets = np.stack(self.ledger.offsets[student])
            base = lookup(A_s, np.full(len(offsets), student))
            snaps.append(F.add(base, Tensor(offsets)))
        conv = convergence_loss(snaps)
        if res.occupied.sum() < 2:
            return conv, None
        v_bar = F.stack([F.mean(F.div(v, F.expand_dims(F.l2_norm(v, axis=-1), -1)), axis=0) for v in snaps])
        return conv, silhouette_loss(v_bar, res.labels, res.centroid_embeddings, c.tau, res.occupied)

    def outer_step(self) -> Dict[str, float]:
        c, net = self.config, self.network
        students = self.ledger.students
        if not students:
            return {}
        n_clusters = min(c.n_clusters, len(students))
        res = epoch_cluster(self.ledger, n_clusters, seed=c.seed + self.epoch)
        self.clusters = res
        conv, sil = self.outer_losses(res)
        loss = conv if sil is None else conv + sil
        zero_grad(net.parameters())
        if loss.requires_grad:
            loss.backward()
            adam_step([net.embed.A_s], c.outer_learning_rate, c.betas, c.adam_eps)
        zero_grad(net.parameters())
        self.ledger.clear()
        return {"conv": conv.item(), "silhouette": float("nan") if sil is None else sil.item()}

    # -- driver ------------------------------------------------------------------
    def fit(self, train_streams: Sequence[Stream], epochs: Optional[int] = None, eval_fn=None,
            metrics_path=None) -> List[EpochRecord]:
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        segments = segment(train_streams, c.T)
        if c.profiling and c.n_clusters > len({s.student_index for s in train_streams}):
            raise ValueError(f"n_clusters={c.n_clusters} exceeds the number of students")
        writer = None
        fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", encoding="utf-8", newline="")
            writer = csv.writer(fh, lineterminator="\n")
        try:
            for _ in range(epochs):
                self.epoch += 1
                recs = self.inner_epoch(segments)
                losses = _epoch_mean(recs)
                outer = self.outer_step() if c.profiling else {}
                self.ledger.clear()
                rec = EpochRecord(self.epoch, losses, outer)
                if eval_fn is not None and c.eval_every and self.epoch % c.eval_every == 0:
                    rec.eval = eval_fn(self)
                self.history.append(rec)
                log.info("epoch %d total=%.4f %s", self.epoch, losses["total"], outer)
                if writer is not None:
                    if self.epoch == 1 or fh.tell() == 0:
                        writer.writerow(["epoch", *LOSS_TERMS, "total", "conv", "silhouette", *sorted(rec.eval)])
                    writer.writerow([self.epoch, *(losses[t] for t in LOSS_TERMS), losses["total"],
                                     outer.get("conv", ""), outer.get("silhouette", ""),
                                     *(rec.eval[k] for k in sorted(rec.eval))])
                    fh.flush()
        finally:
            if fh is not None:
                fh.close()
        return self.history


def _epoch_mean(records: Sequence[LossBreakdown]) -> Dict[str, float]:
    n = sum(r.valid_steps for r in records)
    if n == 0:
        return {**{t: 0.0 for t in LOSS_TERMS}, "total": 0.0}
    out = {t: sum(r.terms()[t] * r.valid_steps for r in records) / n for t in LOSS_TERMS}
    out["total"] = sum(r.total * r.valid_steps for r in records) / n
    return out


# ---------------------------------------------------------------------------
# evaluation


def run_stream_state(network: KMaPNetwork, streams: Sequence[Stream], T: int, batch_size: int, seed: int) -> Dict[int, CarryState]:
    """Forward the streams without candidates and return terminal states."""
    store = StateStore()
    per_student = group_by_student(segment(streams, T))
    rng = np.random.default_rng([seed, 7])
    with no_grad():
        for batch_segs in iter_batches(per_student, batch_size):
            batch = BatchArrays.from_segments(batch_segs)
            first = [sg.segment_index == 1 for sg in batch_segs]
            state = init_segment_state(network, store, batch.students, first, rng)
            out = network.forward(batch, state, training=False)
            for i, s in enumerate(batch.students):
                store.put(int(s), out.state.row(i))
    return {s: store.get(s) for s in per_student}


def evaluate(network: KMaPNetwork, vocab: Vocab, streams: Sequence[Stream], config: TrainConfig,
             warmup: Optional[Sequence[Stream]] = None, k_eval: Optional[int] = None, seed: Optional[int] = None) -> dict:
    """Rank-based and AUC metrics over every step with a valid next event.

    ``warmup`` streams (typically the training part) are run first so that
    the evaluated streams start from carried state.
    """
    k_eval = config.k_eval if k_eval is None else k_eval
    seed = config.seed if seed is None else seed
    cutoff = config.cutoff
    warm = run_stream_state(network, warmup, config.T, config.batch_size, seed) if warmup else {}
    store = StateStore()
    for s, st in warm.items():
        store.put(s, st)
    per_student = group_by_student(segment(streams, config.T))
    rng = np.random.default_rng([seed, 11])
    ranks = {ASSESSED: [], NON_ASSESSED: []}
    perf_p, perf_y, type_p, type_y = [], [], [], []
    with no_grad():
        for batch_segs in iter_batches(per_student, config.batch_size):
            batch_segs = [sample_negatives(sg, vocab, k_eval, (seed, 0)) for sg in batch_segs]
            batch = BatchArrays.from_segments(batch_segs)
            first = [sg.segment_index == 1 and sg.student_index not in store for sg in batch_segs]
            state = init_segment_state(network, store, batch.students, first, rng)
            out = network.predict_segment(batch, state, truth_first=False)
            for i, s in enumerate(batch.students):
                store.put(int(s), out.state.row(i))
            rec = out.records
            pair = rec["pair_valid"]
            ntype = rec["next_type"]
            q_mask = pair & (ntype == ASSESSED)
            l_mask = pair & (ntype == NON_ASSESSED)
            ranks[ASSESSED].append(rank_of_truth(rec["dist_q"], k_eval)[q_mask])
            ranks[NON_ASSESSED].append(rank_of_truth(rec["dist_l"], k_eval)[l_mask])
            perf_p.append(_sigmoid(rec["perf_logit"][q_mask]))
            perf_y.append(rec["next_response"][q_mask])
            type_p.append(_sigmoid(rec["type_logit"][pair]))
            type_y.append(ntype[pair])
    result = {
        "assessed": ranking_summary(np.concatenate(ranks[ASSESSED]) if ranks[ASSESSED] else [], cutoff),
        "non_assessed": ranking_summary(np.concatenate(ranks[NON_ASSESSED]) if ranks[NON_ASSESSED] else [], cutoff),
        "k_eval": k_eval,
    }
    result["auc_perf"] = _safe_auc(perf_p, perf_y)
    result["auc_type"] = _safe_auc(type_p, type_y)
    return result


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _safe_auc(p_parts, y_parts) -> float:
    if not p_parts:
        return float("nan")
    p, y = np.concatenate(p_parts), np.concatenate(y_parts)
    try:
        return auc(p, y)
    except ValueError:
        return float("nan")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, trainer: Trainer) -> None:
    """Write a JSON checkpoint.

    Layout::

        {"format": "kmap-checkpoint", "version": 1, "package_version": ...,
         "config": {...}, "vocab": {...}, "epoch": n,
         "params": {name: {"shape": [...], "values": [flat row-major floats]}},
         "profiles": null | {"students": [...], "labels": [...], "v_bar": [[...]],
                             "b_bar": [[...]], "d_ic": [...], "d_nc": [...]}}
    """
    params = {name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
              for name, p in trainer.network.named_parameters()}
    profiles = None
    if trainer.clusters is not None:
        cr = trainer.clusters
        profiles = {
            "students": [trainer.vocab.student_ids[s - 1] for s in cr.students],
            "labels": cr.labels.tolist(),
            "v_bar": cr.v_bar.tolist(),
            "b_bar": cr.b_bar.tolist(),
            "d_ic": cr.d_ic.tolist(),
            "d_nc": [float(x) if np.isfinite(x) else None for x in cr.d_nc],
        }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": trainer.config.to_dict(),
        "vocab": trainer.vocab.to_json(),
        "epoch": trainer.epoch,
        "params": params,
        "profiles": profiles,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple:
    """Returns ``(trainer, profiles)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a KMaP checkpoint")
    config = TrainConfig.from_dict(doc["config"])
    vocab = Vocab.from_json(doc["vocab"])
    trainer = Trainer(config, vocab)
    trainer.network.load_state_dict({name: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                                     for name, v in doc["params"].items()})
    trainer.epoch = int(doc.get("epoch", 0))
    return trainer, doc.get("profiles")


def load_concept_weights(network: KMaPNetwork, path) -> None:
    """Load externally trained concept projections from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    params = doc["params"] if "params" in doc else doc
    state = {}
    for name in ("concepts.A_w_q", "concepts.A_w_l"):
        v = params[name]
        state[name] = np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
    own = dict(network.named_parameters())
    for name, arr in state.items():
        if arr.shape != own[name].shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match model {own[name].shape}")
        own[name].data[...] = arr
