"""Ranking and classification metrics for next-material, next-type and
correctness prediction. Averages are micro-averages over evaluation steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class RankResult:
    rank_of_truth: int
    cutoff: int

    def __post_init__(self):
        if self.rank_of_truth < 1:
            raise ValueError("ranks are 1-based")


def hr_at_k(rank, k: int = 5):
    """1 if the truth is within the top ``k``, else 0 (vectorised)."""
    r = np.asarray(rank)
    out = (r <= k).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def ndcg_at_k(rank, k: int = 5):
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def mrr(rank):
    r = np.asarray(rank, dtype=np.float64)
    out = 1.0 / r
    return float(out) if out.ndim == 0 else out


def rank_of_truth(distances, truth_index: int) -> np.ndarray:
    """1-based rank of the truth under ascending distance with stable ties.

    ``distances`` has shape (..., K). Among equal distances the lower
    candidate index ranks first.
    """
    d = np.asarray(distances, dtype=np.float64)
    order = np.argsort(d, axis=-1, kind="stable")
    return np.argmax(order == truth_index, axis=-1) + 1


def ranking_summary(ranks, k: int = 5) -> dict:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return {f"hr@{k}": float("nan"), f"ndcg@{k}": float("nan"), "mrr": float("nan"), "n": 0}
    return {
        f"hr@{k}": float(np.mean(hr_at_k(ranks, k))),
        f"ndcg@{k}": float(np.mean(ndcg_at_k(ranks, k))),
        "mrr": float(np.mean(mrr(ranks))),
        "n": int(ranks.size),
    }


def auc(scores, labels) -> float:
    """Mann–Whitney AUC: share of (positive, negative) pairs ordered
    correctly, ties counting one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
