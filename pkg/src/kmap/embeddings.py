"""Lookup tables for students, materials, responses and types, plus the
per-material concept weights shared by the knowledge and behaviour parts."""

from __future__ import annotations

import numpy as np

from .layers import Module, init_param
from .numcore import Tensor
from .numcore import functional as F

# rows of the type table
TYPE_Q, TYPE_L, TYPE_START = 0, 1, 2


class EmbeddingTables(Module):
    """``A_s`` and the material tables reserve row 0 for padding.

    ``A_z`` has a third row used as the type of the step before a stream
    starts.
    """

    def __init__(self, rng, n_students, n_questions, n_lectures, d_s=32, d_qk=64, d_lk=32,
                 d_r=32, d_z=32, d_qb=32, d_lb=32, std=0.1):
        if d_qb != d_lb:
            raise ValueError(f"d_qb ({d_qb}) must equal d_lb ({d_lb})")
        self.A_s = init_param(rng, (n_students + 1, d_s), std, pad_row=True)
        self.A_qk = init_param(rng, (n_questions + 1, d_qk), std, pad_row=True)
        self.A_lk = init_param(rng, (n_lectures + 1, d_lk), std, pad_row=True)
        self.A_r = init_param(rng, (2, d_r), std)
        self.A_z = init_param(rng, (3, d_z), std)
        self.A_qb = init_param(rng, (n_questions + 1, d_qb), std, pad_row=True)
        self.A_lb = init_param(rng, (n_lectures + 1, d_lb), std, pad_row=True)


class ConceptProjections(Module):
    def __init__(self, rng, n_questions, n_lectures, n_concepts=8, std=0.1):
        if n_concepts < 1:
            raise ValueError("need at least one concept")
        self.A_w_q = init_param(rng, (n_questions + 1, n_concepts), std, pad_row=True)
        self.A_w_l = init_param(rng, (n_lectures + 1, n_concepts), std, pad_row=True)


def lookup(table: Tensor, index, mask=None) -> Tensor:
    """Rows of ``table`` at ``index``.

    For padded tables index 0 yields a zero vector and no gradient.
    """
    idx = np.asarray(index, dtype=np.int64)
    keep = idx != 0 if getattr(table, "pad_row", False) else None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        keep = m if keep is None else keep & m
    return F.take_rows(table, idx, keep)


def concept_weights(concepts: ConceptProjections, index, material_type: int) -> Tensor:
    """Softmax of the material's concept-projection row.

    The padding row is all zeros, so index 0 gives the uniform vector.
    """
    table = concepts.A_w_q if material_type == 0 else concepts.A_w_l
    idx = np.asarray(index, dtype=np.int64)
    return F.softmax(F.take_rows(table, idx, idx != 0), axis=-1)
