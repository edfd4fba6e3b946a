"""Interaction logs: parsing, vocabularies, segmentation, negatives, synthesis.

Event log format (JSONL, UTF-8), one object per line::

    {"student_id": "s1", "material_id": "q7", "type": "q", "score": 1, "ts": 12}
    {"student_id": "s1", "material_id": "l2", "type": "l", "ts": 13}

``type`` is ``"q"`` for assessed material and ``"l"`` for non-assessed
material; lectures carry no ``score``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

ASSESSED = 0
NON_ASSESSED = 1
NO_SCORE = -1
PAD = 0

_TYPE_CODES = {"q": ASSESSED, "l": NON_ASSESSED}
_TYPE_NAMES = {ASSESSED: "q", NON_ASSESSED: "l"}


class DataFormatError(ValueError):
    """Raised for malformed or inconsistent interaction data."""


@dataclass(frozen=True)
class InteractionEvent:
    student_id: str
    material_id: str
    material_type: int
    score: int
    timestamp: int

    def __post_init__(self):
        if self.material_type == ASSESSED:
            if self.score not in (0, 1):
                raise DataFormatError(f"assessed event {self.material_id!r} needs score 0/1, got {self.score}")
        elif self.material_type == NON_ASSESSED:
            if self.score != NO_SCORE:
                raise DataFormatError(f"non-assessed event {self.material_id!r} must not carry a score")
        else:
            raise DataFormatError(f"unknown material type {self.material_type}")

    def to_json(self) -> dict:
        row = {"student_id": self.student_id, "material_id": self.material_id,
               "type": _TYPE_NAMES[self.material_type]}
        if self.material_type == ASSESSED:
            row["score"] = self.score
        row["ts"] = self.timestamp
        return row


@dataclass
class Vocab:
    """Id spaces for questions, lectures and students; index 0 is padding."""

    question_ids: List[str]
    lecture_ids: List[str]
    student_ids: List[str]
    _q: Dict[str, int] = field(init=False, repr=False)
    _l: Dict[str, int] = field(init=False, repr=False)
    _s: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        for name, ids in (("question", self.question_ids), ("lecture", self.lecture_ids),
                          ("student", self.student_ids)):
            if len(set(ids)) != len(ids):
                raise DataFormatError(f"duplicate {name} ids in vocabulary")
        self._q = {m: i + 1 for i, m in enumerate(self.question_ids)}
        self._l = {m: i + 1 for i, m in enumerate(self.lecture_ids)}
        self._s = {m: i + 1 for i, m in enumerate(self.student_ids)}

    @property
    def n_questions(self) -> int:
        return len(self.question_ids)

    @property
    def n_lectures(self) -> int:
        return len(self.lecture_ids)

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    def size(self, material_type: int) -> int:
        return self.n_questions if material_type == ASSESSED else self.n_lectures

    def material_index(self, material_id: str, material_type: int) -> int:
        table = self._q if material_type == ASSESSED else self._l
        return table[material_id]

    def material_id(self, index: int, material_type: int) -> str:
        ids = self.question_ids if material_type == ASSESSED else self.lecture_ids
        return ids[index - 1]

    def student_index(self, student_id: str) -> int:
        return self._s[student_id]

    def to_json(self) -> dict:
        return {"question_ids": self.question_ids, "lecture_ids": self.lecture_ids,
                "student_ids": self.student_ids}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(list(obj["question_ids"]), list(obj["lecture_ids"]), list(obj["student_ids"]))

    @classmethod
    def from_events(cls, events_by_student: Dict[str, List[InteractionEvent]]) -> "Vocab":
        qs, ls = {}, {}
        for evs in events_by_student.values():
            for e in evs:
                (qs if e.material_type == ASSESSED else ls).setdefault(e.material_id, None)
        vocab = cls(list(qs), list(ls), list(events_by_student))
        if not vocab.question_ids or not vocab.lecture_ids or not vocab.student_ids:
            raise DataFormatError("log must contain at least one question, one lecture and one student")
        return vocab


def parse_event(row: dict) -> InteractionEvent:
    try:
        kind = _TYPE_CODES[row["type"]]
        score = row.get("score")
        if kind == ASSESSED:
            if score is None:
                raise DataFormatError("assessed event missing score")
            score = int(score)
        else:
            if score is not None:
                raise DataFormatError("lecture event carries a score")
            score = NO_SCORE
        return InteractionEvent(str(row["student_id"]), str(row["material_id"]), kind, score, int(row["ts"]))
    except KeyError as exc:
        raise DataFormatError(f"missing field {exc}") from None


def load_events(path) -> tuple:
    """Read a JSONL log. Returns ``(vocab, {student_id: [events]})``.

    Each student's events are ordered by timestamp; ties keep file order.
    """
    grouped: Dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ev = parse_event(json.loads(line))
            except (json.JSONDecodeError, DataFormatError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            grouped.setdefault(ev.student_id, []).append((ev.timestamp, lineno, ev))
    events = {s: [e for _, _, e in sorted(rows, key=lambda r: (r[0], r[1]))] for s, rows in grouped.items()}
    return Vocab.from_events(events), events


def filter_min_events(events_by_student: Dict[str, List[InteractionEvent]], min_events: int) -> Dict[str, List[InteractionEvent]]:
    """Drop students with fewer than ``min_events`` interactions."""
    return {sid: evs for sid, evs in events_by_student.items() if len(evs) >= min_events}


def write_events(path, events_by_student: Dict[str, List[InteractionEvent]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for evs in events_by_student.values():
            for e in evs:
                fh.write(json.dumps(e.to_json(), sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# encoded streams and segments


@dataclass
class Stream:
    """One student's events as index arrays, in time order."""

    student_index: int
    material: np.ndarray   # index within the type's vocabulary
    mtype: np.ndarray      # 0 assessed, 1 non-assessed
    response: np.ndarray   # 0/1, -1 for lectures
    offset: int = 0        # absolute position of element 0 in the full history

    def __len__(self) -> int:
        return len(self.material)


def encode(vocab: Vocab, events_by_student: Dict[str, List[InteractionEvent]]) -> List[Stream]:
    streams = []
    for sid, evs in events_by_student.items():
        if sid not in vocab._s:
            raise DataFormatError(f"student {sid!r} is not in the vocabulary")
        for e in evs:
            if e.material_id not in (vocab._q if e.material_type == ASSESSED else vocab._l):
                raise DataFormatError(f"material {e.material_id!r} is not in the vocabulary")
        streams.append(Stream(
            student_index=vocab.student_index(sid),
            material=np.array([vocab.material_index(e.material_id, e.material_type) for e in evs], dtype=np.int64),
            mtype=np.array([e.material_type for e in evs], dtype=np.int64),
            response=np.array([e.score for e in evs], dtype=np.int64),
        ))
    return streams


def split_streams(streams: Sequence[Stream], train_frac: float = 0.8) -> tuple:
    """Temporal split per student: the earliest ``train_frac`` of events train."""
    train, test = [], []
    for s in streams:
        n_train = int(math.floor(train_frac * len(s) + 1e-9))
        n_train = min(max(n_train, 1), len(s))
        train.append(Stream(s.student_index, s.material[:n_train], s.mtype[:n_train], s.response[:n_train], s.offset))
        if n_train < len(s):
            test.append(Stream(s.student_index, s.material[n_train:], s.mtype[n_train:],
                               s.response[n_train:], s.offset + n_train))
    return train, test


@dataclass
class SegmentBatch:
    """A fixed-length window of one student's stream.

    Per-step arrays have length ``T``. The ``next_*`` fields describe the
    event right after the window (the target of the last step) when it
    exists. ``negatives[t]`` holds candidates for the material at ``t + 1``.
    """

    student_index: int
    segment_index: int
    material: np.ndarray
    mtype: np.ndarray
    response: np.ndarray
    mask: np.ndarray
    position: int
    next_material: int = PAD
    next_type: int = ASSESSED
    next_response: int = NO_SCORE
    next_valid: bool = False
    negatives: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return len(self.material)

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def target_arrays(self) -> tuple:
        """Arrays of length T for the event following each step."""
        mat = np.append(self.material[1:], self.next_material)
        typ = np.append(self.mtype[1:], self.next_type)
        resp = np.append(self.response[1:], self.next_response)
        valid = np.append(self.mask[1:], self.next_valid) & self.mask
        return mat, typ, resp, valid


def segment(streams: Sequence[Stream], T: int) -> List[SegmentBatch]:
    """Split each stream into ``ceil(len / T)`` right-padded segments."""
    if T < 2:
        raise ValueError(f"segment length must be >= 2, got {T}")
    out = []
    for s in streams:
        n = len(s)
        for i in range(max(1, math.ceil(n / T))):
            lo, hi = i * T, min((i + 1) * T, n)
            pad = T - (hi - lo)
            material = np.concatenate([s.material[lo:hi], np.zeros(pad, np.int64)])
            mtype = np.concatenate([s.mtype[lo:hi], np.zeros(pad, np.int64)])
            response = np.concatenate([s.response[lo:hi], np.full(pad, NO_SCORE, np.int64)])
            mask = np.concatenate([np.ones(hi - lo, bool), np.zeros(pad, bool)])
            seg = SegmentBatch(s.student_index, i + 1, material, mtype, response, mask, s.offset + lo)
            if hi < n:
                seg.next_material = int(s.material[hi])
                seg.next_type = int(s.mtype[hi])
                seg.next_response = int(s.response[hi])
                seg.next_valid = True
            out.append(seg)
    return out


def unsegment(segments: Sequence[SegmentBatch]) -> tuple:
    """Concatenate valid steps of consecutive segments (inverse of ``segment``)."""
    parts = [(sg.material[sg.mask], sg.mtype[sg.mask], sg.response[sg.mask]) for sg in segments]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def _sample_excluding(rng: np.random.Generator, n: int, exclude: int, k: int) -> np.ndarray:
    # uniform k-subset of {1..n} \ {exclude}
    draw = rng.choice(n - 1, size=k, replace=False) + 1
    draw[draw >= exclude] += 1
    return draw


def sample_negatives(batch: SegmentBatch, vocab: Vocab, k: int, seed) -> SegmentBatch:
    """Attach ``k`` same-type negatives for every step with a valid target.

    Draws depend only on ``(seed, student, absolute position)``, so the same
    step gets the same candidates however the stream is segmented.
    """
    seed = tuple(np.atleast_1d(seed).tolist())
    mat, typ, _, valid = batch.target_arrays()
    neg = np.zeros((batch.length, k), dtype=np.int64)
    for t in np.flatnonzero(valid):
        n = vocab.size(int(typ[t]))
        if k > n - 1:
            kind = "question" if typ[t] == ASSESSED else "lecture"
            raise ValueError(f"k={k} negatives requested but only {n - 1} other {kind}s exist")
        rng = np.random.default_rng([*seed, batch.student_index, batch.position + int(t)])
        neg[t] = _sample_excluding(rng, n, int(mat[t]), k)
    return replace(batch, negatives=neg)


def augment_drop(batches: Sequence[SegmentBatch], drop_frac: float, user_frac: float, seed) -> List[SegmentBatch]:
    """Replace a fraction of steps by masked padding for a fraction of users.

    ``user_frac`` of the batch's students are chosen; for each, ``drop_frac``
    of their valid steps become padding. Intended for training batches only.
    """
    if not (0.0 <= drop_frac <= 1.0 and 0.0 <= user_frac <= 1.0):
        raise ValueError("drop_frac and user_frac must lie in [0, 1]")
    batches = list(batches)
    if drop_frac == 0.0 or user_frac == 0.0 or not batches:
        return batches
    rng = np.random.default_rng(np.atleast_1d(seed).tolist())
    n_users = int(round(user_frac * len(batches)))
    chosen = set(rng.choice(len(batches), size=n_users, replace=False).tolist())
    out = []
    for i, b in enumerate(batches):
        if i not in chosen:
            out.append(b)
            continue
        valid = np.flatnonzero(b.mask)
        n_drop = int(round(drop_frac * len(valid)))
        drop = rng.choice(valid, size=n_drop, replace=False) if n_drop else np.array([], np.int64)
        mask = b.mask.copy()
        material = b.material.copy()
        response = b.response.copy()
        mask[drop] = False
        material[drop] = PAD
        response[drop] = NO_SCORE
        out.append(replace(b, material=material, response=response, mask=mask))
    return out


# ---------------------------------------------------------------------------
# synthetic data with planted behavioural archetypes


@dataclass
class Archetype:
    lecture_rate: float
    topic_affinity: List[float]
    learning_rate: float = 0.3
    transition: Optional[List[List[float]]] = None
    curriculum_rate: float = 0.8

    def type_transition(self) -> np.ndarray:
        if self.transition is not None:
            return np.asarray(self.transition, dtype=np.float64)
        row = [1.0 - self.lecture_rate, self.lecture_rate]
        return np.array([row, row])


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic cohort.

    Materials of each type are split into ``len(topic_affinity)`` contiguous
    topic blocks. Within a block students mostly walk the block in order
    (``curriculum_rate``), otherwise jump uniformly.
    """

    n_students: int
    n_questions: int
    n_lectures: int
    archetypes: List[Archetype]
    events_per_student: int = 60
    seed: int = 0
    block_stickiness: float = 0.8

    @property
    def n_archetypes(self) -> int:
        return len(self.archetypes)

    def validate(self) -> None:
        if min(self.n_students, self.n_questions, self.n_lectures, self.events_per_student) < 1:
            raise ValueError("counts must be positive")
        if not self.archetypes:
            raise ValueError("need at least one archetype")
        for a in self.archetypes:
            probs = [a.lecture_rate, a.curriculum_rate, self.block_stickiness, *a.topic_affinity]
            if any(not 0.0 <= p <= 1.0 for p in probs):
                raise ValueError("probabilities must lie in [0, 1]")
            tr = a.type_transition()
            if tr.shape != (2, 2) or np.any(tr < 0) or not np.allclose(tr.sum(axis=1), 1.0):
                raise ValueError("type transition rows must be probability vectors")
            if sum(a.topic_affinity) <= 0:
                raise ValueError("topic affinity must have positive mass")
        n_blocks = {len(a.topic_affinity) for a in self.archetypes}
        if len(n_blocks) != 1:
            raise ValueError("all archetypes need the same number of topic blocks")
        if min(self.n_questions, self.n_lectures) < n_blocks.pop():
            raise ValueError("fewer materials than topic blocks")

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        obj = dict(obj)
        n_arch = obj.pop("n_archetypes", None)
        if "archetypes" in obj:
            obj["archetypes"] = [Archetype(**a) for a in obj["archetypes"]]
        else:
            obj["archetypes"] = default_archetypes(n_arch or 3)
        spec = cls(**obj)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _blocks(n: int, n_blocks: int) -> List[np.ndarray]:
    return [b + 1 for b in np.array_split(np.arange(n), n_blocks)]


def generate_synthetic(spec: SyntheticSpec) -> tuple:
    """Draw a cohort. Returns ``(vocab, events_by_student, labels)``.

    ``labels`` maps student id to archetype index.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_blocks = len(spec.archetypes[0].topic_affinity)
    blocks = {ASSESSED: _blocks(spec.n_questions, n_blocks), NON_ASSESSED: _blocks(spec.n_lectures, n_blocks)}
    q_ids = [f"q{i}" for i in range(1, spec.n_questions + 1)]
    l_ids = [f"l{i}" for i in range(1, spec.n_lectures + 1)]
    width = len(str(spec.n_students))
    s_ids = [f"s{i:0{width}d}" for i in range(1, spec.n_students + 1)]
    difficulty = rng.normal(0.0, 1.0, size=spec.n_questions + 1)

    labels = {}
    events = {}
    for sid in s_ids:
        arch_idx = int(rng.integers(spec.n_archetypes))
        arch = spec.archetypes[arch_idx]
        labels[sid] = arch_idx
        affinity = np.asarray(arch.topic_affinity, dtype=np.float64)
        affinity = affinity / affinity.sum()
        trans = arch.type_transition()
        mastery = rng.normal(0.0, 0.5, size=n_blocks)
        pointer = {ASSESSED: [0] * n_blocks, NON_ASSESSED: [0] * n_blocks}
        kind = int(rng.random() < arch.lecture_rate)
        block = int(rng.choice(n_blocks, p=affinity))
        evs = []
        for t in range(spec.events_per_student):
            if t > 0:
                kind = int(rng.random() < trans[kind, 1])
                if rng.random() >= spec.block_stickiness:
                    block = int(rng.choice(n_blocks, p=affinity))
            pool = blocks[kind][block]
            if rng.random() < arch.curriculum_rate:
                pos = pointer[kind][block] % len(pool)
                pointer[kind][block] = pos + 1
            else:
                pos = int(rng.integers(len(pool)))
                pointer[kind][block] = pos + 1
            material = int(pool[pos])
            if kind == ASSESSED:
                p_correct = 1.0 / (1.0 + math.exp(-(mastery[block] - difficulty[material])))
                score = int(rng.random() < p_correct)
                evs.append(InteractionEvent(sid, q_ids[material - 1], ASSESSED, score, t))
            else:
                evs.append(InteractionEvent(sid, l_ids[material - 1], NON_ASSESSED, NO_SCORE, t))
            mastery[block] += arch.learning_rate
        events[sid] = evs
    vocab = Vocab(q_ids, l_ids, s_ids)
    return vocab, events, labels


def write_labels(path, labels: Dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["student_id", "archetype"])
        for sid, lab in labels.items():
            writer.writerow([sid, lab])


def read_labels(path) -> Dict[str, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["student_id"]: int(row["archetype"]) for row in csv.DictReader(fh)}


def default_archetypes(n: int = 3, n_blocks: int = 3) -> List[Archetype]:
    """Well-separated archetypes: distinct lecture rates and home topic blocks."""
    rates = np.linspace(0.15, 0.85, n) if n > 1 else [0.5]
    out = []
    for i in range(n):
        aff = [0.05] * n_blocks
        aff[i % n_blocks] = 1.0
        out.append(Archetype(lecture_rate=float(rates[i]), topic_affinity=aff,
                             learning_rate=0.1 + 0.2 * i / max(n - 1, 1)))
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
