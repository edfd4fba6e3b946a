"""One long stream versus the same stream cut into carried segments."""

import numpy as np

from kmap.config import LOSS_TERMS
from kmap.dataio import SyntheticSpec, default_archetypes, encode, generate_synthetic, sample_negatives, segment
from kmap.model import BatchArrays, KMaPNetwork

RECORD_KEYS = ("perf_logit", "type_logit", "dist_q", "dist_l", "anchor_q", "anchor_l", "h")


def compare_split(config, n_events=200, cut=100, n_students=2, seed=0):
    """Returns the largest absolute difference between the single-segment
    and the carried multi-segment forward pass."""
    spec = SyntheticSpec(n_students, 30, 20, default_archetypes(2, 2), events_per_student=n_events, seed=seed)
    vocab, events, _ = generate_synthetic(spec)
    streams = encode(vocab, events)
    net = KMaPNetwork(config, vocab.n_students, vocab.n_questions, vocab.n_lectures, seed=seed)
    state0 = net.initial_state(n_students, np.random.default_rng(seed))

    def batch_of(segs):
        return BatchArrays.from_segments([sample_negatives(s, vocab, config.k_train, (seed,)) for s in segs])

    whole = net.forward(batch_of(segment(streams, n_events)), state0, keep_records=True)
    segs = segment(streams, cut)
    n_parts = len(segs) // n_students
    state, parts = state0, []
    for i in range(n_parts):
        out = net.forward(batch_of([s for s in segs if s.segment_index == i + 1]), state, keep_records=True)
        parts.append(out)
        state = out.state

    diffs = []
    for key in RECORD_KEYS:
        joined = np.concatenate([p.records[key] for p in parts], axis=1)
        diffs.append(np.max(np.abs(joined - whole.records[key])))
    for name in LOSS_TERMS:
        diffs.append(abs(sum(p.terms[name].item() for p in parts) - whole.terms[name].item()))
    for f in ("memory", "h", "m"):
        diffs.append(np.max(np.abs(getattr(state, f) - getattr(whole.state, f))))
    assert sum(p.n_valid for p in parts) == whole.n_valid
    for f in ("last_type", "last_q", "last_l"):
        assert np.array_equal(getattr(state, f), getattr(whole.state, f))
    return max(diffs)
