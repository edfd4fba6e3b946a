import numpy as np
import pytest

from kmap.config import TrainConfig
from kmap.dataio import SyntheticSpec, default_archetypes, encode, generate_synthetic


def small_config(**overrides):
    base = dict(d_s=6, d_qk=5, d_lk=4, d_r=3, d_z=3, d_qb=4, d_lb=4, n_concepts=3, d_v=5, d_h=4,
                n_heads=2, attn_dim=4, T=6, k_train=3, k_eval=5, batch_size=4, n_clusters=2,
                drop_frac=0.0, lr=0.01)
    base.update(overrides)
    return TrainConfig(**base).validate()


def tiny_dataset(n_students=6, n_questions=12, n_lectures=8, events=14, seed=0):
    spec = SyntheticSpec(n_students, n_questions, n_lectures, default_archetypes(2, 2),
                         events_per_student=events, seed=seed)
    vocab, ev, labels = generate_synthetic(spec)
    return vocab, ev, labels, encode(vocab, ev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_dataset()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
