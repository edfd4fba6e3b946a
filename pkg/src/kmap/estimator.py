"""Estimator-style wrapper around the trainer.

``X`` is an interaction log in any form accepted by
:func:`kmap.validation.check_events`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import TrainConfig, preset_config
from .dataio import Vocab, encode, filter_min_events, split_streams
from .profiling import row_normalize
from .training import Trainer, evaluate, run_stream_state
from .validation import check_events, check_is_fitted


class KMaP(BaseEstimator):
    """Joint knowledge-tracing and behaviour model with student profiling.

    ``fit`` trains on the earliest ``train_frac`` of each student's events,
    ``score`` reports the mean next-material HR over the held-out remainder
    and ``transform`` returns per-student profile embeddings.
    """

    def __init__(self, preset=None, epochs=None, T=None, lr=None, batch_size=None, k_train=None, k_eval=None,
                 n_clusters=None, tau=None, train_frac=None, profiling=True, seed=0, config_overrides=None):
        self.preset = preset
        self.epochs = epochs
        self.T = T
        self.lr = lr
        self.batch_size = batch_size
        self.k_train = k_train
        self.k_eval = k_eval
        self.n_clusters = n_clusters
        self.tau = tau
        self.train_frac = train_frac
        self.profiling = profiling
        self.seed = seed
        self.config_overrides = config_overrides

    def _make_config(self) -> TrainConfig:
        params = dict(epochs=self.epochs, T=self.T, lr=self.lr, batch_size=self.batch_size, k_train=self.k_train,
                      k_eval=self.k_eval, n_clusters=self.n_clusters, tau=self.tau, train_frac=self.train_frac,
                      profiling=self.profiling, seed=self.seed)
        params = {k: v for k, v in params.items() if v is not None}  # None: preset or config default
        params.update(self.config_overrides or {})
        if self.preset is not None:
            return preset_config(self.preset, **params)
        return TrainConfig(**params).validate()

    def fit(self, X, y=None):
        config = self._make_config()
        events = filter_min_events(check_events(X), config.min_events)
        self.vocab_ = Vocab.from_events(events)
        streams = encode(self.vocab_, events)
        self.train_streams_, self.test_streams_ = split_streams(streams, config.train_frac)
        self.trainer_ = Trainer(config, self.vocab_)
        self.history_ = self.trainer_.fit(self.train_streams_)
        self.config_ = config
        self.n_students_ = self.vocab_.n_students
        return self

    def _streams(self, X):
        if X is None:
            return self.test_streams_
        return encode(self.vocab_, check_events(X))

    def evaluate(self, X=None) -> dict:
        """Metrics on ``X`` (default: the held-out part of the training log),
        starting from the state reached on the training part."""
        check_is_fitted(self)
        return evaluate(self.trainer_.network, self.vocab_, self._streams(X), self.config_,
                        warmup=self.train_streams_)

    def score(self, X=None, y=None) -> float:
        res = self.evaluate(X)
        key = f"hr@{self.config_.cutoff}"
        vals = [res[t][key] for t in ("assessed", "non_assessed") if res[t]["n"]]
        return float(np.mean(vals)) if vals else float("nan")

    def transform(self, X=None):
        """Mean profile embedding of each student in ``X`` (rows follow the
        order of first appearance). Needs at least one profiling epoch."""
        check_is_fitted(self)
        clusters = self.trainer_.clusters
        if clusters is None:
            raise RuntimeError("no profiles available; fit with profiling=True and epochs >= 1")
        pos = {s: i for i, s in enumerate(clusters.students)}
        ids = self.vocab_.student_ids if X is None else list(check_events(X))
        rows = []
        for sid in ids:
            idx = self.vocab_.student_index(sid)
            if idx not in pos:
                raise ValueError(f"student {sid!r} has no profile")
            rows.append(clusters.v_bar[pos[idx]])
        return np.stack(rows)

    def fit_transform(self, X, y=None):
        return self.fit(X).transform()

    def predict(self, X):
        """Behavioural cluster of each student in ``X``: nearest centroid of
        the normalised terminal behaviour state after replaying ``X``."""
        check_is_fitted(self)
        clusters = self.trainer_.clusters
        if clusters is None:
            raise RuntimeError("no clusters available; fit with profiling=True and epochs >= 1")
        streams = self._streams(X)
        c = self.config_
        states = run_stream_state(self.trainer_.network, streams, c.T, c.batch_size, c.seed)
        order = [s.student_index for s in streams]
        h = row_normalize(np.stack([states[s].h for s in order]))
        d2 = ((h[:, None, :] - clusters.centers[None]) ** 2).sum(axis=-1)
        return d2.argmin(axis=1)
