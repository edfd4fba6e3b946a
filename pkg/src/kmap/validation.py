"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path
from typing import Dict, List

from .dataio import DataFormatError, InteractionEvent, load_events, parse_event


def check_events(X) -> Dict[str, List[InteractionEvent]]:
    """Coerce ``X`` into ``{student_id: [events in time order]}``.

    Accepts a path to a JSONL log, a mapping of student ids to event lists,
    or a flat iterable of events / event dicts.
    """
    if isinstance(X, (str, Path)):
        _, events = load_events(X)
        return events
    if isinstance(X, Mapping):
        out = {}
        for sid, evs in X.items():
            evs = [_as_event(e) for e in evs]
            for e in evs:
                if e.student_id != sid:
                    raise DataFormatError(f"event of {e.student_id!r} filed under {sid!r}")
            out[str(sid)] = sorted(evs, key=lambda e: e.timestamp)
        rows = out
    else:
        rows = {}
        for e in X:
            e = _as_event(e)
            rows.setdefault(e.student_id, []).append(e)
        rows = {sid: sorted(evs, key=lambda e: e.timestamp) for sid, evs in rows.items()}
    if not rows or not any(rows.values()):
        raise DataFormatError("no events given")
    return rows


def _as_event(e) -> InteractionEvent:
    if isinstance(e, InteractionEvent):
        return e
    if isinstance(e, Mapping):
        return parse_event(dict(e))
    raise DataFormatError(f"cannot interpret {type(e).__name__} as an interaction event")


def check_is_fitted(estimator, attribute: str = "trainer_") -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(f"{type(estimator).__name__} is not fitted yet; call fit first")
