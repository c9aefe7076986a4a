"""Human quality auditing of sampled boxes.

A session draws a uniform random sample of box ids (without
replacement, seeded), presents them in sample order, and accumulates
one of four judgments per box: high-quality annotation, low-quality
annotation (partial body), multiple persons in one box, or not a person
at all. Relabeling overwrites (last write wins). The report gives each
class as a percentage of the boxes labeled so far, rounded to one
decimal half away from zero, plus the person rate (the first three
classes combined).

Sessions persist as single JSON files written atomically
(write-temp-then-rename), so a crash never loses acknowledged labels.
"""

from __future__ import annotations

import enum
import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_SAMPLE_SIZE = 1000


class SampleTooLarge(ValueError):
    """Requested more boxes than the dataset holds."""


class UnknownBox(KeyError):
    """A label was submitted for a box outside the session sample."""

    def __init__(self, box_id: str):
        super().__init__(box_id)
        self.box_id = box_id

    def __str__(self) -> str:
        return f"box {self.box_id!r} is not in this session's sample"


class EmptySession(ValueError):
    """A report was requested before any label was recorded."""


class AuditClass(enum.Enum):
    """The four audit judgments; the first three all contain a person."""

    HIGH_QUALITY = "high_quality"
    LOW_QUALITY = "low_quality"
    MULTIPLE_PERSONS = "multiple_persons"
    NOT_A_PERSON = "not_a_person"


PERSON_CLASSES = (AuditClass.HIGH_QUALITY, AuditClass.LOW_QUALITY, AuditClass.MULTIPLE_PERSONS)


@dataclass
class AuditSession:
    """One annotator's pass over a sampled set of boxes."""

    session_id: str
    sample: list[str]
    labels: dict[str, AuditClass] = field(default_factory=dict)
    seed: int = 0
    created_at: float = 0.0

    def next_unlabeled(self) -> Optional[str]:
        for box_id in self.sample:
            if box_id not in self.labels:
                return box_id
        return None

    @property
    def remaining(self) -> int:
        return len(self.sample) - len(self.labels)

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "sample": self.sample,
            "labels": {k: v.value for k, v in self.labels.items()},
            "seed": self.seed,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AuditSession":
        return cls(
            session_id=str(obj["session_id"]),
            sample=[str(b) for b in obj["sample"]],
            labels={str(k): AuditClass(v) for k, v in obj.get("labels", {}).items()},
            seed=int(obj.get("seed", 0)),
            created_at=float(obj.get("created_at", 0.0)),
        )


def sample_boxes(
    box_ids: Sequence[str],
    n: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
    session_id: Optional[str] = None,
) -> AuditSession:
    """Draw a uniform sample without replacement; order is presentation order.

    Deterministic for a fixed seed. Raises SampleTooLarge when n exceeds
    the dataset size.
    """
    if n > len(box_ids):
        raise SampleTooLarge(f"requested {n} boxes from a dataset of {len(box_ids)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(box_ids), size=n, replace=False)
    return AuditSession(
        session_id=session_id or uuid.uuid4().hex,
        sample=[box_ids[int(i)] for i in picked],
        seed=seed,
        created_at=time.time(),
    )


def record_label(session: AuditSession, box_id: str, cls: AuditClass) -> None:
    """Set (or overwrite) the label for a sampled box."""
    if box_id not in session.sample:
        raise UnknownBox(box_id)
    session.labels[box_id] = cls


def _percent_1dp(count: int, total: int) -> float:
    # exact round-half-away-from-zero at one decimal, via integers
    q, r = divmod(1000 * count, total)
    if 2 * r >= total:
        q += 1
    return q / 10.0


@dataclass
class AuditReport:
    """Class percentages over the labeled boxes, plus the person rate."""

    counts: dict[AuditClass, int]
    percentages: dict[AuditClass, float]
    person_rate: float
    n_labeled: int

    def to_json(self) -> dict:
        return {
            "counts": {c.value: self.counts[c] for c in AuditClass},
            "percentages": {c.value: self.percentages[c] for c in AuditClass},
            "person_rate": self.person_rate,
            "n_labeled": self.n_labeled,
        }


def audit_report(session: AuditSession) -> AuditReport:
    """Percentages per class over labeled boxes; unlabeled boxes don't count.

    Raises EmptySession when nothing has been labeled yet.
    """
    total = len(session.labels)
    if total == 0:
        raise EmptySession(f"session {session.session_id} has no labels")
    counts = {c: 0 for c in AuditClass}
    for cls in session.labels.values():
        counts[cls] += 1
    person_count = sum(counts[c] for c in PERSON_CLASSES)
    return AuditReport(
        counts=counts,
        percentages={c: _percent_1dp(counts[c], total) for c in AuditClass},
        person_rate=_percent_1dp(person_count, total),
        n_labeled=total,
    )


class SessionStore:
    """Directory of session files with atomic, serialized writes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.json"

    def save(self, session: AuditSession) -> None:
        save_session(session, self.path_for(session.session_id))

    def load(self, session_id: str) -> AuditSession:
        return load_session(self.path_for(session_id))

    def exists(self, session_id: str) -> bool:
        return self.path_for(session_id).exists()


def save_session(session: AuditSession, path: str | Path) -> None:
    """Write a session file atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(session.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_session(path: str | Path) -> AuditSession:
    with open(path, encoding="utf-8") as fh:
        return AuditSession.from_json(json.load(fh))
