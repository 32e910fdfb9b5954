"""Durable study state: manifest, content-hashed assets, append-only ratings log.

The ratings log is newline-delimited JSON, flushed and fsynced before any
acknowledgement, so an acknowledged rating survives a crash. Later
submissions for the same (rater, trial, candidate, criterion) key
supersede earlier ones while the full audit history stays in the log;
``compact()`` folds the log into a snapshot file and truncates it.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from ..errors import OutOfRange, UnknownRater, UnknownTrial

PAYLOAD_VERSION = 1
CRITERIA = ("resolution_noise", "shape_structure")
N_CANDIDATES = 3
SCORE_MIN, SCORE_MAX = 1, 6

_LOG_NAME = "ratings.log"
_SNAPSHOT_NAME = "ratings.snapshot.json"
_MANIFEST_NAME = "manifest.json"
_ASSET_DIR = "assets"


@dataclass(frozen=True)
class RatingRecord:
    rater_id: str
    trial_id: str
    candidate_index: int
    criterion: str
    score: int
    timestamp: float

    def key(self) -> tuple[str, str, int, str]:
        return (self.rater_id, self.trial_id, self.candidate_index, self.criterion)

    def validate(self):
        if not SCORE_MIN <= self.score <= SCORE_MAX:
            raise OutOfRange(f"score {self.score} outside {SCORE_MIN}..{SCORE_MAX}")
        if self.criterion not in CRITERIA:
            raise OutOfRange(f"unknown criterion {self.criterion!r}")
        if not 0 <= self.candidate_index < N_CANDIDATES:
            raise OutOfRange(f"candidate index {self.candidate_index} outside 0..{N_CANDIDATES - 1}")


def content_token(blob: bytes) -> str:
    """Stable name for an asset derived only from its bytes."""
    return hashlib.sha256(blob).hexdigest()[:24]


class StudyStore:
    """Filesystem-backed study state under one directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / _MANIFEST_NAME
        if not manifest_path.exists():
            raise UnknownTrial(f"{self.root} is not a study directory")
        self.manifest = json.loads(manifest_path.read_text())
        self._append_lock = threading.Lock()

    # -- creation ---------------------------------------------------------

    @classmethod
    def initialize(cls, root: str | Path, manifest: dict, assets: dict[str, bytes]) -> "StudyStore":
        root = Path(root)
        (root / _ASSET_DIR).mkdir(parents=True, exist_ok=True)
        for name, blob in assets.items():
            (root / _ASSET_DIR / name).write_bytes(blob)
        tmp = root / (_MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2))
        tmp.replace(root / _MANIFEST_NAME)
        return cls(root)

    # -- manifest views ---------------------------------------------------

    @property
    def study_id(self) -> str:
        return self.manifest["study_id"]

    @property
    def raters(self) -> list[str]:
        return list(self.manifest["raters"])

    @property
    def trials(self) -> list[dict]:
        return self.manifest["trials"]

    def trial_by_id(self, trial_id: str) -> dict:
        for trial in self.trials:
            if trial["trial_id"] == trial_id:
                return trial
        raise UnknownTrial(f"no trial {trial_id!r} in study {self.study_id}")

    def require_rater(self, rater_id: str):
        if rater_id not in self.manifest["raters"]:
            raise UnknownRater(f"rater {rater_id!r} not enrolled in study {self.study_id}")

    def asset_path(self, name: str) -> Path:
        path = (self.root / _ASSET_DIR / name).resolve()
        if not path.is_relative_to((self.root / _ASSET_DIR).resolve()) or not path.exists():
            raise UnknownTrial(f"no asset {name!r}")
        return path

    # -- ratings log ------------------------------------------------------

    def append(self, record: RatingRecord):
        """Durably append one rating before acknowledging it."""
        record.validate()
        line = json.dumps(asdict(record)) + "\n"
        with self._append_lock:
            with (self.root / _LOG_NAME).open("a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def _iter_log_records(self):
        snapshot = self.root / _SNAPSHOT_NAME
        if snapshot.exists():
            for rec in json.loads(snapshot.read_text()):
                yield RatingRecord(**rec)
        log = self.root / _LOG_NAME
        if log.exists():
            for line in log.read_text().splitlines():
                if line.strip():
                    yield RatingRecord(**json.loads(line))

    def audit_records(self) -> list[RatingRecord]:
        """Every submission ever made, in arrival order."""
        return list(self._iter_log_records())

    def latest_records(self) -> dict[tuple, RatingRecord]:
        """Latest-wins view keyed by (rater, trial, candidate, criterion)."""
        latest: dict[tuple, RatingRecord] = {}
        for rec in self._iter_log_records():
            latest[rec.key()] = rec
        return latest

    def compact(self):
        """Fold the log into the snapshot; the audit history is preserved."""
        records = self.audit_records()
        tmp = self.root / (_SNAPSHOT_NAME + ".tmp")
        tmp.write_text(json.dumps([asdict(r) for r in records]))
        tmp.replace(self.root / _SNAPSHOT_NAME)
        log = self.root / _LOG_NAME
        if log.exists():
            log.unlink()

    # -- bookkeeping ------------------------------------------------------

    def expected_record_count(self) -> int:
        return len(self.raters) * len(self.trials) * N_CANDIDATES * len(CRITERIA)

    def completion_fraction(self) -> float:
        expected = self.expected_record_count()
        return len(self.latest_records()) / expected if expected else 0.0


def now_timestamp() -> float:
    return time.time()
