"""Line-delimited transcript log: one JSON record per utterance.

The log is the single source of truth for replay, statistics, and the
memory round-trip checks, so record ordering is exactly emission order and
serialization is byte-stable for a given run.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

logger = logging.getLogger(__name__)

KINDS = ("instruction", "response", "clarification_request", "clarification_answer")
SPEAKERS = ("instructor", "assistant")

_FIELDS = (
    "run_id", "phase", "subtask", "round", "speaker", "role", "kind",
    "content", "prompt_tokens", "completion_tokens", "timestamp",
)


@dataclass(frozen=True)
class TranscriptRecord:
    run_id: str
    phase: str
    subtask: str
    round: int
    speaker: str
    role: str
    kind: str
    content: str
    prompt_tokens: int
    completion_tokens: int
    timestamp: float

    def to_line(self) -> str:
        payload = {name: getattr(self, name) for name in _FIELDS}
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def parse_line(line: str) -> TranscriptRecord:
    data = json.loads(line)
    return TranscriptRecord(**{name: data[name] for name in _FIELDS})


def read_transcript(path: str | Path, strict: bool = False) -> list[TranscriptRecord]:
    """Read a transcript log, skipping corrupt lines with a warning."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(parse_line(line))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            if strict:
                raise
            logger.warning("skipping corrupt transcript record at line %d: %s", lineno, exc)
    return records


class WallClock:
    """Real time; used for live backends."""

    def now(self) -> float:
        return time.time()


class LogicalClock:
    """Deterministic clock for scripted runs: identical inputs must yield
    byte-identical transcripts, so timestamps advance by a fixed step."""

    def __init__(self, start: float = 0.0, step: float = 1.0):
        self._now = start
        self._step = step

    def now(self) -> float:
        value = self._now
        self._now += self._step
        return value


class TranscriptWriter:
    """Appends records to an optional log file and keeps them in memory."""

    def __init__(self, run_id: str, path: Path | None = None, clock=None):
        self.run_id = run_id
        self.path = Path(path) if path is not None else None
        self.clock = clock or WallClock()
        self.records: list[TranscriptRecord] = []
        self._handle: IO[str] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("a", encoding="utf-8")

    def emit(self, phase: str, subtask: str, round_index: int, role: str, utterance) -> TranscriptRecord:
        record = TranscriptRecord(
            run_id=self.run_id,
            phase=phase,
            subtask=subtask,
            round=round_index,
            speaker=utterance.speaker,
            role=role,
            kind=utterance.kind,
            content=utterance.content,
            prompt_tokens=utterance.prompt_tokens,
            completion_tokens=utterance.completion_tokens,
            timestamp=round(self.clock.now(), 3),
        )
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(record.to_line() + "\n")
            self._handle.flush()
        return record

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def filter_records(
    records: Iterable[TranscriptRecord],
    phase: str | None = None,
    speaker: str | None = None,
    kind: str | None = None,
) -> Iterator[TranscriptRecord]:
    for record in records:
        if phase is not None and record.phase != phase:
            continue
        if speaker is not None and record.speaker != speaker:
            continue
        if kind is not None and record.kind != kind:
            continue
        yield record
