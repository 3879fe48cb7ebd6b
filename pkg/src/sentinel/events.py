"""The run event log: newline-delimited JSON records.

Lifecycle rows carry exactly ``timestamp_ms, container_id, event, detail``.
Other record kinds (probe outcomes, signals, fault injections, per-second
load metrics, run metadata, monitor health) are tagged with a ``record``
field so one file can serve as the single source of truth for every
measurement a run produces.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from .errors import ReplayError

__all__ = [
    "LifecycleEventType",
    "LifecycleEvent",
    "EventLog",
    "read_events",
    "lifecycle_events",
]


class LifecycleEventType(str, Enum):
    SPAWNED = "spawned"
    STARTED = "started"
    READY = "ready"
    UNREADY = "unready"
    UNHEALTHY = "unhealthy"
    RESTART_QUEUED = "restart_queued"
    BACKOFF_STARTED = "backoff_started"
    SIGTERM_SENT = "sigterm_sent"
    SIGKILL_SENT = "sigkill_sent"
    EXITED = "exited"
    RESTARTED = "restarted"


@dataclass(frozen=True)
class LifecycleEvent:
    timestamp_ms: int
    container_id: str
    event: LifecycleEventType
    detail: str = ""

    def to_record(self) -> Dict[str, Any]:
        return {
            "timestamp_ms": self.timestamp_ms,
            "container_id": self.container_id,
            "event": self.event.value,
            "detail": self.detail,
        }

    @staticmethod
    def from_record(record: Dict[str, Any]) -> "LifecycleEvent":
        return LifecycleEvent(
            timestamp_ms=int(record["timestamp_ms"]),
            container_id=str(record["container_id"]),
            event=LifecycleEventType(record["event"]),
            detail=str(record.get("detail", "")),
        )


class EventLog:
    """Thread-safe append-only ndjson writer."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._stream = open(self.path, "a", encoding="utf-8")

    def append(self, record: Dict[str, Any]) -> None:
        line = json.dumps(record, separators=(",", ":"), sort_keys=True)
        with self._lock:
            if self._stream.closed:
                return
            self._stream.write(line + "\n")
            self._stream.flush()

    def lifecycle(self, event: LifecycleEvent) -> None:
        self.append(event.to_record())

    def close(self) -> None:
        with self._lock:
            if not self._stream.closed:
                self._stream.close()


def read_events(path: str | Path) -> List[Dict[str, Any]]:
    """Parse an ndjson event log; malformed lines raise ReplayError."""
    path = Path(path)
    if not path.exists():
        raise ReplayError(f"event log {path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as stream:
        for lineno, line in enumerate(stream, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ReplayError(f"{path}:{lineno}: bad record: {exc}") from exc
    if not records:
        raise ReplayError(f"event log {path} is empty")
    return records


def lifecycle_events(
    records: List[Dict[str, Any]], container_id: Optional[str] = None
) -> Iterator[LifecycleEvent]:
    """Lifecycle rows (untagged records) in file order, optionally filtered."""
    for record in records:
        if "record" in record or "event" not in record:
            continue
        event = LifecycleEvent.from_record(record)
        if container_id is None or event.container_id == container_id:
            yield event
