"""Deterministic scheduled fault injection.

A :class:`FaultPlan` is a sorted list of offsets from run start, each firing
one fault against a target container's admin endpoint: handler kill (exit or
hang variant, decided by the target's pid mode), response-latency injection,
or dependency outage toggles. Each injection is logged to the run event log;
an unreachable target is logged as a no-op rather than an error.
"""

from __future__ import annotations

import http.client
import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Tuple

from .errors import ConfigError
from .util import mono, sleep_until, wall_ms

logger = logging.getLogger(__name__)


class FaultKind(str, Enum):
    KILL_HANDLER = "kill_handler"
    LATENCY = "latency"
    DEPENDENCY_DOWN = "dependency_down"
    DEPENDENCY_UP = "dependency_up"


_ADMIN_PAYLOADS = {
    FaultKind.KILL_HANDLER: lambda entry: {"kind": "kill_handler"},
    FaultKind.LATENCY: lambda entry: {"kind": "latency", "latency_ms": entry.latency_ms},
    FaultKind.DEPENDENCY_DOWN: lambda entry: {"kind": "down"},
    FaultKind.DEPENDENCY_UP: lambda entry: {"kind": "up"},
}


@dataclass(frozen=True)
class FaultEntry:
    at: float  # seconds from run (measurement) start
    kind: FaultKind
    target: str  # container id or dependency service name
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.at < 0:
            raise ConfigError("fault offsets must be >= 0")
        if self.kind == FaultKind.LATENCY and self.latency_ms < 0:
            raise ConfigError("latency_ms must be >= 0")


@dataclass(frozen=True)
class FaultPlan:
    entries: Tuple[FaultEntry, ...] = ()

    def __post_init__(self) -> None:
        offsets = [entry.at for entry in self.entries]
        if offsets != sorted(offsets):
            raise ConfigError("fault entries must be sorted by offset")

    def validate_targets(self, known_targets: Sequence[str]) -> None:
        known = set(known_targets)
        for entry in self.entries:
            if entry.target not in known:
                raise ConfigError(f"fault target {entry.target!r} does not exist")

    @property
    def kill_offsets(self) -> Tuple[float, ...]:
        return tuple(e.at for e in self.entries if e.kind == FaultKind.KILL_HANDLER)


def inject_fault(
    entry: FaultEntry, endpoint: Tuple[str, int], timeout: float = 1.0
) -> Tuple[bool, str]:
    """POST one fault to a target's admin hook; (ok, detail)."""
    host, port = endpoint
    body = json.dumps(_ADMIN_PAYLOADS[entry.kind](entry)).encode()
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request(
            "POST", "/admin/fault", body=body,
            headers={"Content-Length": str(len(body))},
        )
        response = conn.getresponse()
        response.read()
        if response.status == 200:
            return True, "injected"
        return False, f"admin status {response.status}"
    except OSError as exc:
        return False, f"target unreachable ({exc.__class__.__name__}); no-op"
    finally:
        conn.close()


class FaultInjector:
    """Runs a plan's entries at their offsets on a background thread."""

    def __init__(
        self,
        plan: FaultPlan,
        resolve: Callable[[str], Optional[Tuple[str, int]]],
        log: Callable[[Dict], None],
        offset_overrides: Optional[Dict[int, float]] = None,
    ) -> None:
        self._plan = plan
        self._resolve = resolve
        self._log = log
        self._overrides = offset_overrides or {}
        self._cancel = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.fired: list = []

    def start(self, run_start_mono: float) -> None:
        self._thread = threading.Thread(
            target=self._run, args=(run_start_mono,), name="fault-injector", daemon=True
        )
        self._thread.start()

    def cancel(self) -> None:
        self._cancel.set()

    def join(self, timeout: float = 5.0) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def effective_offset(self, index: int) -> float:
        entry = self._plan.entries[index]
        return self._overrides.get(index, entry.at)

    def _run(self, run_start_mono: float) -> None:
        agenda = sorted(
            range(len(self._plan.entries)), key=self.effective_offset
        )
        for index in agenda:
            entry = self._plan.entries[index]
            offset = self.effective_offset(index)
            if not sleep_until(run_start_mono + offset, self._cancel):
                return
            endpoint = self._resolve(entry.target)
            if endpoint is None:
                ok, detail = False, "target not running; no-op"
            else:
                ok, detail = inject_fault(entry, endpoint)
            stamp = wall_ms()
            realized = mono() - run_start_mono
            record = {
                "record": "injection",
                "timestamp_ms": stamp,
                "at_s": round(offset, 3),
                "realized_s": round(realized, 3),
                "kind": entry.kind.value,
                "target": entry.target,
                "ok": ok,
                "detail": detail,
            }
            self.fired.append(record)
            self._log(record)
            if not ok:
                logger.info("fault %s on %s was a no-op: %s", entry.kind.value, entry.target, detail)
