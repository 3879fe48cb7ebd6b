"""Poll-based probe executor.

Schedules startup/readiness/liveness probes at fixed intervals anchored to
the scheduled slot (a slow probe does not drift the cadence), runs the HTTP,
TCP, or command check with its timeout, and hands each outcome record to a
sink. Readiness and liveness probing is held back until the container counts
as started; startup probing stops once it is.
"""

from __future__ import annotations

import http.client
import logging
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Optional, Sequence, Tuple

from .errors import ConfigError
from .state import (
    ContainerStatus,
    MonitoringPolicy,
    ProbeConfig,
    ProbeKind,
    ProbeOutcome,
    first_probe_due,
    validate_probe_set,
)
from .util import mono, sleep_until, wall_ms

logger = logging.getLogger(__name__)

# HTTP statuses counted as probe success; configurable half-open range.
HTTP_SUCCESS_RANGE: Tuple[int, int] = (200, 400)

_GATE_POLL_S = 0.02


class FailureReason(str, Enum):
    TIMEOUT = "timeout"
    CONNECTION_REFUSED = "connection_refused"
    BAD_STATUS = "bad_status"
    COMMAND_NONZERO = "command_nonzero"


@dataclass(frozen=True)
class ProbeOutcomeRecord:
    """One executed probe: slot time, wire times, and classified outcome."""

    container_id: str
    kind: ProbeKind
    scheduled_at_ms: int
    sent_at_ms: int
    completed_at_ms: int
    outcome: ProbeOutcome
    failure_reason: Optional[FailureReason] = None

    @property
    def latency_s(self) -> float:
        return (self.completed_at_ms - self.sent_at_ms) / 1000.0


def execute_http_probe(
    host: str,
    port: int,
    path: str,
    timeout: float,
    success_range: Tuple[int, int] = HTTP_SUCCESS_RANGE,
) -> Tuple[ProbeOutcome, Optional[FailureReason]]:
    """GET the path; success iff a response status inside the range arrives in time."""
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("GET", path)
        response = conn.getresponse()
        response.read()
        if success_range[0] <= response.status < success_range[1]:
            return ProbeOutcome.SUCCESS, None
        return ProbeOutcome.FAILURE, FailureReason.BAD_STATUS
    except socket.timeout:
        return ProbeOutcome.FAILURE, FailureReason.TIMEOUT
    except (ConnectionRefusedError, ConnectionResetError, BrokenPipeError, OSError):
        return ProbeOutcome.FAILURE, FailureReason.CONNECTION_REFUSED
    except http.client.HTTPException:
        return ProbeOutcome.FAILURE, FailureReason.CONNECTION_REFUSED
    finally:
        conn.close()


def execute_tcp_probe(
    host: str, port: int, timeout: float
) -> Tuple[ProbeOutcome, Optional[FailureReason]]:
    """Success iff a TCP connection is established within the timeout."""
    try:
        with socket.create_connection((host, port), timeout=timeout):
            return ProbeOutcome.SUCCESS, None
    except socket.timeout:
        return ProbeOutcome.FAILURE, FailureReason.TIMEOUT
    except OSError:
        return ProbeOutcome.FAILURE, FailureReason.CONNECTION_REFUSED


def execute_command_probe(
    command: Sequence[str] | str, timeout: float
) -> Tuple[ProbeOutcome, Optional[FailureReason]]:
    """Success iff the command exits 0 within the timeout; overruns are killed."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    try:
        completed = subprocess.run(
            argv,
            timeout=timeout,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
    except subprocess.TimeoutExpired:
        return ProbeOutcome.FAILURE, FailureReason.TIMEOUT
    except OSError:
        return ProbeOutcome.FAILURE, FailureReason.COMMAND_NONZERO
    if completed.returncode == 0:
        return ProbeOutcome.SUCCESS, None
    return ProbeOutcome.FAILURE, FailureReason.COMMAND_NONZERO


def _execute(config: ProbeConfig, host: str, port: int) -> Tuple[ProbeOutcome, Optional[FailureReason]]:
    if config.method.value == "http_get":
        return execute_http_probe(host, port, config.target, config.timeout)
    if config.method.value == "tcp_connect":
        return execute_tcp_probe(host, port, config.timeout)
    return execute_command_probe(config.target, config.timeout)


class ProbeSchedule:
    """Cancellable probe loops for one container generation."""

    def __init__(
        self,
        container_id: str,
        host: str,
        port: int,
        configs: Sequence[ProbeConfig],
        policy: MonitoringPolicy,
        container_start_ms: int,
        sink: Callable[[ProbeOutcomeRecord], None],
        status_view: Callable[[], ContainerStatus],
    ) -> None:
        validate_probe_set(tuple(configs), policy)
        self.container_id = container_id
        self._host = host
        self._port = port
        self._policy = policy
        self._container_start_ms = container_start_ms
        self._sink = sink
        self._status_view = status_view
        self._cancel = threading.Event()
        # one monotonic/wall anchor pair so slot stamps are drift-free
        self._wall0 = wall_ms()
        self._mono0 = mono()
        self._threads = [
            threading.Thread(
                target=self._run_one, args=(config,), name=f"probe-{container_id}-{config.kind.value}",
                daemon=True,
            )
            for config in configs
        ]

    def start(self) -> None:
        for thread in self._threads:
            thread.start()

    def cancel(self) -> None:
        self._cancel.set()

    def join(self, timeout: float = 5.0) -> None:
        for thread in self._threads:
            thread.join(timeout)

    @property
    def cancelled(self) -> bool:
        return self._cancel.is_set()

    def _wall_to_mono(self, at_ms: int) -> float:
        return self._mono0 + (at_ms - self._wall0) / 1000.0

    def _mono_to_wall(self, at_mono: float) -> int:
        return self._wall0 + int(round((at_mono - self._mono0) * 1000))

    def _wait_for_started(self) -> bool:
        while not self._status_view().started:
            if self._cancel.wait(_GATE_POLL_S):
                return False
        return True

    def _run_one(self, config: ProbeConfig) -> None:
        if config.kind in (ProbeKind.READINESS, ProbeKind.LIVENESS):
            if not self._wait_for_started():
                return
        due_mono = self._wall_to_mono(
            first_probe_due(config, self._policy, self._container_start_ms)
        )
        # probing never begins before the gate clears; re-anchor if it already passed
        due_mono = max(due_mono, mono())
        interval = config.interval
        while not self._cancel.is_set():
            if config.kind == ProbeKind.STARTUP and self._status_view().started:
                return
            if not sleep_until(due_mono, self._cancel):
                return
            scheduled_at = self._mono_to_wall(due_mono)
            sent_at = wall_ms()
            outcome, reason = _execute(config, self._host, self._port)
            completed_at = wall_ms()
            if self._cancel.is_set():
                return
            self._sink(
                ProbeOutcomeRecord(
                    container_id=self.container_id,
                    kind=config.kind,
                    scheduled_at_ms=scheduled_at,
                    sent_at_ms=sent_at,
                    completed_at_ms=completed_at,
                    outcome=outcome,
                    failure_reason=reason,
                )
            )
            due_mono += interval
            # a pending probe can only overrun its slot if timeout >= interval
            # was forced past validation; skip the missed slots and log
            skipped = 0
            while due_mono <= mono():
                due_mono += interval
                skipped += 1
            if skipped:
                logger.warning(
                    "probe %s/%s overran %d slot(s)", self.container_id, config.kind.value, skipped
                )


class ProbeEngine:
    """Registry of active schedules; rejects duplicates per container."""

    def __init__(self) -> None:
        self._schedules: Dict[str, ProbeSchedule] = {}
        self._lock = threading.Lock()

    def schedule(
        self,
        container_id: str,
        host: str,
        port: int,
        configs: Sequence[ProbeConfig],
        policy: MonitoringPolicy,
        container_start_ms: int,
        sink: Callable[[ProbeOutcomeRecord], None],
        status_view: Callable[[], ContainerStatus],
    ) -> ProbeSchedule:
        with self._lock:
            existing = self._schedules.get(container_id)
            if existing is not None and not existing.cancelled:
                raise ConfigError(f"container {container_id} already has a probe schedule")
            handle = ProbeSchedule(
                container_id, host, port, configs, policy, container_start_ms, sink, status_view
            )
            self._schedules[container_id] = handle
        handle.start()
        return handle

    def cancel(self, container_id: str) -> None:
        with self._lock:
            handle = self._schedules.pop(container_id, None)
        if handle is not None:
            handle.cancel()

    def cancel_all(self) -> None:
        with self._lock:
            handles = list(self._schedules.values())
            self._schedules.clear()
        for handle in handles:
            handle.cancel()
