"""Signal-based container monitoring.

Two transports feed readiness/failure signals from containers into the
supervisor: a per-generation log watcher matching literal substrings, and a
local UNIX stream socket speaking newline-delimited frames

    v1 <container_id> <READY|UNHEALTHY|HEARTBEAT> <unix_millis>\\n

Both emit :class:`Signal` values into a sink in arrival order. ``dispatch``
folds a signal into a container status; ``watchdog_check`` turns a stale
heartbeat into a failure.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import re
import socket
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Tuple

from .errors import ConfigError
from .state import Action, ContainerStatus, Phase
from .util import wall_ms

logger = logging.getLogger(__name__)

CONTAINER_ID_RE = re.compile(r"^[A-Za-z0-9._-]{1,64}$")

FRAME_VERSION = "v1"

DEFAULT_LOG_POLL_GAP_S = 0.02
# Lag between a container (re)start and the log watcher attaching; models a
# monitor that discovers restarts by polling its orchestrator.
DEFAULT_LOG_MONITOR_START_DELAY_S = 2.8


class SignalEvent(str, Enum):
    READY = "READY"
    UNHEALTHY = "UNHEALTHY"
    HEARTBEAT = "HEARTBEAT"


class Transport(str, Enum):
    LOG_TAIL = "log_tail"
    SOCKET = "socket"


@dataclass(frozen=True)
class Signal:
    container_id: str
    event: SignalEvent
    emitted_at_ms: int
    received_at_ms: int
    transport: Transport

    @property
    def latency_s(self) -> float:
        return max(0, self.received_at_ms - self.emitted_at_ms) / 1000.0


@dataclass(frozen=True)
class SignalMonitorConfig:
    """Patterns, transport, and timing knobs for one monitored container."""

    ready_pattern: str
    unhealthy_pattern: str
    transport: Transport = Transport.SOCKET
    heartbeat_deadline: Optional[float] = None
    log_poll_gap: float = DEFAULT_LOG_POLL_GAP_S
    monitor_start_delay: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.ready_pattern or not self.unhealthy_pattern:
            raise ConfigError("signal patterns must be non-empty")
        if self.ready_pattern == self.unhealthy_pattern:
            raise ConfigError("ready and unhealthy patterns must be distinct")
        if self.heartbeat_deadline is not None and self.heartbeat_deadline <= 0:
            raise ConfigError("heartbeat_deadline must be positive when set")
        if self.log_poll_gap <= 0:
            raise ConfigError("log_poll_gap must be positive")
        if self.monitor_start_delay is None:
            delay = (
                DEFAULT_LOG_MONITOR_START_DELAY_S
                if self.transport == Transport.LOG_TAIL
                else 0.0
            )
            object.__setattr__(self, "monitor_start_delay", delay)
        elif self.monitor_start_delay < 0:
            raise ConfigError("monitor_start_delay must be >= 0")


def format_frame(container_id: str, event: SignalEvent, emitted_at_ms: int) -> str:
    return f"{FRAME_VERSION} {container_id} {event.value} {emitted_at_ms}\n"


def parse_frame(line: str) -> Tuple[str, SignalEvent, int]:
    """Parse one socket frame; raises ValueError on any grammar violation."""
    parts = line.strip().split(" ")
    if len(parts) != 4:
        raise ValueError(f"frame must have 4 fields, got {len(parts)}")
    version, container_id, event_name, millis = parts
    if version != FRAME_VERSION:
        raise ValueError(f"unsupported frame version {version!r}")
    if not CONTAINER_ID_RE.match(container_id):
        raise ValueError(f"bad container id {container_id!r}")
    try:
        event = SignalEvent(event_name)
    except ValueError:
        raise ValueError(f"unknown event {event_name!r}") from None
    if not millis.isdigit():
        raise ValueError(f"bad timestamp {millis!r}")
    return container_id, event, int(millis)


def _emitted_stamp(line: str, received_at_ms: int) -> int:
    """Millisecond stamp from a log line's leading epoch token, if present."""
    head = line.split(" ", 1)[0]
    if head.isdigit() and 12 <= len(head) <= 14:
        return int(head)
    return received_at_ms


class LogWatcher:
    """Tail one container log generation and turn matching lines into signals.

    Attaches ``monitor_start_delay`` after creation, then scans the file from
    the beginning, so lines written before the watcher attached are still
    seen. A restart rotates to a new generation file and a fresh watcher;
    nothing from the old generation is replayed. Loss of the log stream is
    reported through ``degraded`` and never synthesizes an UNHEALTHY signal.
    """

    def __init__(
        self,
        container_id: str,
        log_path: str | Path,
        config: SignalMonitorConfig,
        sink: Callable[[Signal], None],
        degraded: Optional[Callable[[str, str], None]] = None,
    ) -> None:
        self.container_id = container_id
        self._path = Path(log_path)
        self._config = config
        self._sink = sink
        self._degraded = degraded
        self._cancel = threading.Event()
        self._thread = threading.Thread(
            target=self._run, name=f"logwatch-{container_id}", daemon=True
        )

    def start(self) -> None:
        self._thread.start()

    def cancel(self) -> None:
        self._cancel.set()

    def join(self, timeout: float = 5.0) -> None:
        self._thread.join(timeout)

    def _report_degraded(self, reason: str) -> None:
        logger.warning("log watcher for %s degraded: %s", self.container_id, reason)
        if self._degraded is not None:
            self._degraded(self.container_id, reason)

    def _run(self) -> None:
        if self._cancel.wait(self._config.monitor_start_delay or 0.0):
            return
        poll = self._config.log_poll_gap
        while not self._path.exists():
            if self._cancel.wait(poll):
                return
        try:
            stream = open(self._path, "r", encoding="utf-8", errors="replace")
        except OSError as exc:
            self._report_degraded(f"cannot open log: {exc}")
            return
        with stream:
            buffer = ""
            while not self._cancel.is_set():
                try:
                    chunk = stream.readline()
                except OSError as exc:
                    self._report_degraded(f"log read failed: {exc}")
                    return
                if not chunk:
                    if self._cancel.wait(poll):
                        return
                    continue
                buffer += chunk
                if not buffer.endswith("\n"):
                    continue  # partial line, wait for the rest
                line, buffer = buffer, ""
                self._match_line(line.rstrip("\n"))

    def _match_line(self, line: str) -> None:
        # a line carrying both patterns counts as UNHEALTHY
        if self._config.unhealthy_pattern in line:
            event = SignalEvent.UNHEALTHY
        elif self._config.ready_pattern in line:
            event = SignalEvent.READY
        else:
            return
        received = wall_ms()
        self._sink(
            Signal(
                container_id=self.container_id,
                event=event,
                emitted_at_ms=_emitted_stamp(line, received),
                received_at_ms=received,
                transport=Transport.LOG_TAIL,
            )
        )


class SocketListener:
    """Accept loop for the local signal socket; parses frames into signals.

    Malformed frames are dropped and counted; the connection stays open.
    """

    def __init__(self, socket_path: str | Path, sink: Callable[[Signal], None]) -> None:
        self._path = str(socket_path)
        self._sink = sink
        self._cancel = threading.Event()
        self._lock = threading.Lock()
        self._parse_errors = 0
        if os.path.exists(self._path):
            os.unlink(self._path)
        self._server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._server.bind(self._path)
        self._server.listen(16)
        self._server.settimeout(0.2)
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="signal-socket-accept", daemon=True
        )

    @property
    def socket_path(self) -> str:
        return self._path

    @property
    def parse_errors(self) -> int:
        with self._lock:
            return self._parse_errors

    def start(self) -> None:
        self._accept_thread.start()

    def close(self) -> None:
        self._cancel.set()
        self._accept_thread.join(2.0)
        self._server.close()
        if os.path.exists(self._path):
            os.unlink(self._path)

    def _accept_loop(self) -> None:
        while not self._cancel.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(
                target=self._read_loop, args=(conn,), name="signal-socket-conn", daemon=True
            ).start()

    def _read_loop(self, conn: socket.socket) -> None:
        conn.settimeout(0.2)
        buffer = b""
        with conn:
            while not self._cancel.is_set():
                try:
                    chunk = conn.recv(4096)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not chunk:
                    return
                buffer += chunk
                while b"\n" in buffer:
                    raw, buffer = buffer.split(b"\n", 1)
                    self._handle_frame(raw)

    def _handle_frame(self, raw: bytes) -> None:
        received = wall_ms()
        try:
            container_id, event, emitted = parse_frame(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            with self._lock:
                self._parse_errors += 1
            logger.warning("dropped malformed signal frame %r: %s", raw[:80], exc)
            return
        self._sink(
            Signal(
                container_id=container_id,
                event=event,
                emitted_at_ms=emitted,
                received_at_ms=received,
                transport=Transport.SOCKET,
            )
        )


def send_frame(socket_path: str | Path, container_id: str, event: SignalEvent) -> None:
    """One-shot client used by processes emitting signals."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as client:
        client.settimeout(1.0)
        client.connect(str(socket_path))
        client.sendall(format_frame(container_id, event, wall_ms()).encode("utf-8"))


def dispatch(signal: Signal, status: ContainerStatus) -> Tuple[ContainerStatus, Action]:
    """Fold one signal into the container status.

    READY on a container that is not yet ready marks it ready (and started:
    a readiness signal implies startup completed). UNHEALTHY on a healthy
    container queues a restart. Duplicates and signals while a restart is
    pending resolve to no action. HEARTBEAT never changes status here; the
    caller refreshes its watchdog deadline.
    """
    if signal.event == SignalEvent.HEARTBEAT:
        return status, Action.NONE
    if status.restart_pending or status.phase == Phase.EXITED:
        return status, Action.NONE
    if signal.event == SignalEvent.READY:
        if status.ready:
            return status, Action.NONE
        status = dataclasses.replace(status, started=True, ready=True, phase=Phase.RUNNING)
        return status, Action.MARK_READY
    if status.healthy:
        status = dataclasses.replace(
            status, healthy=False, ready=False, phase=Phase.RESTART_QUEUED
        )
        return status, Action.MARK_UNHEALTHY
    return status, Action.NONE


def watchdog_check(
    last_heartbeat_ms: Optional[int], deadline_s: Optional[float], now_ms: int
) -> Action:
    """Fail the container iff the heartbeat gap exceeded the deadline."""
    if deadline_s is None or last_heartbeat_ms is None:
        return Action.NONE
    if now_ms - last_heartbeat_ms > deadline_s * 1000:
        return Action.MARK_UNHEALTHY
    return Action.NONE
