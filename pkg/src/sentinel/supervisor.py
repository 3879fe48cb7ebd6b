"""Process lifecycle manager.

Spawns mock-service containers, attaches poll- or signal-based monitoring,
applies mark_* actions, terminates with a grace period (polite stop, then
force kill), queues restarts with crash-loop backoff, and maintains the
per-service Ready set the load balancer routes over.

One event loop thread owns all status mutation. Probe outcomes, signals,
process exits, backoff expiries, and watchdog ticks arrive through a single
ordered queue; blocking process operations (wait, kill, relaunch) run on
worker threads and report back as events. The run's event log at
``<rundir>/events.ndjson`` records every lifecycle transition plus probe,
signal, and injection records, and is the source of truth for measurements.
"""

from __future__ import annotations

import dataclasses
import logging
import queue
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Optional, Sequence, Tuple

from .errors import ConfigError
from .events import EventLog, LifecycleEvent, LifecycleEventType
from .probes import ProbeEngine, ProbeOutcomeRecord
from .signals import (
    CONTAINER_ID_RE,
    LogWatcher,
    Signal,
    SignalEvent,
    SignalMonitorConfig,
    SocketListener,
    Transport,
    dispatch,
    watchdog_check,
)
from .state import (
    Action,
    ContainerStatus,
    MonitoringPolicy,
    Phase,
    PolicyVariant,
    ProbeConfig,
    ProbeKind,
    compute_backoff_delay,
    find_probe,
    initial_status,
    on_runtime_exit,
    record_probe_result,
    status_after_restart,
)
from .util import mono, wall_ms

logger = logging.getLogger(__name__)

# After a generation stays healthy this long, the crash-loop streak resets.
HEALTHY_STREAK_RESET_S = 600.0
MIN_GRACE_PERIOD_S = 2.0
_WATCHDOG_TICK_S = 0.2
_MAX_SOCKET_PATH = 100


class RunMode(str, Enum):
    HANDLER_AS_PID1 = "handler_as_pid1"
    HANDLER_UNDER_SHELL = "handler_under_shell"


@dataclass(frozen=True)
class ContainerSpec:
    """Definition of one supervised service instance."""

    container_id: str
    command: Tuple[str, ...]
    service: Optional[str] = None
    host: str = "127.0.0.1"
    port: Optional[int] = None
    run_mode: RunMode = RunMode.HANDLER_AS_PID1
    termination_grace_period: float = 30.0
    probes: Tuple[ProbeConfig, ...] = ()
    policy: MonitoringPolicy = MonitoringPolicy(PolicyVariant.DELAYED_PROBES)
    signal_config: Optional[SignalMonitorConfig] = None
    init_time: float = 0.0
    t0_flag: Optional[str] = None

    def __post_init__(self) -> None:
        if not CONTAINER_ID_RE.match(self.container_id):
            raise ConfigError(f"bad container id {self.container_id!r}")
        if self.termination_grace_period < MIN_GRACE_PERIOD_S:
            raise ConfigError(
                f"termination_grace_period must be >= {MIN_GRACE_PERIOD_S}s"
            )
        if (self.signal_config is not None) != (
            self.policy.variant == PolicyVariant.SIGNAL_BASED
        ):
            raise ConfigError(
                "signal_config must be present exactly when policy is signal_based"
            )
        if self.probes and self.port is None:
            raise ConfigError("probed containers need a port")

    @property
    def has_startup_probe(self) -> bool:
        return find_probe(self.probes, ProbeKind.STARTUP) is not None


@dataclass
class _Managed:
    spec: ContainerSpec
    status: ContainerStatus
    generation: int = 0
    generation_start_ms: int = 0
    process: Optional[subprocess.Popen] = None
    probe_handle: object = None
    log_watcher: Optional[LogWatcher] = None
    last_heartbeat_ms: Optional[int] = None
    backoff_streak: int = 0
    restart_in_flight: bool = False
    log_path: Optional[Path] = None
    timers: list = field(default_factory=list)


class Supervisor:
    """Owns containers, monitoring attachments, ready sets, and the event log."""

    def __init__(
        self,
        rundir: str | Path,
        healthy_streak_reset_s: float = HEALTHY_STREAK_RESET_S,
    ) -> None:
        self.rundir = Path(rundir)
        self.rundir.mkdir(parents=True, exist_ok=True)
        (self.rundir / "logs").mkdir(exist_ok=True)
        self.event_log = EventLog(self.rundir / "events.ndjson")
        self._healthy_streak_reset_s = healthy_streak_reset_s
        self._queue: "queue.Queue[tuple]" = queue.Queue()
        self._state_lock = threading.RLock()
        self._containers: Dict[str, _Managed] = {}
        self._ready: Dict[str, set] = {}
        self._services: set = set()
        self._probe_engine = ProbeEngine()
        self._socket_listener: Optional[SocketListener] = None
        self._socket_dir: Optional[str] = None
        self._shutting_down = False
        self._loop_thread = threading.Thread(target=self._loop, name="supervisor", daemon=True)
        self._watchdog_thread = threading.Thread(
            target=self._watchdog_loop, name="watchdog", daemon=True
        )
        self._started = False

    # ------------------------------------------------------------- lifecycle

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self._loop_thread.start()
        self._watchdog_thread.start()

    def stop(self) -> None:
        """Terminate all containers and stop the loop; idempotent."""
        with self._state_lock:
            if self._shutting_down:
                return
            self._shutting_down = True
            managed_list = list(self._containers.values())
        self._probe_engine.cancel_all()
        for managed in managed_list:
            if managed.log_watcher is not None:
                managed.log_watcher.cancel()
            for timer in managed.timers:
                timer.cancel()
        for managed in managed_list:
            proc = managed.process
            if proc is not None and proc.poll() is None:
                proc.terminate()
        for managed in managed_list:
            proc = managed.process
            if proc is not None:
                try:
                    proc.wait(timeout=1.0)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
        if self._started:
            self._queue.put(("stop",))
            self._loop_thread.join(timeout=5.0)
            self._watchdog_thread.join(timeout=2.0)
        if self._socket_listener is not None:
            self._socket_listener.close()
        self.event_log.close()

    # ------------------------------------------------------------ public API

    @property
    def signal_socket_path(self) -> str:
        return self._ensure_socket_listener().socket_path

    def spawn(self, spec: ContainerSpec) -> _Managed:
        """Launch a container per its spec and attach monitoring."""
        with self._state_lock:
            if spec.container_id in self._containers:
                raise ConfigError(f"container id {spec.container_id} already supervised")
            managed = _Managed(spec=spec, status=initial_status(spec.has_startup_probe))
            self._containers[spec.container_id] = managed
            if spec.service:
                self._services.add(spec.service)
                self._ready.setdefault(spec.service, set())
        if spec.signal_config and spec.signal_config.transport == Transport.SOCKET:
            self._ensure_socket_listener()
        self._launch(managed, generation=0)
        return managed

    def ready_set(self, service: str) -> FrozenSet[str]:
        with self._state_lock:
            if service not in self._services:
                raise ConfigError(f"service {service!r} is not registered")
            return frozenset(self._ready.get(service, ()))

    def endpoints(self, service: str) -> Dict[str, Tuple[str, int]]:
        """container id -> (host, port) for all containers of a service."""
        with self._state_lock:
            return {
                cid: (m.spec.host, m.spec.port)
                for cid, m in self._containers.items()
                if m.spec.service == service and m.spec.port is not None
            }

    def status_of(self, container_id: str) -> ContainerStatus:
        with self._state_lock:
            return self._containers[container_id].status

    def generation_start(self, container_id: str) -> int:
        """Wall ms when the container's current generation was launched."""
        with self._state_lock:
            return self._containers[container_id].generation_start_ms

    def apply_action(self, container_id: str, action: Action, timeout: float = 2.0) -> ContainerStatus:
        """Apply a mark_* action through the event loop; returns the new status."""
        done = threading.Event()
        self._queue.put(("apply", container_id, action, done))
        done.wait(timeout)
        return self.status_of(container_id)

    def submit_probe_record(self, record: ProbeOutcomeRecord) -> None:
        self._queue.put(("probe", record))

    def submit_signal(self, signal: Signal) -> None:
        self._queue.put(("signal", signal))

    def log_injection(self, record: dict) -> None:
        self.event_log.append(record)

    # ------------------------------------------------------------- internals

    def _ensure_socket_listener(self) -> SocketListener:
        with self._state_lock:
            if self._socket_listener is None:
                path = self.rundir / "signals.sock"
                if len(str(path)) > _MAX_SOCKET_PATH:
                    # AF_UNIX paths are limited to ~108 bytes; fall back to /tmp
                    self._socket_dir = tempfile.mkdtemp(prefix="sentinel-")
                    path = Path(self._socket_dir) / "signals.sock"
                self._socket_listener = SocketListener(path, self.submit_signal)
                self._socket_listener.start()
            return self._socket_listener

    def _emit(self, container_id: str, event: LifecycleEventType, detail: str = "") -> None:
        self.event_log.lifecycle(
            LifecycleEvent(wall_ms(), container_id, event, detail)
        )

    def _log_file(self, container_id: str, generation: int) -> Path:
        return self.rundir / "logs" / f"{container_id}.{generation}.log"

    def _launch(self, managed: _Managed, generation: int) -> None:
        """Start the process for a generation; used for spawn and restart."""
        spec = managed.spec
        t0 = wall_ms()
        command = list(spec.command)
        if spec.t0_flag:
            command += [spec.t0_flag, str(t0)]
        log_path = self._log_file(spec.container_id, generation)
        try:
            log_stream = open(log_path, "ab")
            process = subprocess.Popen(
                command, stdout=log_stream, stderr=subprocess.STDOUT
            )
            log_stream.close()
        except OSError as exc:
            self._emit(spec.container_id, LifecycleEventType.SPAWNED, f"generation {generation}")
            self._emit(spec.container_id, LifecycleEventType.EXITED, f"spawn failed: {exc}")
            self._queue.put(("spawn_failed", spec.container_id))
            return
        with self._state_lock:
            managed.process = process
            managed.generation = generation
            managed.generation_start_ms = t0
            managed.log_path = log_path
        self._emit(
            spec.container_id,
            LifecycleEventType.SPAWNED,
            f"generation {generation} pid {process.pid}",
        )
        threading.Thread(
            target=self._waiter,
            args=(spec.container_id, generation, process),
            name=f"wait-{spec.container_id}.{generation}",
            daemon=True,
        ).start()
        self._attach_monitoring(managed)

    def _waiter(self, container_id: str, generation: int, process: subprocess.Popen) -> None:
        returncode = process.wait()
        self._queue.put(("exit", container_id, generation, returncode))

    def _attach_monitoring(self, managed: _Managed) -> None:
        spec = managed.spec
        if spec.probes:
            def status_view(cid=spec.container_id) -> ContainerStatus:
                return self.status_of(cid)

            managed.probe_handle = self._probe_engine.schedule(
                spec.container_id,
                spec.host,
                spec.port,
                spec.probes,
                spec.policy,
                managed.generation_start_ms,
                self.submit_probe_record,
                status_view,
            )
        if spec.signal_config and spec.signal_config.transport == Transport.LOG_TAIL:
            watcher = LogWatcher(
                spec.container_id,
                managed.log_path,
                spec.signal_config,
                self.submit_signal,
                degraded=self._monitor_degraded,
            )
            managed.log_watcher = watcher
            watcher.start()

    def _detach_monitoring(self, managed: _Managed) -> None:
        self._probe_engine.cancel(managed.spec.container_id)
        managed.probe_handle = None
        if managed.log_watcher is not None:
            managed.log_watcher.cancel()
            managed.log_watcher = None

    def _monitor_degraded(self, container_id: str, reason: str) -> None:
        self.event_log.append(
            {
                "record": "monitor",
                "timestamp_ms": wall_ms(),
                "container_id": container_id,
                "detail": f"degraded: {reason}",
            }
        )

    # ------------------------------------------------------------- event loop

    def _loop(self) -> None:
        handlers = {
            "probe": self._handle_probe,
            "signal": self._handle_signal,
            "exit": self._handle_exit,
            "restart_due": self._handle_restart_due,
            "relaunched": self._handle_relaunched,
            "apply": self._handle_apply,
            "spawn_failed": self._handle_spawn_failed,
            "watchdog": self._handle_watchdog,
        }
        while True:
            item = self._queue.get()
            if item[0] == "stop":
                return
            try:
                handlers[item[0]](*item[1:])
            except Exception:
                logger.exception("event %r failed", item[0])

    def _watchdog_loop(self) -> None:
        while not self._shutting_down:
            threading.Event().wait(_WATCHDOG_TICK_S)
            if self._shutting_down:
                return
            self._queue.put(("watchdog",))

    def _get(self, container_id: str) -> Optional[_Managed]:
        with self._state_lock:
            return self._containers.get(container_id)

    def _set_status(self, managed: _Managed, status: ContainerStatus) -> ContainerStatus:
        with self._state_lock:
            previous = managed.status
            managed.status = status
        return previous

    def _apply_transition(
        self, managed: _Managed, new_status: ContainerStatus, action: Action
    ) -> None:
        previous = self._set_status(managed, new_status)
        cid = managed.spec.container_id
        if previous.ready and not new_status.ready:
            self._ready_remove(managed)
            self._emit(cid, LifecycleEventType.UNREADY)
        if action == Action.NONE:
            return
        if action == Action.MARK_STARTED:
            self._emit(cid, LifecycleEventType.STARTED)
        elif action == Action.MARK_READY:
            self._ready_add(managed)
            self._emit(cid, LifecycleEventType.READY)
        elif action == Action.MARK_UNREADY:
            pass  # unready emission handled by the flag-change rule above
        elif action == Action.MARK_UNHEALTHY:
            self._emit(cid, LifecycleEventType.UNHEALTHY)
            self._queue_restart(managed)

    def _ready_add(self, managed: _Managed) -> None:
        service = managed.spec.service
        if service:
            with self._state_lock:
                self._ready[service].add(managed.spec.container_id)

    def _ready_remove(self, managed: _Managed) -> None:
        service = managed.spec.service
        if service:
            with self._state_lock:
                self._ready[service].discard(managed.spec.container_id)

    def _handle_probe(self, record: ProbeOutcomeRecord) -> None:
        self.event_log.append(
            {
                "record": "probe",
                "timestamp_ms": record.completed_at_ms,
                "container_id": record.container_id,
                "kind": record.kind.value,
                "scheduled_at_ms": record.scheduled_at_ms,
                "sent_at_ms": record.sent_at_ms,
                "completed_at_ms": record.completed_at_ms,
                "outcome": record.outcome.value,
                "failure_reason": record.failure_reason.value if record.failure_reason else None,
            }
        )
        managed = self._get(record.container_id)
        if managed is None:
            return
        spec = managed.spec
        config = find_probe(spec.probes, record.kind)
        if config is None:
            logger.warning("probe record for unconfigured kind %s", record.kind)
            return
        try:
            new_status, action = record_probe_result(
                managed.status,
                record.kind,
                record.outcome,
                config,
                spec.policy,
                now_ms=record.completed_at_ms,
                container_start_ms=managed.generation_start_ms,
            )
        except ConfigError as exc:
            logger.debug("dropped stale probe record: %s", exc)
            return
        self._apply_transition(managed, new_status, action)

    def _handle_signal(self, signal: Signal) -> None:
        self.event_log.append(
            {
                "record": "signal",
                "timestamp_ms": signal.received_at_ms,
                "container_id": signal.container_id,
                "event": signal.event.value,
                "emitted_at_ms": signal.emitted_at_ms,
                "received_at_ms": signal.received_at_ms,
                "transport": signal.transport.value,
            }
        )
        managed = self._get(signal.container_id)
        if managed is None:
            logger.warning("signal for unknown container %s discarded", signal.container_id)
            return
        if signal.event == SignalEvent.HEARTBEAT:
            managed.last_heartbeat_ms = signal.received_at_ms
        new_status, action = dispatch(signal, managed.status)
        self._apply_transition(managed, new_status, action)

    def _handle_exit(self, container_id: str, generation: int, returncode: int) -> None:
        managed = self._get(container_id)
        if managed is None or managed.generation != generation:
            return  # stale exit from a replaced generation
        self._emit(container_id, LifecycleEventType.EXITED, f"rc={returncode}")
        if self._shutting_down:
            return
        new_status, action = on_runtime_exit(managed.status)
        self._apply_transition(managed, new_status, action)

    def _handle_spawn_failed(self, container_id: str) -> None:
        managed = self._get(container_id)
        if managed is None or self._shutting_down:
            return
        new_status = dataclasses.replace(
            managed.status, ready=False, healthy=False, phase=Phase.RESTART_QUEUED
        )
        self._apply_transition(managed, new_status, Action.MARK_UNHEALTHY)

    def _queue_restart(self, managed: _Managed) -> None:
        if managed.restart_in_flight or self._shutting_down:
            return
        managed.restart_in_flight = True
        cid = managed.spec.container_id
        now = wall_ms()
        # a generation that ran healthy long enough clears the crash-loop streak
        if (now - managed.generation_start_ms) / 1000.0 >= self._healthy_streak_reset_s:
            managed.backoff_streak = 0
        managed.backoff_streak += 1
        self._emit(cid, LifecycleEventType.RESTART_QUEUED, f"restart {managed.backoff_streak}")
        delay = compute_backoff_delay(managed.backoff_streak)
        if delay > 0:
            self._set_status(managed, dataclasses.replace(managed.status, phase=Phase.BACKOFF_WAIT))
            self._emit(cid, LifecycleEventType.BACKOFF_STARTED, f"delay {delay:g}s")
            timer = threading.Timer(delay, lambda: self._queue.put(("restart_due", cid)))
            timer.daemon = True
            managed.timers.append(timer)
            timer.start()
        else:
            self._queue.put(("restart_due", cid))

    def _handle_restart_due(self, container_id: str) -> None:
        managed = self._get(container_id)
        if managed is None or self._shutting_down:
            return
        self._set_status(managed, dataclasses.replace(managed.status, phase=Phase.TERMINATING))
        self._detach_monitoring(managed)
        threading.Thread(
            target=self.terminate_and_restart,
            args=(managed,),
            name=f"restart-{container_id}",
            daemon=True,
        ).start()

    @staticmethod
    def _poll_until_dead(process: subprocess.Popen, timeout: float) -> bool:
        pause = threading.Event()
        deadline = mono() + timeout
        while process.poll() is None:
            if mono() >= deadline:
                return False
            pause.wait(0.01)
        return True

    def terminate_and_restart(self, managed: _Managed) -> None:
        """Worker: polite stop, force kill after grace, then relaunch."""
        spec = managed.spec
        process = managed.process
        if process is not None and process.poll() is None:
            self._emit(spec.container_id, LifecycleEventType.SIGTERM_SENT)
            process.terminate()
            # the waiter thread owns the blocking wait; poll here instead
            if not self._poll_until_dead(process, spec.termination_grace_period):
                self._emit(
                    spec.container_id,
                    LifecycleEventType.SIGKILL_SENT,
                    f"grace {spec.termination_grace_period:g}s elapsed",
                )
                process.kill()
                self._poll_until_dead(process, 10.0)
        new_generation = managed.generation + 1
        t0 = wall_ms()
        command = list(spec.command)
        if spec.t0_flag:
            command += [spec.t0_flag, str(t0)]
        log_path = self._log_file(spec.container_id, new_generation)
        try:
            log_stream = open(log_path, "ab")
            process = subprocess.Popen(command, stdout=log_stream, stderr=subprocess.STDOUT)
            log_stream.close()
        except OSError as exc:
            self._queue.put(("relaunched", spec.container_id, None, t0, new_generation, str(exc)))
            return
        self._queue.put(("relaunched", spec.container_id, process, t0, new_generation, None))

    def _handle_relaunched(
        self,
        container_id: str,
        process: Optional[subprocess.Popen],
        t0: int,
        generation: int,
        error: Optional[str],
    ) -> None:
        managed = self._get(container_id)
        if managed is None:
            return
        if error is not None:
            self._emit(container_id, LifecycleEventType.EXITED, f"relaunch failed: {error}")
            managed.restart_in_flight = False
            if not self._shutting_down:
                self._queue_restart(managed)
            return
        with self._state_lock:
            managed.process = process
            managed.generation = generation
            managed.generation_start_ms = t0
            managed.log_path = self._log_file(container_id, generation)
            managed.last_heartbeat_ms = None
            managed.status = status_after_restart(
                managed.status, managed.spec.has_startup_probe
            )
            managed.restart_in_flight = False
        self._emit(
            container_id,
            LifecycleEventType.RESTARTED,
            f"generation {generation} pid {process.pid}",
        )
        threading.Thread(
            target=self._waiter,
            args=(container_id, generation, process),
            name=f"wait-{container_id}.{generation}",
            daemon=True,
        ).start()
        if self._shutting_down:
            return
        self._attach_monitoring(managed)

    def _handle_apply(self, container_id: str, action: Action, done: threading.Event) -> None:
        try:
            managed = self._get(container_id)
            if managed is None:
                raise ConfigError(f"container {container_id} is not supervised")
            status = managed.status
            if action == Action.MARK_READY:
                if status.phase in (Phase.RUNNING, Phase.INITIALIZING) and status.started and not status.ready:
                    self._apply_transition(
                        managed, dataclasses.replace(status, ready=True), Action.MARK_READY
                    )
            elif action == Action.MARK_UNREADY:
                if status.ready:
                    self._apply_transition(
                        managed, dataclasses.replace(status, ready=False), Action.MARK_UNREADY
                    )
            elif action == Action.MARK_UNHEALTHY:
                if status.phase in (Phase.RUNNING, Phase.INITIALIZING):
                    self._apply_transition(
                        managed,
                        dataclasses.replace(
                            status, healthy=False, ready=False, phase=Phase.RESTART_QUEUED
                        ),
                        Action.MARK_UNHEALTHY,
                    )
            elif action == Action.MARK_STARTED:
                if not status.started:
                    self._apply_transition(
                        managed,
                        dataclasses.replace(status, started=True, phase=Phase.RUNNING),
                        Action.MARK_STARTED,
                    )
        finally:
            done.set()

    def _handle_watchdog(self) -> None:
        with self._state_lock:
            managed_list = list(self._containers.values())
        for managed in managed_list:
            config = managed.spec.signal_config
            if config is None or config.heartbeat_deadline is None:
                continue
            if managed.status.phase not in (Phase.RUNNING, Phase.INITIALIZING):
                continue
            action = watchdog_check(
                managed.last_heartbeat_ms, config.heartbeat_deadline, wall_ms()
            )
            if action == Action.MARK_UNHEALTHY:
                    self._apply_transition(
                    managed,
                    dataclasses.replace(
                        managed.status, healthy=False, ready=False, phase=Phase.RESTART_QUEUED
                    ),
                    Action.MARK_UNHEALTHY,
                )
