"""Per-container monitoring state machine.

Pure transition functions over immutable :class:`ContainerStatus` values:
probe-result accounting with consecutive success/failure counters, the
Started/Ready/Healthy flags, policy-variant behavior (delayed probing,
tolerate-failures windows, conflated probes, signal-based), restart backoff,
and first-probe-due scheduling. Callers serialize updates per container; the
module holds no mutable state.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Tuple

from .errors import ConfigError

__all__ = [
    "ProbeKind",
    "ProbeMethod",
    "ProbeConfig",
    "PolicyVariant",
    "MonitoringPolicy",
    "Phase",
    "Action",
    "ProbeOutcome",
    "ContainerStatus",
    "initial_status",
    "status_after_restart",
    "record_probe_result",
    "on_runtime_exit",
    "compute_backoff_delay",
    "first_probe_due",
    "validate_probe_set",
]

MIN_PROBE_INTERVAL_S = 1.0
BACKOFF_BASE_S = 10.0
BACKOFF_CAP_S = 300.0
BACKOFF_FREE_RESTARTS = 2


class ProbeKind(str, Enum):
    STARTUP = "startup"
    READINESS = "readiness"
    LIVENESS = "liveness"


class ProbeMethod(str, Enum):
    HTTP_GET = "http_get"
    TCP_CONNECT = "tcp_connect"
    COMMAND = "command"


class PolicyVariant(str, Enum):
    DELAYED_PROBES = "delayed_probes"
    TOLERATE_FAILURES = "tolerate_failures"
    CONFLATED = "conflated"
    SIGNAL_BASED = "signal_based"


class Phase(str, Enum):
    INITIALIZING = "initializing"
    RUNNING = "running"
    TERMINATING = "terminating"
    RESTART_QUEUED = "restart_queued"
    BACKOFF_WAIT = "backoff_wait"
    EXITED = "exited"


class Action(str, Enum):
    NONE = "none"
    MARK_STARTED = "mark_started"
    MARK_READY = "mark_ready"
    MARK_UNREADY = "mark_unready"
    MARK_UNHEALTHY = "mark_unhealthy"


class ProbeOutcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


# Policies that conflate traffic eligibility and restarts: any probe kind can
# both mark the container ready and, on the failure threshold, restart it.
_CONFLATING = (PolicyVariant.TOLERATE_FAILURES, PolicyVariant.CONFLATED)
# Policies where probing waits for the configured initial delay.
_DELAYING = (PolicyVariant.DELAYED_PROBES, PolicyVariant.SIGNAL_BASED)

_RESTART_PENDING_PHASES = (
    Phase.TERMINATING,
    Phase.RESTART_QUEUED,
    Phase.BACKOFF_WAIT,
)


@dataclass(frozen=True)
class ProbeConfig:
    """Parameters for one probe of one kind against one container."""

    kind: ProbeKind
    method: ProbeMethod = ProbeMethod.HTTP_GET
    target: str = "/health"
    interval: float = 1.0
    initial_delay: float = 0.0
    timeout: float = 0.5
    failure_threshold: int = 3
    success_threshold: int = 1

    def __post_init__(self) -> None:
        if self.interval < MIN_PROBE_INTERVAL_S:
            raise ConfigError(
                f"probe interval {self.interval}s is below the {MIN_PROBE_INTERVAL_S}s floor"
            )
        if self.initial_delay < 0:
            raise ConfigError("initial_delay must be >= 0")
        if not 0 < self.timeout < self.interval:
            raise ConfigError(
                f"probe timeout {self.timeout}s must be positive and below the "
                f"interval {self.interval}s"
            )
        if self.failure_threshold < 1 or self.success_threshold < 1:
            raise ConfigError("probe thresholds must be >= 1")
        if self.kind == ProbeKind.LIVENESS and self.success_threshold != 1:
            raise ConfigError("liveness success_threshold is fixed at 1")


@dataclass(frozen=True)
class MonitoringPolicy:
    """The orchestrator-policy variant in force for one container."""

    variant: PolicyVariant
    tolerate_window: float = 0.0

    def __post_init__(self) -> None:
        if self.variant == PolicyVariant.TOLERATE_FAILURES:
            if self.tolerate_window <= 0:
                raise ConfigError("tolerate_failures requires tolerate_window > 0")
        elif self.tolerate_window:
            raise ConfigError("tolerate_window is only valid under tolerate_failures")


def _zero_counters() -> Mapping[ProbeKind, int]:
    return {kind: 0 for kind in ProbeKind}


@dataclass(frozen=True)
class ContainerStatus:
    """Live monitoring state of one supervised container."""

    started: bool = False
    ready: bool = False
    healthy: bool = True
    restart_count: int = 0
    phase: Phase = Phase.INITIALIZING
    consecutive_failures: Mapping[ProbeKind, int] = field(default_factory=_zero_counters)
    consecutive_successes: Mapping[ProbeKind, int] = field(default_factory=_zero_counters)
    # set once the tolerate-failures window has expired and counters reset
    tolerate_reset_done: bool = False

    def __post_init__(self) -> None:
        if self.ready and not self.started:
            raise ValueError("ready container must be started")
        if self.phase in _RESTART_PENDING_PHASES and self.ready:
            raise ValueError(f"container in phase {self.phase.value} cannot be ready")
        if self.restart_count < 0:
            raise ValueError("restart_count must be >= 0")

    @property
    def restart_pending(self) -> bool:
        return self.phase in _RESTART_PENDING_PHASES


def initial_status(has_startup_probe: bool) -> ContainerStatus:
    """Status for a freshly spawned container.

    Without a startup probe the container counts as started immediately, the
    usual orchestrator assumption for unconfigured probes.
    """
    if has_startup_probe:
        return ContainerStatus(started=False, phase=Phase.INITIALIZING)
    return ContainerStatus(started=True, phase=Phase.RUNNING)


def status_after_restart(status: ContainerStatus, has_startup_probe: bool) -> ContainerStatus:
    """Fresh status for the next generation after a restart completes."""
    base = initial_status(has_startup_probe)
    return dataclasses.replace(base, restart_count=status.restart_count + 1)


def _bump(
    counters: Mapping[ProbeKind, int], kind: ProbeKind, value: int
) -> Mapping[ProbeKind, int]:
    updated = dict(counters)
    updated[kind] = value
    return updated


def record_probe_result(
    status: ContainerStatus,
    kind: ProbeKind,
    outcome: ProbeOutcome,
    config: ProbeConfig,
    policy: MonitoringPolicy,
    now_ms: int,
    container_start_ms: int = 0,
) -> Tuple[ContainerStatus, Action]:
    """Fold one probe outcome into the container status.

    Success resets the failure counter and vice versa. Threshold crossings
    emit exactly one action: ``mark_started`` for startup success,
    ``mark_ready``/``mark_unready`` for readiness, ``mark_unhealthy`` for
    liveness failure (and for any kind under conflating policies, suppressed
    inside the tolerate window). Signal-based policy never restarts from
    probes. Results for a kind that is gated or unconfigured are rejected.
    """
    if config.kind != kind:
        raise ConfigError(f"probe result kind {kind.value} does not match config {config.kind.value}")
    if (
        policy.variant in _DELAYING
        and not status.started
        and kind != ProbeKind.STARTUP
    ):
        raise ConfigError(
            f"{kind.value} probe result before startup passed is not accepted"
        )
    if status.restart_pending or status.phase == Phase.EXITED:
        return status, Action.NONE

    # Expire the tolerate window once: counters restart from zero so only
    # post-window failures accumulate toward a restart.
    if (
        policy.variant == PolicyVariant.TOLERATE_FAILURES
        and not status.tolerate_reset_done
        and now_ms >= container_start_ms + policy.tolerate_window * 1000
    ):
        status = dataclasses.replace(
            status,
            consecutive_failures=_zero_counters(),
            consecutive_successes=_zero_counters(),
            tolerate_reset_done=True,
        )

    if outcome == ProbeOutcome.SUCCESS:
        successes = status.consecutive_successes[kind] + 1
        status = dataclasses.replace(
            status,
            consecutive_successes=_bump(status.consecutive_successes, kind, successes),
            consecutive_failures=_bump(status.consecutive_failures, kind, 0),
        )
        return _on_success_threshold(status, kind, successes, config, policy)

    failures = status.consecutive_failures[kind] + 1
    status = dataclasses.replace(
        status,
        consecutive_failures=_bump(status.consecutive_failures, kind, failures),
        consecutive_successes=_bump(status.consecutive_successes, kind, 0),
    )
    return _on_failure_threshold(
        status, kind, failures, config, policy, now_ms, container_start_ms
    )


def _on_success_threshold(
    status: ContainerStatus,
    kind: ProbeKind,
    successes: int,
    config: ProbeConfig,
    policy: MonitoringPolicy,
) -> Tuple[ContainerStatus, Action]:
    if successes != config.success_threshold:
        return status, Action.NONE
    if kind == ProbeKind.STARTUP:
        if not status.started:
            status = dataclasses.replace(status, started=True, phase=Phase.RUNNING)
            return status, Action.MARK_STARTED
        return status, Action.NONE
    if kind == ProbeKind.READINESS or policy.variant in _CONFLATING:
        if status.started and not status.ready:
            status = dataclasses.replace(status, ready=True)
            return status, Action.MARK_READY
    return status, Action.NONE


def _on_failure_threshold(
    status: ContainerStatus,
    kind: ProbeKind,
    failures: int,
    config: ProbeConfig,
    policy: MonitoringPolicy,
    now_ms: int,
    container_start_ms: int,
) -> Tuple[ContainerStatus, Action]:
    if failures != config.failure_threshold:
        return status, Action.NONE

    restart_worthy = (
        kind in (ProbeKind.LIVENESS, ProbeKind.STARTUP)
        or policy.variant in _CONFLATING
    )
    if restart_worthy and policy.variant != PolicyVariant.SIGNAL_BASED:
        if policy.variant == PolicyVariant.TOLERATE_FAILURES:
            in_window = now_ms < container_start_ms + policy.tolerate_window * 1000
            if in_window:
                restart_worthy = False
        if restart_worthy:
            status = dataclasses.replace(
                status, healthy=False, ready=False, phase=Phase.RESTART_QUEUED
            )
            return status, Action.MARK_UNHEALTHY

    if kind == ProbeKind.READINESS and status.ready:
        status = dataclasses.replace(status, ready=False)
        return status, Action.MARK_UNREADY
    return status, Action.NONE


def on_runtime_exit(status: ContainerStatus) -> Tuple[ContainerStatus, Action]:
    """Handle the container runtime reporting the process exited.

    An unexpected exit makes the container Unhealthy and queues a restart
    regardless of probe counters. Exits reported while a restart is already
    pending (or after a previous exit) are idempotent no-ops.
    """
    if status.phase in (Phase.RUNNING, Phase.INITIALIZING):
        status = dataclasses.replace(
            status, healthy=False, ready=False, phase=Phase.RESTART_QUEUED
        )
        return status, Action.MARK_UNHEALTHY
    return status, Action.NONE


def compute_backoff_delay(restart_count: int) -> float:
    """Crash-loop backoff delay in seconds before the given restart.

    The first two restarts are immediate; from the third the delay starts at
    10s and doubles per restart, capped at 300s.
    """
    if restart_count < 1:
        raise ValueError(f"restart_count must be >= 1, got {restart_count}")
    if restart_count <= BACKOFF_FREE_RESTARTS:
        return 0.0
    return min(BACKOFF_BASE_S * 2 ** (restart_count - BACKOFF_FREE_RESTARTS - 1), BACKOFF_CAP_S)


def first_probe_due(
    config: ProbeConfig, policy: MonitoringPolicy, container_start_ms: int
) -> int:
    """Wall timestamp (ms) when the first probe of this config is due.

    Delayed-probe style policies honor the initial delay; tolerate-failures
    and conflated orchestrators probe as soon as the container starts.
    """
    if policy.variant in _DELAYING:
        return container_start_ms + int(config.initial_delay * 1000)
    return container_start_ms


def validate_probe_set(
    configs: Tuple[ProbeConfig, ...], policy: MonitoringPolicy
) -> None:
    """Check a container's probe set: one per kind, kinds legal for the policy."""
    seen = set()
    for config in configs:
        if config.kind in seen:
            raise ConfigError(f"duplicate {config.kind.value} probe")
        seen.add(config.kind)
    if ProbeKind.STARTUP in seen and policy.variant in _CONFLATING:
        raise ConfigError(
            f"startup probes are not supported under {policy.variant.value}"
        )


def find_probe(
    configs: Tuple[ProbeConfig, ...], kind: ProbeKind
) -> Optional[ProbeConfig]:
    for config in configs:
        if config.kind == kind:
            return config
    return None
