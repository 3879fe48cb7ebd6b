"""Experiment orchestration: load generation, runs, measurements, CSVs.

A run executes N repetitions sequentially, each with a fresh supervisor,
fresh mock-service processes, a scheduled fault plan, and an open-loop load
generator aimed at the service's balancer. Every repetition writes
``events.ndjson`` (the measurement source of truth) and ``timeseries.csv``;
the run directory gets ``summary.csv`` (one row per repetition plus
mean/stddev footer) and ``validation.csv`` (detection-time model versus
measurement).
"""

from __future__ import annotations

import logging
import math
import statistics
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .balancer import ReadySetBalancer, RequestOutcome
from .config import MonitoringSpec, RunConfig, ServiceSpec
from .errors import ConfigError, LoadGeneratorOverload
from .faults import FaultInjector, FaultKind, FaultPlan
from .measures import (
    RepetitionSummary,
    load_run_records,
    summarize_repetition,
    timeseries_rows,
    validation_rows,
    write_summary_csv,
    write_timeseries_csv,
    write_validation_csv,
    merge_validation,
)
from .state import PolicyVariant, ProbeKind, find_probe
from .supervisor import ContainerSpec, Supervisor
from .util import mono, pick_free_port, sleep_until, wall_ms

logger = logging.getLogger(__name__)

# Abort the repetition when the dispatcher falls this far behind schedule.
_MAX_DISPATCH_LAG_S = 0.25
_SETTLE_AFTER_WINDOW_S = 1.0


@dataclass(frozen=True)
class MetricsRecord:
    """Per-second request outcomes, binned by scheduled send time."""

    second: int
    success: int = 0
    timeout: int = 0
    http500: int = 0
    refused: int = 0

    @property
    def attempts(self) -> int:
        return self.success + self.timeout + self.http500 + self.refused

    def to_record(self) -> dict:
        return {
            "record": "metrics",
            "second": self.second,
            "success": self.success,
            "timeout": self.timeout,
            "http500": self.http500,
            "refused": self.refused,
        }


class LoadGenerator:
    """Open-loop fixed-rate HTTP load against a balancer.

    Arrivals are scheduled on a fixed grid (no closed-loop pacing); requests
    run on a pool large enough to hold every in-flight timeout. If the
    dispatcher cannot keep to its schedule the run aborts: results at a
    degraded rate would be invalid.
    """

    def __init__(
        self,
        balancer: ReadySetBalancer,
        rate: float,
        request_timeout: float,
        window: float,
    ) -> None:
        if rate <= 0:
            raise ConfigError("request rate must be > 0")
        self._balancer = balancer
        self._rate = rate
        self._timeout = request_timeout
        self._window = window
        self._lock = threading.Lock()
        self._bins: Dict[int, Dict[str, int]] = {}

    def generate_load(self, start_mono: Optional[float] = None) -> List[MetricsRecord]:
        total = int(round(self._window * self._rate))
        workers = min(int(math.ceil(self._rate * self._timeout)) + 32, 256)
        start = start_mono if start_mono is not None else mono()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for index in range(total):
                scheduled = start + index / self._rate
                sleep_until(scheduled)
                lag = mono() - scheduled
                if lag > _MAX_DISPATCH_LAG_S:
                    pool.shutdown(wait=False, cancel_futures=True)
                    raise LoadGeneratorOverload(
                        f"dispatcher {lag:.3f}s behind at request {index}; "
                        f"cannot sustain {self._rate:g} req/s"
                    )
                second = int(index / self._rate)
                pool.submit(self._one_request, second)
        return [
            MetricsRecord(second=second, **self._bins[second])
            for second in sorted(self._bins)
        ]

    def _one_request(self, second: int) -> None:
        _, outcome = self._balancer.route("/", self._timeout)
        key = {
            RequestOutcome.SUCCESS: "success",
            RequestOutcome.TIMEOUT: "timeout",
            RequestOutcome.HTTP_500: "http500",
            RequestOutcome.REFUSED: "refused",
        }[outcome]
        with self._lock:
            bucket = self._bins.setdefault(
                second, {"success": 0, "timeout": 0, "http500": 0, "refused": 0}
            )
            bucket[key] += 1


# ---------------------------------------------------------------- topology


def _build_command(
    container_id: str,
    service: ServiceSpec,
    run_mode: str,
    port: int,
    dependency_endpoint: Optional[Tuple[str, int]],
    signal_socket: Optional[str],
    start_down: bool,
) -> Tuple[str, ...]:
    command = [
        sys.executable,
        "-m",
        "sentinel.mockservice",
        "--port", str(port),
        "--container-id", container_id,
        "--init-time", str(service.init_time),
        "--ready-line", service.ready_line,
        "--unhealthy-line", service.unhealthy_line,
        "--response-latency-ms", str(service.response_latency_ms),
        "--pid-mode", run_mode,
        "--http-500-window-ms", str(service.http_500_window_ms),
    ]
    if dependency_endpoint is not None:
        command += ["--dependency", f"{dependency_endpoint[0]}:{dependency_endpoint[1]}"]
    if signal_socket:
        command += ["--signal-socket", signal_socket]
        if service.heartbeat_ms > 0:
            command += ["--heartbeat-ms", str(service.heartbeat_ms)]
    if start_down:
        command += ["--start-down"]
    return tuple(command)


def build_container_specs(
    config: RunConfig, paper_scale: bool, supervisor: Supervisor
) -> List[ContainerSpec]:
    """Render the config topology into supervisable container specs."""
    monitoring = config.selected_monitoring()
    services = {s.name: s for s in config.services}
    ports: Dict[str, int] = {c.id: pick_free_port() for c in config.containers}
    service_ports: Dict[str, Tuple[str, int]] = {}
    for container in config.containers:
        service_ports.setdefault(container.service, ("127.0.0.1", ports[container.id]))

    specs = []
    for container in config.containers:
        service = services[container.service]
        block = monitoring if container.monitored else MonitoringSpec(name="unmonitored")
        signal_config = block.to_signal_config(service)
        socket_path = None
        if signal_config is not None and signal_config.transport.value == "socket":
            socket_path = supervisor.signal_socket_path
        dependency_endpoint = (
            service_ports[service.dependency] if service.dependency else None
        )
        specs.append(
            ContainerSpec(
                container_id=container.id,
                command=_build_command(
                    container.id,
                    service,
                    container.run_mode.value,
                    ports[container.id],
                    dependency_endpoint,
                    socket_path,
                    service.initially_down,
                ),
                service=container.service,
                port=ports[container.id],
                run_mode=container.run_mode,
                termination_grace_period=block.grace,
                probes=block.to_probe_configs(paper_scale),
                policy=block.policy_obj(),
                signal_config=signal_config,
                init_time=service.init_time,
                t0_flag="--t0-ms",
            )
        )
    return specs


# ------------------------------------------------------------- repetitions


def _meta_record(
    config: RunConfig,
    paper_scale: bool,
    repetition: int,
    measurement_start_ms: int,
    specs: List[ContainerSpec],
) -> dict:
    experiment = config.experiment
    monitoring = config.selected_monitoring()
    target_service = config.target_service()
    target_spec = next(s for s in specs if s.service == target_service)
    liveness = find_probe(target_spec.probes, ProbeKind.LIVENESS)
    readiness = find_probe(target_spec.probes, ProbeKind.READINESS)
    monitor_delay = (
        target_spec.signal_config.monitor_start_delay
        if target_spec.signal_config is not None
        else 0.0
    )
    return {
        "record": "meta",
        "timestamp_ms": measurement_start_ms,
        "name": config.name,
        "repetition": repetition,
        "seed": config.seed,
        "scale": "paper" if paper_scale else "desk",
        "policy": monitoring.policy,
        "service": target_service,
        "containers": [s.container_id for s in specs],
        "rate": experiment.rate,
        "request_timeout_s": experiment.request_timeout,
        "warmup_s": experiment.warmup_value(paper_scale),
        "window_s": experiment.window_value(paper_scale),
        "expected_seconds": int(experiment.window_value(paper_scale)),
        "measurement_start_ms": measurement_start_ms,
        "init_time_s": next(
            s.init_time for s in config.services if s.name == target_service
        ),
        "monitor_start_delay_s": monitor_delay,
        "liveness": (
            {
                "probes_required": liveness.failure_threshold,
                "interval_s": liveness.interval,
                "initial_delay_s": liveness.initial_delay,
            }
            if liveness
            else None
        ),
        "readiness": (
            {
                "probes_required": readiness.success_threshold,
                "interval_s": readiness.interval,
                "initial_delay_s": readiness.initial_delay,
            }
            if readiness
            else None
        ),
    }


def _stagger_overrides(
    config: RunConfig,
    paper_scale: bool,
    plan: FaultPlan,
    repetition_index: int,
    supervisor: Supervisor,
    specs: List[ContainerSpec],
    measurement_start_ms: int,
) -> Dict[int, float]:
    """Pin each handler-kill to a controlled phase of the liveness cadence.

    The detection-time model predicts the mean over failures uniformly spread
    across a probe interval; spreading the per-repetition injection phases
    evenly realizes that mean instead of leaving it to scheduling accidents.
    """
    if not config.experiment.stagger_fault_phase:
        return {}
    monitoring = config.selected_monitoring()
    if monitoring.policy == "signal_based":
        return {}
    reps = config.experiment.repetitions_value(paper_scale)
    overrides: Dict[int, float] = {}
    fraction = (repetition_index + 0.5) / reps + 0.02
    for index, entry in enumerate(plan.entries):
        if entry.kind != FaultKind.KILL_HANDLER:
            continue
        spec = next((s for s in specs if s.container_id == entry.target), None)
        if spec is None:
            continue
        liveness = find_probe(spec.probes, ProbeKind.LIVENESS)
        if liveness is None:
            continue
        anchor_ms = supervisor.generation_start(entry.target) + int(
            liveness.initial_delay * 1000
        )
        interval_ms = int(liveness.interval * 1000)
        base_ms = measurement_start_ms + int(entry.at * 1000)
        slots_before = (base_ms - anchor_ms) // interval_ms
        target_ms = anchor_ms + slots_before * interval_ms + int(fraction * interval_ms)
        if target_ms < base_ms:
            target_ms += interval_ms
        overrides[index] = (target_ms - measurement_start_ms) / 1000.0
    return overrides


def run_repetition(
    config: RunConfig,
    paper_scale: bool,
    repetition: int,
    rep_dir: Path,
) -> RepetitionSummary:
    """Execute one repetition with fresh state; returns its summary row."""
    experiment = config.experiment
    supervisor = Supervisor(rep_dir)
    supervisor.start()
    try:
        specs = build_container_specs(config, paper_scale, supervisor)
        dependency_services = {
            s.dependency for s in config.services if s.dependency
        }
        ordered = sorted(
            specs, key=lambda s: 0 if s.service in dependency_services else 1
        )
        for spec in ordered:
            supervisor.spawn(spec)

        warmup = experiment.warmup_value(paper_scale)
        if warmup > 0:
            sleep_until(mono() + warmup)

        measurement_start_ms = wall_ms()
        start_mono = mono()
        supervisor.event_log.append(
            _meta_record(config, paper_scale, repetition, measurement_start_ms, specs)
        )

        plan = config.fault_plan()
        overrides = _stagger_overrides(
            config, paper_scale, plan, repetition - 1, supervisor, specs,
            measurement_start_ms,
        )
        endpoints = {s.container_id: (s.host, s.port) for s in specs if s.port}

        def resolve(target: str) -> Optional[Tuple[str, int]]:
            if target in endpoints:
                return endpoints[target]
            service_specs = [s for s in specs if s.service == target and s.port]
            return (service_specs[0].host, service_specs[0].port) if service_specs else None

        injector = FaultInjector(plan, resolve, supervisor.log_injection, overrides)
        injector.start(start_mono)

        target_service = config.target_service()
        balancer = ReadySetBalancer(
            target_service,
            lambda: supervisor.ready_set(target_service),
            lambda: supervisor.endpoints(target_service),
            seed=config.seed,
        )
        generator = LoadGenerator(
            balancer,
            experiment.rate,
            experiment.request_timeout,
            experiment.window_value(paper_scale),
        )
        try:
            records = generator.generate_load(start_mono)
        except LoadGeneratorOverload as exc:
            supervisor.event_log.append(
                {"record": "abort", "timestamp_ms": wall_ms(), "reason": str(exc)}
            )
            records = []
        sleep_until(mono() + _SETTLE_AFTER_WINDOW_S)
        injector.cancel()
        injector.join()
        for record in records:
            supervisor.event_log.append(record.to_record())
    finally:
        supervisor.stop()

    run = load_run_records(rep_dir / "events.ndjson")
    summary = summarize_repetition(run)
    write_timeseries_csv(rep_dir / "timeseries.csv", timeseries_rows(run))
    return summary


def run_experiment(
    config: RunConfig, rundir: str | Path, paper_scale: bool = False
) -> List[RepetitionSummary]:
    """Run all repetitions sequentially and write the run-level CSVs."""
    config.validate()
    rundir = Path(rundir)
    rundir.mkdir(parents=True, exist_ok=True)
    reps = config.experiment.repetitions_value(paper_scale)
    summaries = []
    all_validation = []
    for repetition in range(1, reps + 1):
        rep_dir = rundir / f"rep-{repetition}"
        logger.info("repetition %d/%d -> %s", repetition, reps, rep_dir)
        summary = run_repetition(config, paper_scale, repetition, rep_dir)
        summaries.append(summary)
        run = load_run_records(rep_dir / "events.ndjson")
        all_validation.extend(validation_rows(run))
    write_summary_csv(rundir / "summary.csv", summaries)
    write_validation_csv(rundir / "validation.csv", merge_validation(all_validation))
    return summaries


def mean_and_stddev(values: List[float]) -> Tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    mean = statistics.fmean(values)
    stddev = statistics.stdev(values) if len(values) >= 2 else 0.0
    return mean, stddev
