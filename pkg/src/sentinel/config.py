"""Run configuration: a TOML file describing one experiment.

A config names the mock services, the supervised containers, one or more
monitoring blocks (probe parameters or signal monitoring), the experiment
plan (rate, timeout, warmup, window, repetitions), and a fault schedule.
Exactly one monitoring block is selected per run. Values are desk-scale;
fields with a ``*_paper`` sibling switch to the unscaled value under
``--paper-scale``.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .faults import FaultEntry, FaultKind, FaultPlan
from .signals import SignalMonitorConfig, Transport
from .state import (
    MonitoringPolicy,
    PolicyVariant,
    ProbeConfig,
    ProbeKind,
    ProbeMethod,
    validate_probe_set,
)
from .supervisor import RunMode

PRESET_DIR = Path(__file__).parent / "presets"


@dataclass(frozen=True)
class ServiceSpec:
    """One mock service definition (catalogue or dependency analog)."""

    name: str
    init_time: float = 1.8
    ready_line: str = "serving on"
    unhealthy_line: str = "handler exited"
    response_latency_ms: float = 0.0
    dependency: Optional[str] = None
    http_500_window_ms: float = 0.0
    heartbeat_ms: float = 0.0
    initially_down: bool = False


@dataclass(frozen=True)
class ContainerSpecConfig:
    id: str
    service: str
    monitored: bool = True
    run_mode: RunMode = RunMode.HANDLER_AS_PID1


@dataclass(frozen=True)
class ProbeSpec:
    """Config-level probe description with optional paper-scale values."""

    kind: str
    method: str = "http_get"
    target: str = "/health"
    interval: float = 1.0
    initial_delay: float = 0.0
    timeout: float = 0.5
    failure_threshold: int = 3
    success_threshold: int = 1
    interval_paper: Optional[float] = None
    initial_delay_paper: Optional[float] = None

    def to_probe_config(self, paper_scale: bool) -> ProbeConfig:
        interval = self.interval
        delay = self.initial_delay
        if paper_scale:
            interval = self.interval_paper if self.interval_paper is not None else interval
            delay = (
                self.initial_delay_paper if self.initial_delay_paper is not None else delay
            )
        return ProbeConfig(
            kind=ProbeKind(self.kind),
            method=ProbeMethod(self.method),
            target=self.target,
            interval=interval,
            initial_delay=delay,
            timeout=self.timeout,
            failure_threshold=self.failure_threshold,
            success_threshold=self.success_threshold,
        )


@dataclass(frozen=True)
class SignalSpec:
    transport: str = "socket"
    monitor_start_delay: Optional[float] = None
    heartbeat_deadline: Optional[float] = None
    log_poll_gap: float = 0.02


@dataclass(frozen=True)
class MonitoringSpec:
    """A named monitoring configuration block."""

    name: str
    policy: str = "delayed_probes"
    tolerate_window: float = 0.0
    grace: float = 30.0
    probes: Tuple[ProbeSpec, ...] = ()
    signal: Optional[SignalSpec] = None

    def policy_obj(self) -> MonitoringPolicy:
        return MonitoringPolicy(
            variant=PolicyVariant(self.policy), tolerate_window=self.tolerate_window
        )

    def to_probe_configs(self, paper_scale: bool) -> Tuple[ProbeConfig, ...]:
        configs = tuple(p.to_probe_config(paper_scale) for p in self.probes)
        validate_probe_set(configs, self.policy_obj())
        return configs

    def to_signal_config(self, service: ServiceSpec) -> Optional[SignalMonitorConfig]:
        if self.policy != "signal_based":
            return None
        spec = self.signal or SignalSpec()
        return SignalMonitorConfig(
            ready_pattern=service.ready_line,
            unhealthy_pattern=service.unhealthy_line,
            transport=Transport(spec.transport),
            heartbeat_deadline=spec.heartbeat_deadline,
            log_poll_gap=spec.log_poll_gap,
            monitor_start_delay=spec.monitor_start_delay,
        )


@dataclass(frozen=True)
class ExperimentSpec:
    rate: float = 100.0
    request_timeout: float = 0.5
    warmup: float = 10.0
    window: float = 120.0
    repetitions: int = 5
    warmup_paper: Optional[float] = None
    window_paper: Optional[float] = None
    repetitions_paper: Optional[int] = None
    stagger_fault_phase: bool = True
    target: Optional[str] = None  # service the load generator aims at

    def warmup_value(self, paper_scale: bool) -> float:
        if paper_scale and self.warmup_paper is not None:
            return self.warmup_paper
        return self.warmup

    def window_value(self, paper_scale: bool) -> float:
        if paper_scale and self.window_paper is not None:
            return self.window_paper
        return self.window

    def repetitions_value(self, paper_scale: bool) -> int:
        if paper_scale and self.repetitions_paper is not None:
            return self.repetitions_paper
        return self.repetitions


@dataclass(frozen=True)
class FaultSpec:
    at: float
    kind: str
    target: str
    latency_ms: float = 0.0

    def to_entry(self) -> FaultEntry:
        return FaultEntry(
            at=self.at,
            kind=FaultKind(self.kind),
            target=self.target,
            latency_ms=self.latency_ms,
        )


@dataclass(frozen=True)
class RunConfig:
    name: str
    monitoring: str
    seed: int = 0
    services: Tuple[ServiceSpec, ...] = ()
    containers: Tuple[ContainerSpecConfig, ...] = ()
    monitoring_blocks: Tuple[MonitoringSpec, ...] = ()
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    faults: Tuple[FaultSpec, ...] = ()

    def selected_monitoring(self) -> MonitoringSpec:
        for block in self.monitoring_blocks:
            if block.name == self.monitoring:
                return block
        raise ConfigError(f"monitoring block {self.monitoring!r} not defined")

    def target_service(self) -> str:
        if self.experiment.target:
            return self.experiment.target
        for container in self.containers:
            if container.monitored:
                return container.service
        raise ConfigError("no monitored container to target")

    def fault_plan(self) -> FaultPlan:
        return FaultPlan(entries=tuple(f.to_entry() for f in self.faults))

    def validate(self) -> "RunConfig":
        if self.experiment.rate <= 0:
            raise ConfigError("experiment.rate must be > 0")
        if not 0 < self.experiment.request_timeout < self.experiment.window:
            raise ConfigError("request_timeout must be positive and below the window")
        if self.experiment.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        service_names = {s.name for s in self.services}
        if len(service_names) != len(self.services):
            raise ConfigError("duplicate service names")
        container_ids = {c.id for c in self.containers}
        if len(container_ids) != len(self.containers):
            raise ConfigError("duplicate container ids")
        for service in self.services:
            if service.dependency and service.dependency not in service_names:
                raise ConfigError(
                    f"service {service.name!r} depends on unknown {service.dependency!r}"
                )
        for container in self.containers:
            if container.service not in service_names:
                raise ConfigError(
                    f"container {container.id!r} references unknown service "
                    f"{container.service!r}"
                )
        block = self.selected_monitoring()
        block.to_probe_configs(paper_scale=False)
        block.to_probe_configs(paper_scale=True)
        if block.policy == "signal_based" and block.signal is None:
            raise ConfigError("signal_based monitoring block needs a [..signal] table")
        valid_targets = container_ids | service_names
        self.fault_plan().validate_targets(sorted(valid_targets))
        self.target_service()
        return self


# ------------------------------------------------------------------ parsing


def _build(cls, table: dict, path: str):
    """Construct a config dataclass from a TOML table, strict on keys."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{path}: unknown key {key!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    services = tuple(
        _build(ServiceSpec, t, f"services[{i}]") for i, t in enumerate(data.pop("services", []))
    )
    containers = tuple(
        _build_container(t, f"containers[{i}]")
        for i, t in enumerate(data.pop("containers", []))
    )
    blocks = tuple(
        _build_monitoring(t, f"monitoring_blocks[{i}]")
        for i, t in enumerate(data.pop("monitoring_blocks", []))
    )
    experiment = _build(ExperimentSpec, data.pop("experiment", {}), "experiment")
    faults = tuple(
        _build(FaultSpec, t, f"faults[{i}]") for i, t in enumerate(data.pop("faults", []))
    )
    try:
        config = RunConfig(
            name=data.pop("name"),
            monitoring=data.pop("monitoring"),
            seed=data.pop("seed", 0),
            services=services,
            containers=containers,
            monitoring_blocks=blocks,
            experiment=experiment,
            faults=faults,
        )
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc.args[0]!r}") from exc
    if data:
        raise ConfigError(f"unknown top-level keys: {sorted(data)}")
    return config


def _build_container(table: dict, path: str) -> ContainerSpecConfig:
    table = dict(table)
    if "run_mode" in table:
        table["run_mode"] = RunMode(table["run_mode"])
    return _build(ContainerSpecConfig, table, path)


def _build_monitoring(table: dict, path: str) -> MonitoringSpec:
    table = dict(table)
    probes = tuple(
        _build(ProbeSpec, t, f"{path}.probes[{i}]")
        for i, t in enumerate(table.pop("probes", []))
    )
    signal = None
    if "signal" in table:
        signal = _build(SignalSpec, table.pop("signal"), f"{path}.signal")
    block = _build(MonitoringSpec, table, path)
    return dataclasses.replace(block, probes=probes, signal=signal)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8")).validate()


def load_preset(name: str) -> RunConfig:
    path = PRESET_DIR / f"{name}.toml"
    if not path.exists():
        available = sorted(p.stem for p in PRESET_DIR.glob("*.toml"))
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return load_config(path)


# ------------------------------------------------------------ serialization


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, RunMode):
        return _toml_value(value.value)
    text = str(value)
    escaped = text.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _emit_table(obj, skip=()) -> List[str]:
    lines = []
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if value is None or value == f.default:
            continue
        lines.append(f"{f.name} = {_toml_value(value)}")
    return lines


def serialize_config(config: RunConfig) -> str:
    """Emit a RunConfig as TOML that parses back to an equal value."""
    out = [
        f"name = {_toml_value(config.name)}",
        f"monitoring = {_toml_value(config.monitoring)}",
        f"seed = {config.seed}",
        "",
        "[experiment]",
        *_emit_all(config.experiment),
    ]
    for service in config.services:
        out += ["", "[[services]]", *_emit_all(service)]
    for container in config.containers:
        out += ["", "[[containers]]", *_emit_all(container)]
    for block in config.monitoring_blocks:
        out += ["", "[[monitoring_blocks]]", *_emit_table(block, skip=("probes", "signal"))]
        if block.signal is not None:
            out += ["", "[monitoring_blocks.signal]", *_emit_all(block.signal)]
        for probe in block.probes:
            out += ["", "[[monitoring_blocks.probes]]", *_emit_all(probe)]
    for fault in config.faults:
        out += ["", "[[faults]]", *_emit_all(fault)]
    return "\n".join(out) + "\n"


def _emit_all(obj) -> List[str]:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {_toml_value(value)}")
    return lines
