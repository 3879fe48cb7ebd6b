"""Closed-form detection-time predictions for poll- and signal-based monitoring.

Signal-based monitoring (SCM) hears about a state change one signal latency
after it happens. Poll-based monitoring (PCM) waits, on average, half a probe
interval for the first failing probe plus a full interval for each additional
probe the policy requires, plus the probe latency itself. Readiness detection
additionally depends on when the container becomes able to serve and when
monitoring begins.

All durations are non-negative seconds; predictions are point estimates of
mean detection time.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InfeasibleMeasurement

__all__ = [
    "DetectionModelInput",
    "predict_failure_scm",
    "predict_failure_pcm",
    "predict_readiness_scm",
    "predict_readiness_pcm",
    "infer_probe_latency",
]


def _require_nonneg(name: str, value: float) -> float:
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return float(value)


def _require_pos_interval(name: str, value: float) -> float:
    if value <= 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return float(value)


def _require_probe_count(name: str, value: int) -> int:
    if value < 1 or int(value) != value:
        raise ValueError(f"{name} must be a positive integer, got {value}")
    return int(value)


def predict_failure_scm(signal_latency: float) -> float:
    """Mean time to detect container failure under signal-based monitoring.

    The container emits a signal as it fails, so detection lags failure by the
    signal latency alone.
    """
    return _require_nonneg("signal_latency", signal_latency)


def predict_failure_pcm(
    probes_required: int, probe_interval: float, probe_latency: float
) -> float:
    """Mean time to detect container failure under poll-based monitoring.

    A failure lands, on average, mid-interval; the detecting run then needs
    ``probes_required`` consecutive failing probes, so the mean detection time
    is ``(probes_required - 1/2) * probe_interval + probe_latency``.
    """
    n = _require_probe_count("probes_required", probes_required)
    interval = _require_pos_interval("probe_interval", probe_interval)
    latency = _require_nonneg("probe_latency", probe_latency)
    return (n - 0.5) * interval + latency


def predict_readiness_scm(
    ready_time: float, monitor_start_time: float, signal_latency: float
) -> float:
    """Mean time to detect readiness under signal-based monitoring.

    Detection waits for the later of the container becoming able to serve and
    the monitor starting to listen, then one signal latency more.
    """
    t_ready = _require_nonneg("ready_time", ready_time)
    t_monitor = _require_nonneg("monitor_start_time", monitor_start_time)
    latency = _require_nonneg("signal_latency", signal_latency)
    return max(t_ready, t_monitor) + latency


def predict_readiness_pcm(
    ready_time: float,
    first_probe_time: float,
    probes_required: int,
    probe_interval: float,
    probe_latency: float,
) -> float:
    """Mean time to detect readiness under poll-based monitoring.

    If the container is ready strictly before the first readiness probe, the
    first probe succeeds and ``probes_required - 1`` further probes complete
    detection. Otherwise readiness lands mid-interval, giving the same
    half-interval expectation as failure detection. The two cases deliberately
    disagree by half an interval at ``ready_time == first_probe_time``; the
    boundary belongs to the second case.
    """
    t_ready = _require_nonneg("ready_time", ready_time)
    t_probe = _require_nonneg("first_probe_time", first_probe_time)
    n = _require_probe_count("probes_required", probes_required)
    interval = _require_pos_interval("probe_interval", probe_interval)
    latency = _require_nonneg("probe_latency", probe_latency)
    if t_ready < t_probe:
        return t_probe + (n - 1) * interval + latency
    return t_ready + (n - 0.5) * interval + latency


def infer_probe_latency(
    measured_detection_time: float, probes_required: int, probe_interval: float
) -> float:
    """Back out the probe latency from a measured poll-based detection time.

    Inverts the failure-detection prediction: the interval term is subtracted
    from the measurement. Raises :class:`InfeasibleMeasurement` when the
    measurement is smaller than the interval term alone (no non-negative
    latency could explain it).
    """
    measured = _require_nonneg("measured_detection_time", measured_detection_time)
    n = _require_probe_count("probes_required", probes_required)
    interval = _require_pos_interval("probe_interval", probe_interval)
    floor = (n - 0.5) * interval
    if measured < floor:
        raise InfeasibleMeasurement(
            f"measured detection time {measured}s is below the minimum "
            f"{floor}s implied by {n} probes at {interval}s"
        )
    return measured - floor


@dataclass(frozen=True)
class DetectionModelInput:
    """The full symbol set for the detection-time predictions.

    Holds one consistent scenario: signal latency, per-kind probe latency,
    interval and required-probe count, the container ready time, the first
    readiness-probe time, and the monitor start time. Convenience wrappers
    evaluate each prediction from the stored values.
    """

    signal_latency: float = 0.0
    liveness_probe_latency: float = 0.0
    readiness_probe_latency: float = 0.0
    liveness_interval: float = 1.0
    readiness_interval: float = 1.0
    liveness_probes_required: int = 1
    readiness_probes_required: int = 1
    container_ready_time: float = 0.0
    first_probe_time: float = 0.0
    monitor_start_time: float = 0.0

    def __post_init__(self) -> None:
        _require_nonneg("signal_latency", self.signal_latency)
        _require_nonneg("liveness_probe_latency", self.liveness_probe_latency)
        _require_nonneg("readiness_probe_latency", self.readiness_probe_latency)
        _require_pos_interval("liveness_interval", self.liveness_interval)
        _require_pos_interval("readiness_interval", self.readiness_interval)
        _require_probe_count("liveness_probes_required", self.liveness_probes_required)
        _require_probe_count("readiness_probes_required", self.readiness_probes_required)
        _require_nonneg("container_ready_time", self.container_ready_time)
        _require_nonneg("first_probe_time", self.first_probe_time)
        _require_nonneg("monitor_start_time", self.monitor_start_time)

    def failure_scm(self) -> float:
        return predict_failure_scm(self.signal_latency)

    def failure_pcm(self) -> float:
        return predict_failure_pcm(
            self.liveness_probes_required,
            self.liveness_interval,
            self.liveness_probe_latency,
        )

    def readiness_scm(self) -> float:
        return predict_readiness_scm(
            self.container_ready_time, self.monitor_start_time, self.signal_latency
        )

    def readiness_pcm(self) -> float:
        return predict_readiness_pcm(
            self.container_ready_time,
            self.first_probe_time,
            self.readiness_probes_required,
            self.readiness_interval,
            self.readiness_probe_latency,
        )
