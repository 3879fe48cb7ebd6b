"""Measurements over a run's event log.

Every quantity the harness reports (detection times, availability,
per-second time series, the repetition summary, model-validation rows) is a
pure function of one ``events.ndjson`` file, so replaying a stored log
reproduces the live run's outputs byte for byte.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ReplayError
from .events import LifecycleEvent, LifecycleEventType, lifecycle_events, read_events
from .model import (
    infer_probe_latency,
    predict_failure_pcm,
    predict_failure_scm,
    predict_readiness_pcm,
    predict_readiness_scm,
)

TIMESERIES_HEADER = "second,success,timeout,http500,refused,ready_instances"
SUMMARY_HEADER = (
    "rep,total_requests,success,failed,timeout,http500,refused,"
    "time_to_queue_s,time_to_restart_s,time_to_ready_s,"
    "readiness_detection_s,availability_ready_s,restarts,note"
)
VALIDATION_HEADER = "quantity,predicted_s,measured_s,abs_error_s"


@dataclass
class RunRecords:
    """An event log split by record kind."""

    meta: dict
    lifecycle: List[LifecycleEvent]
    probes: List[dict]
    signals: List[dict]
    injections: List[dict]
    metrics: List[dict]
    abort_reason: Optional[str] = None


@dataclass
class FailureDetection:
    """Detection timings for one injected handler kill."""

    target: str
    injected_at_ms: int
    time_to_queue_s: Optional[float] = None
    time_to_restart_s: Optional[float] = None
    time_to_ready_s: Optional[float] = None
    gaps: List[str] = field(default_factory=list)


@dataclass
class RepetitionSummary:
    repetition: int
    total_requests: int
    success: int
    timeout: int
    http500: int
    refused: int
    time_to_queue_s: Optional[float]
    time_to_restart_s: Optional[float]
    time_to_ready_s: Optional[float]
    readiness_detection_s: Optional[float]
    availability_ready_s: float
    restarts: int
    note: str = ""

    @property
    def failed(self) -> int:
        return self.timeout + self.http500 + self.refused


def load_run_records(path: str | Path) -> RunRecords:
    records = read_events(path)
    meta = {}
    abort_reason = None
    probes, signals, injections, metrics = [], [], [], []
    for record in records:
        kind = record.get("record")
        if kind == "meta":
            meta = record
        elif kind == "probe":
            probes.append(record)
        elif kind == "signal":
            signals.append(record)
        elif kind == "injection":
            injections.append(record)
        elif kind == "metrics":
            metrics.append(record)
        elif kind == "abort":
            abort_reason = record.get("reason", "aborted")
    if not meta:
        raise ReplayError(f"{path}: no meta record; not a harness event log")
    lifecycle = sorted(lifecycle_events(records), key=lambda e: e.timestamp_ms)
    metrics.sort(key=lambda m: m["second"])
    return RunRecords(
        meta=meta,
        lifecycle=lifecycle,
        probes=probes,
        signals=signals,
        injections=injections,
        metrics=metrics,
        abort_reason=abort_reason,
    )


# --------------------------------------------------------------- detections


def measure_detection_times(run: RunRecords) -> List[FailureDetection]:
    """Queue/restart/ready delays after each injected handler kill.

    Missing follow-up events are reported as named gaps, never silently
    dropped.
    """
    detections = []
    for injection in run.injections:
        if injection.get("kind") != "kill_handler" or not injection.get("ok"):
            continue
        target = injection["target"]
        t0 = injection["timestamp_ms"]
        detection = FailureDetection(target=target, injected_at_ms=t0)
        queued = _first_event(run.lifecycle, target, LifecycleEventType.RESTART_QUEUED, t0)
        if queued is None:
            detection.gaps.append("restart_queued missing")
            detections.append(detection)
            continue
        detection.time_to_queue_s = (queued.timestamp_ms - t0) / 1000.0
        restarted = _first_event(
            run.lifecycle, target, LifecycleEventType.RESTARTED, queued.timestamp_ms
        )
        if restarted is None:
            detection.gaps.append("restarted missing")
            detections.append(detection)
            continue
        detection.time_to_restart_s = (restarted.timestamp_ms - t0) / 1000.0
        ready = _first_event(
            run.lifecycle, target, LifecycleEventType.READY, restarted.timestamp_ms
        )
        if ready is None:
            detection.gaps.append("ready missing")
        else:
            detection.time_to_ready_s = (ready.timestamp_ms - t0) / 1000.0
        detections.append(detection)
    return detections


def _first_event(
    lifecycle: Sequence[LifecycleEvent],
    container_id: str,
    kind: LifecycleEventType,
    not_before_ms: int,
) -> Optional[LifecycleEvent]:
    for event in lifecycle:
        if (
            event.container_id == container_id
            and event.event == kind
            and event.timestamp_ms >= not_before_ms
        ):
            return event
    return None


# ------------------------------------------------------------- availability


def ready_intervals(
    lifecycle: Sequence[LifecycleEvent],
) -> Dict[str, List[Tuple[int, Optional[int]]]]:
    """Per-container [ready, unready) interval lists from the event stream."""
    intervals: Dict[str, List[Tuple[int, Optional[int]]]] = {}
    open_since: Dict[str, int] = {}
    for event in lifecycle:
        cid = event.container_id
        if event.event == LifecycleEventType.READY:
            open_since.setdefault(cid, event.timestamp_ms)
        elif event.event in (
            LifecycleEventType.UNREADY,
            LifecycleEventType.UNHEALTHY,
            LifecycleEventType.EXITED,
        ):
            started_at = open_since.pop(cid, None)
            if started_at is not None:
                intervals.setdefault(cid, []).append((started_at, event.timestamp_ms))
    for cid, started_at in open_since.items():
        intervals.setdefault(cid, []).append((started_at, None))
    return intervals


def ready_count_at(
    intervals: Dict[str, List[Tuple[int, Optional[int]]]], at_ms: int
) -> int:
    count = 0
    for spans in intervals.values():
        for start, end in spans:
            if start <= at_ms and (end is None or at_ms < end):
                count += 1
                break
    return count


def compute_availability(
    run: RunRecords,
    window_start_ms: Optional[int] = None,
    window_s: Optional[float] = None,
) -> int:
    """Ready-instance-seconds: Ready count sampled at each whole second."""
    start = window_start_ms if window_start_ms is not None else run.meta["measurement_start_ms"]
    length = window_s if window_s is not None else run.meta["window_s"]
    intervals = ready_intervals(run.lifecycle)
    return sum(
        ready_count_at(intervals, start + second * 1000)
        for second in range(int(length))
    )


# ---------------------------------------------------------------- latencies


def measured_probe_latency(run: RunRecords, kind: str) -> Optional[float]:
    """Median probe latency in seconds for one probe kind.

    For liveness, failing probes between an injection and the queued restart
    are preferred: those are the probes whose latency the detection-time
    model actually contains.
    """
    rows = [p for p in run.probes if p["kind"] == kind]
    if not rows:
        return None
    if kind == "liveness":
        windows = []
        for detection in measure_detection_times(run):
            if detection.time_to_queue_s is not None:
                end = detection.injected_at_ms + int(detection.time_to_queue_s * 1000)
                windows.append((detection.target, detection.injected_at_ms, end))
        detecting = [
            p
            for p in rows
            if p["outcome"] == "failure"
            and any(
                p["container_id"] == target and start <= p["completed_at_ms"] <= end + 100
                for target, start, end in windows
            )
        ]
        if detecting:
            rows = detecting
    latencies = [(p["completed_at_ms"] - p["sent_at_ms"]) / 1000.0 for p in rows]
    return statistics.median(latencies)


def measured_signal_latency(run: RunRecords) -> Optional[float]:
    latencies = [
        max(0, s["received_at_ms"] - s["emitted_at_ms"]) / 1000.0
        for s in run.signals
        if s["event"] in ("READY", "UNHEALTHY")
    ]
    return statistics.median(latencies) if latencies else None


# ------------------------------------------------------------------ summary


def summarize_repetition(run: RunRecords) -> RepetitionSummary:
    success = sum(m["success"] for m in run.metrics)
    timeout = sum(m["timeout"] for m in run.metrics)
    http500 = sum(m["http500"] for m in run.metrics)
    refused = sum(m["refused"] for m in run.metrics)
    detections = measure_detection_times(run)
    queue_times = [d.time_to_queue_s for d in detections if d.time_to_queue_s is not None]
    restart_times = [d.time_to_restart_s for d in detections if d.time_to_restart_s is not None]
    ready_times = [d.time_to_ready_s for d in detections if d.time_to_ready_s is not None]
    restarts = sum(
        1 for e in run.lifecycle if e.event == LifecycleEventType.RESTARTED
    )
    readiness_detection = (
        timeout * run.meta["request_timeout_s"] if run.metrics else None
    )
    gaps = [f"{d.target}: {'; '.join(d.gaps)}" for d in detections if d.gaps]
    if run.abort_reason is not None:
        gaps.insert(0, f"excluded: {run.abort_reason}")
    return RepetitionSummary(
        repetition=run.meta.get("repetition", 1),
        total_requests=success + timeout + http500 + refused,
        success=success,
        timeout=timeout,
        http500=http500,
        refused=refused,
        time_to_queue_s=_mean_or_none(queue_times),
        time_to_restart_s=_mean_or_none(restart_times),
        time_to_ready_s=_mean_or_none(ready_times),
        readiness_detection_s=readiness_detection,
        availability_ready_s=compute_availability(run),
        restarts=restarts,
        note="; ".join(gaps),
    )


def _mean_or_none(values: Sequence[float]) -> Optional[float]:
    return statistics.fmean(values) if values else None


# -------------------------------------------------------------- time series


def timeseries_rows(run: RunRecords) -> List[dict]:
    start = run.meta["measurement_start_ms"]
    window = int(run.meta["window_s"])
    by_second = {m["second"]: m for m in run.metrics}
    intervals = ready_intervals(run.lifecycle)
    rows = []
    for second in range(window):
        bucket = by_second.get(second, {})
        rows.append(
            {
                "second": second,
                "success": bucket.get("success", 0),
                "timeout": bucket.get("timeout", 0),
                "http500": bucket.get("http500", 0),
                "refused": bucket.get("refused", 0),
                "ready_instances": ready_count_at(intervals, start + second * 1000),
            }
        )
    return rows


# --------------------------------------------------------------- validation


def first_readiness_probe_offset(run: RunRecords, target: str) -> Optional[float]:
    """Seconds from the first restart to the first readiness probe that ran."""
    restarted = _first_event(run.lifecycle, target, LifecycleEventType.RESTARTED, 0)
    if restarted is None:
        return None
    for probe in sorted(run.probes, key=lambda p: p["scheduled_at_ms"]):
        if (
            probe["container_id"] == target
            and probe["kind"] == "readiness"
            and probe["scheduled_at_ms"] >= restarted.timestamp_ms
        ):
            return (probe["scheduled_at_ms"] - restarted.timestamp_ms) / 1000.0
    return None


def validation_rows(run: RunRecords) -> List[Tuple[str, float, float]]:
    """(quantity, predicted_s, measured_s) rows comparing models to the run.

    Detection times are measured from fault injection, so the readiness
    predictions are offset by the measured restart time: the container-ready
    and monitor-start clocks both restart with the new generation.
    """
    rows: List[Tuple[str, float, float]] = []
    meta = run.meta
    detections = measure_detection_times(run)
    queue_times = [d.time_to_queue_s for d in detections if d.time_to_queue_s is not None]
    restart_times = [d.time_to_restart_s for d in detections if d.time_to_restart_s is not None]
    ready_times = [d.time_to_ready_s for d in detections if d.time_to_ready_s is not None]
    mean_queue = _mean_or_none(queue_times)
    mean_ready = _mean_or_none(ready_times)
    restart_offset = _mean_or_none(restart_times) or 0.0

    signal_latency = measured_signal_latency(run)
    liveness = meta.get("liveness")
    readiness = meta.get("readiness")

    if meta.get("policy") == "signal_based" and mean_queue is not None and signal_latency is not None:
        rows.append(("failure_detection_scm", predict_failure_scm(signal_latency), mean_queue))
    if liveness and mean_queue is not None:
        latency = measured_probe_latency(run, "liveness") or 0.0
        predicted = predict_failure_pcm(
            liveness["probes_required"], liveness["interval_s"], latency
        )
        rows.append(("failure_detection_pcm", predicted, mean_queue))
        try:
            inferred = infer_probe_latency(
                mean_queue, liveness["probes_required"], liveness["interval_s"]
            )
            rows.append(("inferred_probe_latency", latency, inferred))
        except Exception:
            pass  # measurement below the model floor; nothing to infer
    if mean_ready is not None:
        ready_time = meta.get("init_time_s", 0.0)
        if meta.get("policy") == "signal_based" and signal_latency is not None:
            predicted = restart_offset + predict_readiness_scm(
                ready_time, meta.get("monitor_start_delay_s", 0.0), signal_latency
            )
            rows.append(("readiness_detection_scm", predicted, mean_ready))
        elif readiness:
            latency = measured_probe_latency(run, "readiness") or 0.0
            measured_first = None
            for detection in detections:
                measured_first = first_readiness_probe_offset(run, detection.target)
                if measured_first is not None:
                    break
            first_probe = (
                measured_first
                if measured_first is not None
                else readiness["initial_delay_s"]
            )
            predicted = restart_offset + predict_readiness_pcm(
                ready_time,
                first_probe,
                readiness["probes_required"],
                readiness["interval_s"],
                latency,
            )
            rows.append(("readiness_detection_pcm", predicted, mean_ready))
    return rows


# -------------------------------------------------------------- CSV writers


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:.3f}"


def write_timeseries_csv(path: str | Path, rows: List[dict]) -> None:
    lines = [TIMESERIES_HEADER]
    for row in rows:
        lines.append(
            f"{row['second']},{row['success']},{row['timeout']},"
            f"{row['http500']},{row['refused']},{row['ready_instances']}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def summary_line(label: str, summary: RepetitionSummary) -> str:
    return ",".join(
        [
            label,
            str(summary.total_requests),
            str(summary.success),
            str(summary.failed),
            str(summary.timeout),
            str(summary.http500),
            str(summary.refused),
            _fmt(summary.time_to_queue_s),
            _fmt(summary.time_to_restart_s),
            _fmt(summary.time_to_ready_s),
            _fmt(summary.readiness_detection_s),
            _fmt(float(summary.availability_ready_s)),
            str(summary.restarts),
            summary.note.replace(",", ";"),
        ]
    )


def write_summary_csv(path: str | Path, summaries: List[RepetitionSummary]) -> None:
    lines = [SUMMARY_HEADER]
    for summary in summaries:
        lines.append(summary_line(str(summary.repetition), summary))
    included = [s for s in summaries if not s.note.startswith("excluded")]
    if included:
        lines.append(_aggregate_line("mean", included, statistics.fmean))
        lines.append(_aggregate_line("stddev", included, _sample_stddev))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sample_stddev(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) >= 2 else 0.0


def _aggregate_line(label: str, summaries: List[RepetitionSummary], func) -> str:
    def over_int(getter) -> str:
        return f"{func([float(getter(s)) for s in summaries]):.3f}"

    def over_optional(getter) -> str:
        values = [getter(s) for s in summaries if getter(s) is not None]
        return f"{func(values):.3f}" if values else ""

    return ",".join(
        [
            label,
            over_int(lambda s: s.total_requests),
            over_int(lambda s: s.success),
            over_int(lambda s: s.failed),
            over_int(lambda s: s.timeout),
            over_int(lambda s: s.http500),
            over_int(lambda s: s.refused),
            over_optional(lambda s: s.time_to_queue_s),
            over_optional(lambda s: s.time_to_restart_s),
            over_optional(lambda s: s.time_to_ready_s),
            over_optional(lambda s: s.readiness_detection_s),
            over_int(lambda s: s.availability_ready_s),
            over_int(lambda s: s.restarts),
            "",
        ]
    )


def write_validation_csv(path: str | Path, rows: List[Tuple[str, float, float]]) -> None:
    lines = [VALIDATION_HEADER]
    for quantity, predicted, measured in rows:
        lines.append(
            f"{quantity},{predicted:.3f},{measured:.3f},{abs(predicted - measured):.3f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- replay


def repetition_event_logs(rundir: str | Path) -> List[Path]:
    """Event logs of a run directory: rep-*/events.ndjson or the dir's own."""
    rundir = Path(rundir)
    reps = sorted(
        rundir.glob("rep-*/events.ndjson"),
        key=lambda p: int(p.parent.name.split("-")[1]),
    )
    if reps:
        return reps
    single = rundir / "events.ndjson"
    if single.exists():
        return [single]
    raise ReplayError(f"{rundir}: no events.ndjson found")


def check_terminal_events(run: RunRecords) -> List[str]:
    """Names of terminal records a truncated log is missing."""
    missing = []
    if not run.metrics:
        missing.append("metrics records")
    if run.meta.get("expected_seconds") is not None:
        seconds = {m["second"] for m in run.metrics}
        want = int(run.meta["expected_seconds"])
        if seconds and max(seconds) < want - 1:
            missing.append(f"metrics up to second {want - 1}")
    return missing


def replay_run(rundir: str | Path) -> Tuple[List[RepetitionSummary], List[Tuple[str, float, float]]]:
    """Recompute all per-repetition summaries and validation rows for a run."""
    summaries = []
    all_validation: List[Tuple[str, float, float]] = []
    for events_path in repetition_event_logs(rundir):
        run = load_run_records(events_path)
        summaries.append(summarize_repetition(run))
        for row in validation_rows(run):
            all_validation.append(row)
    return summaries, merge_validation(all_validation)


def merge_validation(
    rows: List[Tuple[str, float, float]]
) -> List[Tuple[str, float, float]]:
    """Mean the per-repetition validation rows per quantity, keeping order."""
    order: List[str] = []
    grouped: Dict[str, List[Tuple[float, float]]] = {}
    for quantity, predicted, measured in rows:
        if quantity not in grouped:
            order.append(quantity)
            grouped[quantity] = []
        grouped[quantity].append((predicted, measured))
    return [
        (
            quantity,
            statistics.fmean([p for p, _ in grouped[quantity]]),
            statistics.fmean([m for _, m in grouped[quantity]]),
        )
        for quantity in order
    ]
