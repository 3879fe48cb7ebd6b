"""State machine tests: counters, thresholds, policies, backoff, gating."""

from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from sentinel.errors import ConfigError
from sentinel.state import (
    Action,
    ContainerStatus,
    MonitoringPolicy,
    Phase,
    PolicyVariant,
    ProbeConfig,
    ProbeKind,
    ProbeOutcome,
    compute_backoff_delay,
    find_probe,
    first_probe_due,
    initial_status,
    on_runtime_exit,
    record_probe_result,
    status_after_restart,
    validate_probe_set,
)

DELAYED = MonitoringPolicy(PolicyVariant.DELAYED_PROBES)
SIGNAL = MonitoringPolicy(PolicyVariant.SIGNAL_BASED)
CONFLATED = MonitoringPolicy(PolicyVariant.CONFLATED)


def liveness_config(threshold=3):
    return ProbeConfig(
        kind=ProbeKind.LIVENESS, interval=1.0, timeout=0.5, failure_threshold=threshold
    )


def readiness_config(success=1, failure=3):
    return ProbeConfig(
        kind=ProbeKind.READINESS,
        interval=1.0,
        timeout=0.5,
        success_threshold=success,
        failure_threshold=failure,
    )


def startup_config(success=1, failure=3):
    return ProbeConfig(
        kind=ProbeKind.STARTUP,
        interval=1.0,
        timeout=0.5,
        success_threshold=success,
        failure_threshold=failure,
    )


def run_liveness_sequence(outcomes, threshold, policy=DELAYED, start_ms=0, step_ms=1000):
    """Feed S/F outcomes through the machine, return emission indices."""
    config = liveness_config(threshold)
    status = initial_status(has_startup_probe=False)
    emitted = []
    for i, mark in enumerate(outcomes):
        outcome = ProbeOutcome.SUCCESS if mark == "S" else ProbeOutcome.FAILURE
        status, action = record_probe_result(
            status, ProbeKind.LIVENESS, outcome, config, policy,
            now_ms=start_ms + i * step_ms, container_start_ms=start_ms,
        )
        if action == Action.MARK_UNHEALTHY:
            emitted.append(i)
    return emitted, status


def brute_force_unhealthy_index(outcomes, threshold):
    """Independent scan: first index where a failure run reaches the threshold."""
    run = 0
    for i, mark in enumerate(outcomes):
        run = run + 1 if mark == "F" else 0
        if run == threshold:
            return i
    return None


class TestLivenessThreshold:
    def test_spec_trace(self):
        emitted, _ = run_liveness_sequence("SFFSFFF", threshold=3)
        assert emitted == [6]

    def test_success_resets_failures(self):
        emitted, _ = run_liveness_sequence("FFSFFSFF", threshold=3)
        assert emitted == []

    def test_exhaustive_vs_brute_force(self):
        for length in range(1, 11):
            for outcomes in itertools.product("SF", repeat=length):
                emitted, _ = run_liveness_sequence(outcomes, threshold=3)
                expected = brute_force_unhealthy_index(outcomes, 3)
                assert emitted == ([] if expected is None else [expected]), outcomes

    @given(
        outcomes=st.text(alphabet="SF", min_size=1, max_size=30),
        threshold=st.integers(min_value=1, max_value=5),
    )
    def test_random_sequences_vs_brute_force(self, outcomes, threshold):
        emitted, _ = run_liveness_sequence(outcomes, threshold)
        expected = brute_force_unhealthy_index(outcomes, threshold)
        assert emitted == ([] if expected is None else [expected])

    def test_signal_based_never_restarts_from_probes(self):
        for length in range(1, 9):
            for outcomes in itertools.product("SF", repeat=length):
                emitted, _ = run_liveness_sequence(outcomes, 2, policy=SIGNAL)
                assert emitted == []

    def test_unhealthy_status_flags(self):
        _, status = run_liveness_sequence("FFF", threshold=3)
        assert not status.healthy
        assert not status.ready
        assert status.phase == Phase.RESTART_QUEUED


class TestReadiness:
    def test_ready_on_single_success(self):
        status = initial_status(has_startup_probe=False)
        status, action = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, readiness_config(), DELAYED, 0
        )
        assert action == Action.MARK_READY
        assert status.ready

    def test_ready_is_idempotent(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config()
        status, _ = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, config, DELAYED, 0
        )
        status, action = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, config, DELAYED, 1000
        )
        assert action == Action.NONE

    def test_unready_after_failure_threshold(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config(failure=3)
        status, _ = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, config, DELAYED, 0
        )
        actions = []
        for i in range(3):
            status, action = record_probe_result(
                status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, DELAYED, 1000 * i
            )
            actions.append(action)
        assert actions == [Action.NONE, Action.NONE, Action.MARK_UNREADY]
        assert not status.ready
        assert status.healthy

    def test_success_threshold_above_one(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config(success=2)
        status, first = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, config, DELAYED, 0
        )
        status, second = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, config, DELAYED, 1000
        )
        assert first == Action.NONE
        assert second == Action.MARK_READY


class TestStartupGating:
    def test_started_on_startup_success(self):
        status = initial_status(has_startup_probe=True)
        assert not status.started
        status, action = record_probe_result(
            status, ProbeKind.STARTUP, ProbeOutcome.SUCCESS, startup_config(), DELAYED, 0
        )
        assert action == Action.MARK_STARTED
        assert status.started
        assert status.phase == Phase.RUNNING

    def test_startup_failure_keeps_ready_false(self):
        status = initial_status(has_startup_probe=True)
        status, action = record_probe_result(
            status, ProbeKind.STARTUP, ProbeOutcome.FAILURE, startup_config(), DELAYED, 0
        )
        assert action == Action.NONE
        assert not status.ready

    def test_startup_failure_threshold_restarts(self):
        status = initial_status(has_startup_probe=True)
        config = startup_config(failure=2)
        status, _ = record_probe_result(
            status, ProbeKind.STARTUP, ProbeOutcome.FAILURE, config, DELAYED, 0
        )
        status, action = record_probe_result(
            status, ProbeKind.STARTUP, ProbeOutcome.FAILURE, config, DELAYED, 1000
        )
        assert action == Action.MARK_UNHEALTHY

    def test_gated_result_rejected_before_started(self):
        status = initial_status(has_startup_probe=True)
        with pytest.raises(ConfigError):
            record_probe_result(
                status, ProbeKind.READINESS, ProbeOutcome.SUCCESS, readiness_config(), DELAYED, 0
            )

    def test_kind_mismatch_rejected(self):
        status = initial_status(has_startup_probe=False)
        with pytest.raises(ConfigError):
            record_probe_result(
                status, ProbeKind.LIVENESS, ProbeOutcome.SUCCESS, readiness_config(), DELAYED, 0
            )


class TestConflatedPolicy:
    def test_any_probe_failure_threshold_restarts(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config(failure=2)
        status, _ = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, CONFLATED, 0
        )
        status, action = record_probe_result(
            status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, CONFLATED, 1000
        )
        assert action == Action.MARK_UNHEALTHY

    def test_probe_success_marks_ready(self):
        status = initial_status(has_startup_probe=False)
        status, action = record_probe_result(
            status, ProbeKind.LIVENESS, ProbeOutcome.SUCCESS, liveness_config(), CONFLATED, 0
        )
        assert action == Action.MARK_READY


class TestTolerateFailures:
    POLICY = MonitoringPolicy(PolicyVariant.TOLERATE_FAILURES, tolerate_window=10.0)

    def test_suppressed_inside_window_counters_advance(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config(failure=3)
        for i in range(3):
            status, action = record_probe_result(
                status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, self.POLICY,
                now_ms=i * 1000, container_start_ms=0,
            )
            assert action != Action.MARK_UNHEALTHY
        assert status.consecutive_failures[ProbeKind.READINESS] == 3

    def test_counters_reset_at_window_expiry_then_restart(self):
        status = initial_status(has_startup_probe=False)
        config = readiness_config(failure=3)
        # 12 in-window failures, then post-window failures restart from zero
        for i in range(12):
            status, _ = record_probe_result(
                status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, self.POLICY,
                now_ms=i * 800, container_start_ms=0,
            )
        actions = []
        for i in range(3):
            status, action = record_probe_result(
                status, ProbeKind.READINESS, ProbeOutcome.FAILURE, config, self.POLICY,
                now_ms=10_000 + i * 1000, container_start_ms=0,
            )
            actions.append(action)
        assert actions == [Action.NONE, Action.NONE, Action.MARK_UNHEALTHY]

    def test_window_required(self):
        with pytest.raises(ConfigError):
            MonitoringPolicy(PolicyVariant.TOLERATE_FAILURES, tolerate_window=0.0)
        with pytest.raises(ConfigError):
            MonitoringPolicy(PolicyVariant.DELAYED_PROBES, tolerate_window=5.0)


class TestRuntimeExit:
    def test_running_exit_queues_restart(self):
        status = initial_status(has_startup_probe=False)
        status, action = on_runtime_exit(status)
        assert action == Action.MARK_UNHEALTHY
        assert status.phase == Phase.RESTART_QUEUED
        assert not status.healthy and not status.ready

    def test_double_exit_idempotent(self):
        status = initial_status(has_startup_probe=False)
        status, _ = on_runtime_exit(status)
        again, action = on_runtime_exit(status)
        assert action == Action.NONE
        assert again == status

    def test_exit_during_every_pending_phase_suppressed(self):
        for phase in (Phase.TERMINATING, Phase.RESTART_QUEUED, Phase.BACKOFF_WAIT, Phase.EXITED):
            status = ContainerStatus(started=True, ready=False, phase=phase)
            after, action = on_runtime_exit(status)
            assert action == Action.NONE
            assert after == status


class TestBackoff:
    @pytest.mark.parametrize(
        "count,expected",
        [(1, 0.0), (2, 0.0), (3, 10.0), (4, 20.0), (5, 40.0), (7, 160.0), (9, 300.0), (30, 300.0)],
    )
    def test_values(self, count, expected):
        assert compute_backoff_delay(count) == expected

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            compute_backoff_delay(0)

    @given(st.integers(min_value=1, max_value=100))
    def test_nondecreasing_and_capped(self, count):
        assert compute_backoff_delay(count) <= compute_backoff_delay(count + 1) <= 300.0


class TestFirstProbeDue:
    def test_delayed_probes_honor_delay(self):
        config = ProbeConfig(kind=ProbeKind.READINESS, interval=3.0, timeout=0.5, initial_delay=180.0)
        assert first_probe_due(config, DELAYED, 0) == 180_000

    def test_tolerate_failures_probe_immediately(self):
        config = ProbeConfig(kind=ProbeKind.READINESS, interval=1.0, timeout=0.5, initial_delay=60.0)
        policy = MonitoringPolicy(PolicyVariant.TOLERATE_FAILURES, tolerate_window=60.0)
        assert first_probe_due(config, policy, 0) == 0
        assert first_probe_due(config, CONFLATED, 5000) == 5000

    def test_zero_delay(self):
        config = ProbeConfig(kind=ProbeKind.READINESS, interval=1.0, timeout=0.5, initial_delay=0.0)
        assert first_probe_due(config, DELAYED, 1234) == 1234


class TestValidation:
    def test_interval_floor(self):
        with pytest.raises(ConfigError):
            ProbeConfig(kind=ProbeKind.LIVENESS, interval=0.5, timeout=0.2)

    def test_timeout_below_interval(self):
        with pytest.raises(ConfigError):
            ProbeConfig(kind=ProbeKind.LIVENESS, interval=1.0, timeout=1.0)

    def test_liveness_success_threshold_fixed(self):
        with pytest.raises(ConfigError):
            ProbeConfig(kind=ProbeKind.LIVENESS, interval=1.0, timeout=0.5, success_threshold=2)

    def test_duplicate_kind_rejected(self):
        with pytest.raises(ConfigError):
            validate_probe_set((liveness_config(), liveness_config()), DELAYED)

    def test_startup_rejected_under_conflating_policies(self):
        with pytest.raises(ConfigError):
            validate_probe_set((startup_config(),), CONFLATED)

    def test_find_probe(self):
        configs = (liveness_config(), readiness_config())
        assert find_probe(configs, ProbeKind.LIVENESS).kind == ProbeKind.LIVENESS
        assert find_probe(configs, ProbeKind.STARTUP) is None

    def test_ready_requires_started(self):
        with pytest.raises(ValueError):
            ContainerStatus(started=False, ready=True)

    def test_restart_resets_counters_and_increments_count(self):
        _, status = run_liveness_sequence("FFF", threshold=3)
        fresh = status_after_restart(status, has_startup_probe=False)
        assert fresh.restart_count == 1
        assert fresh.healthy and not fresh.ready
        assert fresh.consecutive_failures[ProbeKind.LIVENESS] == 0


def test_ready_false_whenever_started_false_over_random_walks():
    # exhaustive short walks over mixed probe kinds with a startup probe
    configs = {
        ProbeKind.STARTUP: startup_config(failure=9),
        ProbeKind.READINESS: readiness_config(failure=9),
        ProbeKind.LIVENESS: liveness_config(threshold=9),
    }
    for walk in itertools.product("sSrRlL", repeat=5):
        status = initial_status(has_startup_probe=True)
        for i, step in enumerate(walk):
            kind = {"s": ProbeKind.STARTUP, "r": ProbeKind.READINESS, "l": ProbeKind.LIVENESS}[
                step.lower()
            ]
            outcome = ProbeOutcome.SUCCESS if step.isupper() else ProbeOutcome.FAILURE
            try:
                status, _ = record_probe_result(
                    status, kind, outcome, configs[kind], DELAYED, i * 1000
                )
            except ConfigError:
                continue  # gated result, machine refused it
            assert status.started or not status.ready
