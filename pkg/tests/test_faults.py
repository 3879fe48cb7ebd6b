"""Fault plan validation and injection timing."""

from __future__ import annotations

import time

import pytest

from sentinel.errors import ConfigError
from sentinel.faults import FaultEntry, FaultInjector, FaultKind, FaultPlan
from sentinel.util import mono, pick_free_port
from tests.test_mockservice import http_get, spawn_mock


class TestPlanValidation:
    def test_offsets_must_be_sorted(self):
        with pytest.raises(ConfigError):
            FaultPlan(
                entries=(
                    FaultEntry(5.0, FaultKind.KILL_HANDLER, "a"),
                    FaultEntry(1.0, FaultKind.LATENCY, "a", latency_ms=100),
                )
            )

    def test_negative_offset_rejected(self):
        with pytest.raises(ConfigError):
            FaultEntry(-1.0, FaultKind.KILL_HANDLER, "a")

    def test_unknown_target_rejected(self):
        plan = FaultPlan(entries=(FaultEntry(0.0, FaultKind.KILL_HANDLER, "ghost"),))
        with pytest.raises(ConfigError):
            plan.validate_targets(["a", "b"])
        plan.validate_targets(["ghost"])


class TestInjection:
    def test_latency_fault_fires_on_time(self, tmp_path):
        proc, port, _ = spawn_mock(tmp_path)
        try:
            plan = FaultPlan(
                entries=(FaultEntry(0.4, FaultKind.LATENCY, "mock-1", latency_ms=300),)
            )
            injected = []
            injector = FaultInjector(
                plan, resolve=lambda t: ("127.0.0.1", port), log=injected.append
            )
            start = mono()
            injector.start(start)
            injector.join(timeout=3.0)
            assert len(injected) == 1
            record = injected[0]
            assert record["ok"] is True
            assert abs(record["realized_s"] - 0.4) <= 0.1
            started = time.monotonic()
            http_get(port, "/health", timeout=1.0)
            assert time.monotonic() - started >= 0.25
        finally:
            proc.kill()
            proc.wait()

    def test_dead_target_logged_as_noop(self):
        plan = FaultPlan(entries=(FaultEntry(0.0, FaultKind.KILL_HANDLER, "gone"),))
        injected = []
        injector = FaultInjector(
            plan, resolve=lambda t: ("127.0.0.1", pick_free_port()), log=injected.append
        )
        injector.start(mono())
        injector.join(timeout=3.0)
        assert injected[0]["ok"] is False
        assert "no-op" in injected[0]["detail"]

    def test_unresolved_target_logged_as_noop(self):
        plan = FaultPlan(entries=(FaultEntry(0.0, FaultKind.DEPENDENCY_DOWN, "dep"),))
        injected = []
        injector = FaultInjector(plan, resolve=lambda t: None, log=injected.append)
        injector.start(mono())
        injector.join(timeout=3.0)
        assert injected[0]["ok"] is False

    def test_offset_override_and_replay_determinism(self, tmp_path):
        proc, port, _ = spawn_mock(tmp_path)
        try:
            plan = FaultPlan(
                entries=(FaultEntry(1.0, FaultKind.LATENCY, "mock-1", latency_ms=0),)
            )
            realized = []
            for _ in range(2):
                injected = []
                injector = FaultInjector(
                    plan,
                    resolve=lambda t: ("127.0.0.1", port),
                    log=injected.append,
                    offset_overrides={0: 0.3},
                )
                injector.start(mono())
                injector.join(timeout=3.0)
                realized.append(injected[0]["realized_s"])
            assert all(abs(r - 0.3) <= 0.1 for r in realized)
            assert abs(realized[0] - realized[1]) <= 0.2
        finally:
            proc.kill()
            proc.wait()

    def test_cancel_stops_pending_entries(self):
        plan = FaultPlan(entries=(FaultEntry(5.0, FaultKind.KILL_HANDLER, "a"),))
        injected = []
        injector = FaultInjector(plan, resolve=lambda t: None, log=injected.append)
        injector.start(mono())
        injector.cancel()
        injector.join(timeout=2.0)
        assert injected == []
