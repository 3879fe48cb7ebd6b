"""Signal engine tests: frames, log tailing, socket transport, dispatch."""

from __future__ import annotations

import socket
import threading
import time

import pytest

from sentinel.errors import ConfigError
from sentinel.signals import (
    LogWatcher,
    Signal,
    SignalEvent,
    SignalMonitorConfig,
    SocketListener,
    Transport,
    dispatch,
    format_frame,
    parse_frame,
    send_frame,
    watchdog_check,
)
from sentinel.state import Action, ContainerStatus, Phase, initial_status
from sentinel.util import wall_ms


def make_config(**kwargs):
    defaults = dict(
        ready_pattern="serving on",
        unhealthy_pattern="handler exited",
        transport=Transport.LOG_TAIL,
        log_poll_gap=0.01,
        monitor_start_delay=0.0,
    )
    defaults.update(kwargs)
    return SignalMonitorConfig(**defaults)


class SignalSink:
    def __init__(self):
        self.signals = []
        self._lock = threading.Lock()

    def __call__(self, signal: Signal):
        with self._lock:
            self.signals.append(signal)

    def wait_for(self, count, timeout=3.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if len(self.signals) >= count:
                    return list(self.signals)
            time.sleep(0.01)
        with self._lock:
            return list(self.signals)


class TestFrames:
    def test_roundtrip(self):
        line = format_frame("cat-1", SignalEvent.READY, 1700000000000)
        assert line == "v1 cat-1 READY 1700000000000\n"
        assert parse_frame(line) == ("cat-1", SignalEvent.READY, 1700000000000)

    @pytest.mark.parametrize(
        "frame",
        [
            "v1 cat-1 BOGUS 0\n",
            "v2 cat-1 READY 0\n",
            "v1 bad!id READY 0\n",
            "v1 cat-1 READY notatime\n",
            "v1 cat-1 READY\n",
            "",
        ],
    )
    def test_malformed(self, frame):
        with pytest.raises(ValueError):
            parse_frame(frame)


class TestConfigValidation:
    def test_patterns_must_differ(self):
        with pytest.raises(ConfigError):
            SignalMonitorConfig(ready_pattern="x", unhealthy_pattern="x")

    def test_patterns_must_be_nonempty(self):
        with pytest.raises(ConfigError):
            SignalMonitorConfig(ready_pattern="", unhealthy_pattern="y")

    def test_default_monitor_delay_by_transport(self):
        log_cfg = SignalMonitorConfig(ready_pattern="a", unhealthy_pattern="b",
                                      transport=Transport.LOG_TAIL)
        sock_cfg = SignalMonitorConfig(ready_pattern="a", unhealthy_pattern="b",
                                       transport=Transport.SOCKET)
        assert log_cfg.monitor_start_delay == pytest.approx(2.8)
        assert sock_cfg.monitor_start_delay == 0.0


class TestLogWatcher:
    def test_matches_patterns_in_order(self, tmp_path):
        log = tmp_path / "cat-1.0.log"
        log.write_text("")
        sink = SignalSink()
        watcher = LogWatcher("cat-1", log, make_config(), sink)
        watcher.start()
        with open(log, "a") as f:
            f.write(f"{wall_ms()} serving on :8080\n")
            f.flush()
            f.write("some noise line\n")
            f.write(f"{wall_ms()} handler exited; hanging\n")
        signals = sink.wait_for(2)
        watcher.cancel()
        watcher.join()
        assert [s.event for s in signals] == [SignalEvent.READY, SignalEvent.UNHEALTHY]
        assert all(s.transport == Transport.LOG_TAIL for s in signals)

    def test_unhealthy_wins_on_one_line(self, tmp_path):
        log = tmp_path / "c.0.log"
        log.write_text("serving on :80 but handler exited\n")
        sink = SignalSink()
        watcher = LogWatcher("c", log, make_config(), sink)
        watcher.start()
        signals = sink.wait_for(1)
        watcher.cancel()
        watcher.join()
        assert [s.event for s in signals] == [SignalEvent.UNHEALTHY]

    def test_emitted_stamp_parsed_from_line(self, tmp_path):
        log = tmp_path / "c.0.log"
        emitted = wall_ms() - 500
        log.write_text(f"{emitted} serving on :80\n")
        sink = SignalSink()
        watcher = LogWatcher("c", log, make_config(), sink)
        watcher.start()
        signals = sink.wait_for(1)
        watcher.cancel()
        watcher.join()
        assert signals[0].emitted_at_ms == emitted
        assert signals[0].latency_s >= 0.4

    def test_no_replay_across_generations(self, tmp_path):
        old = tmp_path / "c.0.log"
        old.write_text(f"{wall_ms()} serving on :80\n")
        sink_old = SignalSink()
        watcher_old = LogWatcher("c", old, make_config(), sink_old)
        watcher_old.start()
        sink_old.wait_for(1)
        watcher_old.cancel()
        watcher_old.join()

        new = tmp_path / "c.1.log"
        new.write_text("")
        sink_new = SignalSink()
        watcher_new = LogWatcher("c", new, make_config(), sink_new)
        watcher_new.start()
        time.sleep(0.1)
        with open(new, "a") as f:
            f.write(f"{wall_ms()} serving on :80\n")
        signals = sink_new.wait_for(1)
        time.sleep(0.1)
        watcher_new.cancel()
        watcher_new.join()
        assert len(sink_new.wait_for(1)) == 1
        assert signals[0].event == SignalEvent.READY

    def test_attach_delay_still_reads_earlier_lines(self, tmp_path):
        log = tmp_path / "c.0.log"
        log.write_text(f"{wall_ms()} serving on :80\n")
        sink = SignalSink()
        watcher = LogWatcher("c", log, make_config(monitor_start_delay=0.4), sink)
        started = time.monotonic()
        watcher.start()
        signals = sink.wait_for(1)
        elapsed = time.monotonic() - started
        watcher.cancel()
        watcher.join()
        assert signals and signals[0].event == SignalEvent.READY
        assert elapsed >= 0.4

    def test_unreadable_log_reports_degraded(self, tmp_path):
        path = tmp_path / "c.0.log"
        path.mkdir()  # a directory at the log path cannot be opened as a file
        sink = SignalSink()
        degraded = []
        watcher = LogWatcher(
            "c", path, make_config(), sink, degraded=lambda cid, why: degraded.append(why)
        )
        watcher.start()
        deadline = time.monotonic() + 2.0
        while not degraded and time.monotonic() < deadline:
            time.sleep(0.01)
        watcher.cancel()
        watcher.join()
        assert degraded
        assert sink.signals == []


class TestSocketListener:
    def test_valid_frame_becomes_signal(self, tmp_path):
        sink = SignalSink()
        listener = SocketListener(tmp_path / "sig.sock", sink)
        listener.start()
        try:
            send_frame(listener.socket_path, "cat-1", SignalEvent.READY)
            signals = sink.wait_for(1)
            assert signals[0].container_id == "cat-1"
            assert signals[0].event == SignalEvent.READY
            assert signals[0].transport == Transport.SOCKET
            assert signals[0].latency_s <= 0.1
        finally:
            listener.close()

    def test_malformed_frame_counted_connection_kept(self, tmp_path):
        sink = SignalSink()
        listener = SocketListener(tmp_path / "sig.sock", sink)
        listener.start()
        try:
            with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as client:
                client.connect(listener.socket_path)
                client.sendall(b"v1 cat-1 BOGUS 0\n")
                time.sleep(0.1)
                client.sendall(format_frame("cat-1", SignalEvent.READY, wall_ms()).encode())
                signals = sink.wait_for(1)
            assert listener.parse_errors == 1
            assert [s.event for s in signals] == [SignalEvent.READY]
        finally:
            listener.close()

    def test_coalesced_frames_split_in_order(self, tmp_path):
        sink = SignalSink()
        listener = SocketListener(tmp_path / "sig.sock", sink)
        listener.start()
        try:
            with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as client:
                client.connect(listener.socket_path)
                both = (
                    format_frame("cat-1", SignalEvent.READY, wall_ms())
                    + format_frame("cat-1", SignalEvent.UNHEALTHY, wall_ms())
                )
                client.sendall(both.encode())
            signals = sink.wait_for(2)
            assert [s.event for s in signals] == [SignalEvent.READY, SignalEvent.UNHEALTHY]
        finally:
            listener.close()


class TestDispatch:
    def test_ready_on_unready_started(self):
        status = initial_status(has_startup_probe=False)
        signal = Signal("c", SignalEvent.READY, 0, 0, Transport.SOCKET)
        status, action = dispatch(signal, status)
        assert action == Action.MARK_READY
        assert status.ready and status.started

    def test_ready_duplicate_none(self):
        status = initial_status(has_startup_probe=False)
        signal = Signal("c", SignalEvent.READY, 0, 0, Transport.SOCKET)
        status, _ = dispatch(signal, status)
        status, action = dispatch(signal, status)
        assert action == Action.NONE

    def test_unhealthy_on_healthy(self):
        status = initial_status(has_startup_probe=False)
        signal = Signal("c", SignalEvent.UNHEALTHY, 0, 0, Transport.SOCKET)
        status, action = dispatch(signal, status)
        assert action == Action.MARK_UNHEALTHY
        assert status.phase == Phase.RESTART_QUEUED

    def test_unhealthy_while_restart_queued_none(self):
        status = ContainerStatus(started=True, healthy=False, phase=Phase.RESTART_QUEUED)
        signal = Signal("c", SignalEvent.UNHEALTHY, 0, 0, Transport.SOCKET)
        status, action = dispatch(signal, status)
        assert action == Action.NONE

    def test_ready_during_backoff_none(self):
        status = ContainerStatus(started=True, healthy=False, phase=Phase.BACKOFF_WAIT)
        signal = Signal("c", SignalEvent.READY, 0, 0, Transport.SOCKET)
        _, action = dispatch(signal, status)
        assert action == Action.NONE

    def test_heartbeat_no_status_change(self):
        status = initial_status(has_startup_probe=False)
        signal = Signal("c", SignalEvent.HEARTBEAT, 0, 0, Transport.SOCKET)
        after, action = dispatch(signal, status)
        assert action == Action.NONE
        assert after == status


class TestWatchdog:
    def test_within_deadline(self):
        assert watchdog_check(1000, 2.0, 2500) == Action.NONE

    def test_past_deadline(self):
        assert watchdog_check(1000, 2.0, 3500) == Action.MARK_UNHEALTHY

    def test_unset_never_fires(self):
        assert watchdog_check(1000, None, 10_000_000) == Action.NONE
        assert watchdog_check(None, 2.0, 10_000_000) == Action.NONE
