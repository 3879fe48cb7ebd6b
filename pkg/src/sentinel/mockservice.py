"""Mock HTTP microservice: the workload the supervisor manages.

Serves ``GET /`` (data) and ``GET /health``; health fails until the
configured init time has elapsed and, when a dependency endpoint is
configured, while that dependency is unreachable. Emits a ready log line
(and a READY socket frame when configured) at the moment it can serve.

Fault hooks arrive over ``POST /admin/fault``:

* ``kill_handler`` - in ``handler_as_pid1`` mode the whole process exits; in
  ``handler_under_shell`` mode the request handler dies but the process
  lingers: it stops accepting connections (the bound socket stays, so new
  connections hang), writes an unhealthy log line, emits an UNHEALTHY frame,
  and ignores polite termination until force-killed.
* ``latency`` - adds a fixed delay before every data/health response.
* ``down`` / ``up`` - toggles the dependency-outage flag (``/ping`` fails).

Runnable as ``python -m sentinel.mockservice``. Exits with code 23 when the
port is already taken.
"""

from __future__ import annotations

import argparse
import http.client
import json
import os
import signal as os_signal
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .signals import SignalEvent, send_frame
from .util import wall_ms

PORT_CLASH_EXIT_CODE = 23

HANDLER_AS_PID1 = "handler_as_pid1"
HANDLER_UNDER_SHELL = "handler_under_shell"


class ServiceState:
    """Shared mutable state between handler threads and the main thread."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.lock = threading.Lock()
        self.latency_ms = args.response_latency_ms
        self.dependency_down = bool(getattr(args, "start_down", False))
        self.all_500 = False
        self.hanging = False
        self.exit_event = threading.Event()
        t0 = args.t0_ms if args.t0_ms else wall_ms()
        self.init_deadline_ms = t0 + int(args.init_time * 1000)

    @property
    def init_done(self) -> bool:
        return wall_ms() >= self.init_deadline_ms

    def injected_latency_s(self) -> float:
        with self.lock:
            return self.latency_ms / 1000.0


def log_line(message: str) -> None:
    sys.stdout.write(f"{wall_ms()} {message}\n")
    sys.stdout.flush()


def emit_signal(state: ServiceState, event: SignalEvent) -> None:
    if not state.args.signal_socket:
        return
    try:
        send_frame(state.args.signal_socket, state.args.container_id, event)
    except OSError as exc:
        log_line(f"signal emit failed: {exc}")


def dependency_ok(state: ServiceState) -> bool:
    target = state.args.dependency
    if not target:
        return True
    host, _, port = target.rpartition(":")
    conn = http.client.HTTPConnection(host or "127.0.0.1", int(port), timeout=0.35)
    try:
        conn.request("GET", "/ping")
        response = conn.getresponse()
        response.read()
        return 200 <= response.status < 400
    except OSError:
        return False
    finally:
        conn.close()


class MockHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: ServiceState  # installed by serve()

    def _reply(self, status: int, body: bytes) -> None:
        try:
            self.send_response(status)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client gave up (timeout); nothing to do

    def do_GET(self) -> None:
        state = self.state
        if self.path.startswith("/admin/"):
            self._reply(404, b"unknown admin endpoint\n")
            return
        with state.lock:
            all_500 = state.all_500
        if self.path == "/ping":
            with state.lock:
                down = state.dependency_down
            self._reply(503 if down else 200, b"pong\n")
            return
        delay = state.injected_latency_s()
        if delay > 0:
            time.sleep(delay)
        if all_500:
            self._reply(500, b"handler gone\n")
            return
        if self.path == "/health":
            if not state.init_done:
                self._reply(503, b"initializing\n")
            elif state.dependency_down:
                self._reply(503, b"dependency flagged down\n")
            elif not dependency_ok(state):
                self._reply(503, b"dependency unreachable\n")
            else:
                self._reply(200, b"healthy\n")
            return
        body = f"ok {state.args.container_id}\n".encode()
        self._reply(200, body)

    def do_POST(self) -> None:
        if self.path != "/admin/fault":
            self._reply(404, b"unknown endpoint\n")
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            payload = json.loads(self.rfile.read(length) or b"{}")
            kind = payload["kind"]
        except (json.JSONDecodeError, KeyError):
            self._reply(400, b"bad fault payload\n")
            return
        state = self.state
        if kind == "latency":
            with state.lock:
                state.latency_ms = float(payload.get("latency_ms", 0))
            self._reply(200, b"ok\n")
        elif kind == "down":
            with state.lock:
                state.dependency_down = True
            self._reply(200, b"ok\n")
        elif kind == "up":
            with state.lock:
                state.dependency_down = False
            self._reply(200, b"ok\n")
        elif kind == "kill_handler":
            self._reply(200, b"ok\n")
            threading.Thread(target=kill_handler, args=(state,), daemon=True).start()
        else:
            self._reply(400, f"unknown fault kind {kind!r}\n".encode())

    def log_message(self, *args) -> None:
        pass


def kill_handler(state: ServiceState) -> None:
    """Apply the handler-termination fault per the configured pid mode."""
    time.sleep(0.01)  # let the admin response flush
    if state.args.pid_mode == HANDLER_AS_PID1:
        log_line("handler terminating; exiting process")
        sys.stdout.flush()
        os._exit(5)
    window = state.args.http_500_window_ms / 1000.0
    if window > 0:
        with state.lock:
            state.all_500 = True
        time.sleep(window)
    with state.lock:
        state.hanging = True
    # stop accepting; the bound socket lingers so new connections hang
    threading.Thread(target=state.server.shutdown, daemon=True).start()
    log_line(state.args.unhealthy_line)
    emit_signal(state, SignalEvent.UNHEALTHY)


def readiness_announcer(state: ServiceState) -> None:
    wait_s = (state.init_deadline_ms - wall_ms()) / 1000.0
    if wait_s > 0 and state.exit_event.wait(wait_s):
        return
    log_line(state.args.ready_line)
    emit_signal(state, SignalEvent.READY)


def heartbeat_loop(state: ServiceState) -> None:
    interval = state.args.heartbeat_ms / 1000.0
    while not state.exit_event.wait(interval):
        with state.lock:
            if state.hanging:
                return
        emit_signal(state, SignalEvent.HEARTBEAT)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sentinel-mockservice", description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--container-id", default="mock")
    parser.add_argument("--init-time", type=float, default=0.0,
                        help="seconds after start before /health passes")
    parser.add_argument("--dependency", default="",
                        help="host:port pinged by /health when set")
    parser.add_argument("--ready-line", default="serving on")
    parser.add_argument("--unhealthy-line", default="handler exited")
    parser.add_argument("--response-latency-ms", type=float, default=0.0)
    parser.add_argument("--pid-mode", choices=[HANDLER_AS_PID1, HANDLER_UNDER_SHELL],
                        default=HANDLER_AS_PID1)
    parser.add_argument("--http-500-window-ms", type=float, default=0.0,
                        help="after kill_handler under a shell, serve 500s this long")
    parser.add_argument("--signal-socket", default="",
                        help="unix socket path for READY/UNHEALTHY/HEARTBEAT frames")
    parser.add_argument("--heartbeat-ms", type=float, default=0.0)
    parser.add_argument("--t0-ms", type=int, default=0,
                        help="wall ms the supervisor spawned this process; init "
                             "time is measured from it")
    parser.add_argument("--start-down", action="store_true",
                        help="begin with the dependency-outage flag set")
    return parser


def serve(args: argparse.Namespace) -> int:
    state = ServiceState(args)

    handler = type("BoundHandler", (MockHandler,), {"state": state})
    try:
        server = ThreadingHTTPServer((args.host, args.port), handler)
    except OSError:
        log_line(f"port {args.port} unavailable")
        return PORT_CLASH_EXIT_CODE
    state.server = server
    server.daemon_threads = True

    def on_sigterm(signum, frame):
        with state.lock:
            if state.hanging:
                return  # the lingering wrapper ignores polite termination
        state.exit_event.set()

    os_signal.signal(os_signal.SIGTERM, on_sigterm)
    os_signal.signal(os_signal.SIGINT, on_sigterm)

    threading.Thread(target=server.serve_forever, daemon=True).start()
    log_line(f"listening on :{args.port}")
    threading.Thread(target=readiness_announcer, args=(state,), daemon=True).start()
    if args.heartbeat_ms > 0 and args.signal_socket:
        threading.Thread(target=heartbeat_loop, args=(state,), daemon=True).start()

    while not state.exit_event.wait(0.05):
        with state.lock:
            if state.hanging:
                break
    with state.lock:
        hanging = state.hanging
    if hanging:
        while True:  # wrapper analog: log written, now hang until force-killed
            time.sleep(3600)
    server.shutdown()
    server.server_close()
    log_line("exiting on request")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return serve(args)


if __name__ == "__main__":
    sys.exit(main())
