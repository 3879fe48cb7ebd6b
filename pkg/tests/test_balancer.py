"""Balancer routing, classification, and unavailability semantics."""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from sentinel.balancer import ReadySetBalancer, RequestOutcome
from sentinel.util import pick_free_port


class _Backend(BaseHTTPRequestHandler):
    body = b"ok"
    delay = 0.0
    status = 200

    def do_GET(self):
        if self.delay:
            time.sleep(self.delay)
        self.send_response(self.status)
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()
        self.wfile.write(self.body)

    def log_message(self, *args):
        pass


def start_backend(**attrs):
    handler = type("H", (_Backend,), attrs)
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, server.server_address[1]


class _World:
    """Mutable ready-set/endpoint fixture."""

    def __init__(self):
        self.ready = frozenset()
        self.endpoints = {}

    def balancer(self, seed=0):
        return ReadySetBalancer(
            "svc", lambda: self.ready, lambda: dict(self.endpoints), seed=seed
        )


@pytest.fixture
def world():
    return _World()


def test_round_robin_order(world):
    server_a, port_a = start_backend()
    server_b, port_b = start_backend()
    try:
        world.ready = frozenset({"a", "b"})
        world.endpoints = {"a": ("127.0.0.1", port_a), "b": ("127.0.0.1", port_b)}
        balancer = world.balancer(seed=0)
        chosen = [balancer.route("/", 0.5)[0].chosen for _ in range(4)]
        assert chosen == ["a", "b", "a", "b"]
        assert all(
            balancer.route("/", 0.5)[1] == RequestOutcome.SUCCESS for _ in range(2)
        )
    finally:
        server_a.shutdown(); server_a.server_close()
        server_b.shutdown(); server_b.server_close()


def test_singleton_ready_set(world):
    server, port = start_backend()
    try:
        world.ready = frozenset({"a"})
        world.endpoints = {"a": ("127.0.0.1", port)}
        decision, outcome = world.balancer().route("/", 0.5)
        assert decision.chosen == "a"
        assert outcome == RequestOutcome.SUCCESS
    finally:
        server.shutdown(); server.server_close()


def test_empty_set_single_request_times_out(world):
    balancer = world.balancer()
    start = time.monotonic()
    decision, outcome = balancer.route("/", 0.3)
    elapsed = time.monotonic() - start
    assert decision.chosen is None
    assert outcome == RequestOutcome.TIMEOUT
    assert 0.25 <= elapsed <= 0.6


def test_empty_set_concurrent_requests_refused_except_one_waiter(world):
    balancer = world.balancer()
    with ThreadPoolExecutor(max_workers=8) as pool:
        futures = [pool.submit(balancer.route, "/", 0.4) for _ in range(8)]
        outcomes = [f.result()[1] for f in futures]
    assert outcomes.count(RequestOutcome.TIMEOUT) == 1
    assert outcomes.count(RequestOutcome.REFUSED) == 7


def test_waiter_routes_when_readiness_returns(world):
    server, port = start_backend()
    try:
        world.endpoints = {"a": ("127.0.0.1", port)}
        balancer = world.balancer()

        def make_ready():
            time.sleep(0.15)
            world.ready = frozenset({"a"})

        threading.Thread(target=make_ready, daemon=True).start()
        decision, outcome = balancer.route("/", 0.5)
        assert outcome == RequestOutcome.SUCCESS
        assert decision.chosen == "a"
    finally:
        server.shutdown(); server.server_close()


def test_backend_dead_after_routing_is_http500_class(world):
    world.ready = frozenset({"a"})
    world.endpoints = {"a": ("127.0.0.1", pick_free_port())}
    _, outcome = world.balancer().route("/", 0.5)
    assert outcome == RequestOutcome.HTTP_500


def test_backend_500_classified(world):
    server, port = start_backend(status=500)
    try:
        world.ready = frozenset({"a"})
        world.endpoints = {"a": ("127.0.0.1", port)}
        _, outcome = world.balancer().route("/", 0.5)
        assert outcome == RequestOutcome.HTTP_500
    finally:
        server.shutdown(); server.server_close()


def test_slow_backend_times_out(world):
    server, port = start_backend(delay=1.0)
    try:
        world.ready = frozenset({"a"})
        world.endpoints = {"a": ("127.0.0.1", port)}
        start = time.monotonic()
        _, outcome = world.balancer().route("/", 0.3)
        assert outcome == RequestOutcome.TIMEOUT
        assert time.monotonic() - start < 0.8
    finally:
        server.shutdown(); server.server_close()


def test_seeded_start_offset(world):
    server_a, port_a = start_backend()
    server_b, port_b = start_backend()
    try:
        world.ready = frozenset({"a", "b"})
        world.endpoints = {"a": ("127.0.0.1", port_a), "b": ("127.0.0.1", port_b)}
        balancer = world.balancer(seed=1)
        chosen = [balancer.route("/", 0.5)[0].chosen for _ in range(2)]
        assert chosen == ["b", "a"]
    finally:
        server_a.shutdown(); server_a.server_close()
        server_b.shutdown(); server_b.server_close()
