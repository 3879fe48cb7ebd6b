"""Small shared helpers: clocks, precise sleeps, port allocation."""

from __future__ import annotations

import socket
import time

# Spin for at most this long at the end of a precise sleep; plain time.sleep
# wakes 1-4ms late under load, which is too coarse for probe/load scheduling.
_SPIN_WINDOW_S = 0.002


def wall_ms() -> int:
    """Current wall-clock time in unix epoch milliseconds."""
    return int(time.time() * 1000)


def mono() -> float:
    """Monotonic seconds; the scheduling timebase for all periodic work."""
    return time.monotonic()


def sleep_until(deadline_mono: float, cancel=None, hop: float = 0.05) -> bool:
    """Sleep until a monotonic deadline with ~1ms precision.

    ``cancel`` is an optional ``threading.Event``; returns False if it fired
    before the deadline, True otherwise. Sleeps in hops so cancellation stays
    responsive, then spins the final 2ms.
    """
    while True:
        remaining = deadline_mono - mono()
        if remaining <= 0:
            return True
        if cancel is not None and cancel.is_set():
            return False
        if remaining > _SPIN_WINDOW_S:
            if cancel is not None:
                if cancel.wait(min(remaining - _SPIN_WINDOW_S, hop)):
                    return False
            else:
                time.sleep(min(remaining - _SPIN_WINDOW_S, hop))
        else:
            # busy-wait the last sliver
            while mono() < deadline_mono:
                pass
            return True


def pick_free_port(host: str = "127.0.0.1") -> int:
    """Ask the OS for a currently free TCP port.

    Racy by nature (the port is released before the caller binds it); callers
    that spawn listeners must tolerate a bind failure and retry.
    """
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]
