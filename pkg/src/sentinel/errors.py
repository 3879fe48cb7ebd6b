"""Exception types shared across sentinel modules."""

from __future__ import annotations


class SentinelError(Exception):
    """Base class for sentinel errors."""


class ConfigError(SentinelError):
    """A run/probe/container configuration failed validation."""


class InfeasibleMeasurement(SentinelError):
    """A measured value is incompatible with the detection-time model."""


class LoadGeneratorOverload(SentinelError):
    """The load generator could not sustain the requested rate; results invalid."""


class ReplayError(SentinelError):
    """An event log could not be replayed into a summary."""
