"""Exception types shared across modules."""
from __future__ import annotations


class ConfigError(ValueError):
    """A malformed configuration document.

    ``path`` points at the offending field, e.g. ``datacenters[1].gpu_count``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class InsufficientGpus(RuntimeError):
    """Partitions remain after every datacenter has been used."""

    def __init__(self, remaining: int, message: str = ""):
        super().__init__(message or f"{remaining} partitions could not be placed")
        self.remaining = remaining


class Deadlock(RuntimeError):
    """The engine ran out of events while work remained."""

    def __init__(self, cycle: list[str], pending: int):
        msg = f"deadlock with {pending} pending items"
        if cycle:
            msg += ": " + " -> ".join(cycle)
        super().__init__(msg)
        self.cycle = cycle
        self.pending = pending
