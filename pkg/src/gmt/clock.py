"""Run time base. Every timestamp in a run is µs since the run's t0."""
from __future__ import annotations

import time


class RealClock:
    """Wall time measured on the monotonic clock."""

    virtual = False

    def __init__(self) -> None:
        self.t0_ns = time.monotonic_ns()

    def now(self) -> int:
        return (time.monotonic_ns() - self.t0_ns) // 1000

    def sleep(self, us: int) -> None:
        if us > 0:
            time.sleep(us / 1e6)

    def step(self) -> None:
        """Called after an action of unpredictable length. No-op on real time."""


class VirtualClock:
    """Logical time for deterministic runs against mock reporters.

    ``sleep(us)`` advances logical time by ``us`` and really waits ``us /
    accel``. Actions whose real length varies (builds, probes, flow steps)
    advance it by a fixed ``quantum`` via ``step()``, so phase markers depend
    only on the scenario and the configuration.
    """

    virtual = True

    def __init__(self, accel: float = 100.0, quantum_us: int = 1_000_000) -> None:
        if accel <= 0:
            raise ValueError("accel must be positive")
        self.accel = accel
        self.quantum_us = quantum_us
        self.t0_ns = time.monotonic_ns()
        self._now = 0

    def now(self) -> int:
        return self._now

    def sleep(self, us: int) -> None:
        if us > 0:
            time.sleep(us / self.accel / 1e6)
            self._now += int(us)

    def step(self) -> None:
        self._now += self.quantum_us
