"""Injectable time sources. Every time read in the store and the DSL goes through one."""
from __future__ import annotations

import os
import time


class Clock:
    def now(self) -> float:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> float:
        return time.time()


class FixedClock(Clock):
    def __init__(self, t: float):
        self.t = float(t)

    def now(self) -> float:
        return self.t


class ManualClock(Clock):
    """A clock that only moves when told to; used by the simulator."""

    def __init__(self, t: float = 0.0):
        self.t = float(t)

    def now(self) -> float:
        return self.t

    def set(self, t: float) -> None:
        if t < self.t:
            raise ValueError(f"clock cannot move backward ({t} < {self.t})")
        self.t = float(t)


def clock_from_env(default: Clock | None = None, var: str = "MORPHEUS_CLOCK") -> Clock:
    """``MORPHEUS_CLOCK=fixed:<t>`` pins the clock; anything else keeps ``default``."""
    spec = os.environ.get(var, "")
    if spec.startswith("fixed:"):
        return FixedClock(float(spec[len("fixed:"):]))
    if spec and spec != "system":
        raise ValueError(f"unrecognised {var} value {spec!r}")
    return default if default is not None else SystemClock()
