"""Wires store, simulator, platform, scheduler, apps and coordinator into one system.

The simulator clock drives everything: before each tick, due scenario
actions run, app timers fire, switch statistics are polled every second, and
the scheduler runs until every app is idle.  PacketIns are handled
synchronously, so a reactive app's rules and packet-outs take effect within
the tick that triggered them.  Updates run to completion between ticks.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass

from .apps import AppEnv, app_class, descriptor as app_descriptor
from .clock import Clock, clock_from_env
from .nib import Nib
from .platform import STATS_NS, Platform
from .sched import Scheduler
from .simnet import TICKS_PER_SECOND, Simulator
from .updc import UpdateSpec, Updc

log = logging.getLogger(__name__)


class SchedClock(Clock):
    """Virtual time of a scheduler, for stamping transformed documents."""

    def __init__(self, sched):
        self.sched = sched

    def now(self) -> float:
        return float(self.sched.now)


@dataclass
class RunningApp:
    app: object
    task: object

    @property
    def version(self) -> str:
        return self.app.version


MODES = ("state_transfer", "simple_restart", "record_replay")


class Runtime:
    def __init__(self, topo, *, app_config: dict | None = None, sched_seed=None,
                 clock: Clock | None = None, record: bool = False, stats_interval: float = 1.0):
        self.sched = Scheduler(sched_seed)
        self.clock = clock or clock_from_env(SchedClock(self.sched))
        self.nib = Nib(self.clock)
        self.sim = Simulator(topo, handler=self._on_network_event)
        self.platform = Platform(self.sim, self.nib)
        self.env = AppEnv(self.nib, self.platform, self.sched, on_crash=self._on_crash)
        self.updc = Updc(self.nib, self.platform, self.sched, self)
        self.app_config = {k: dict(v) for k, v in (app_config or {}).items()}
        self.apps = {}
        self.history = []
        self.stats_interval = stats_interval
        self.trace = self.sim.record() if record else None
        self._actions = []
        self._seq = itertools.count()
        self.reports = []

    # ---------------------------------------------------------- app manager

    def running(self, app_id):
        ra = self.apps.get(app_id)
        if ra is None or ra.task.done:
            return None
        return ra

    def start(self, app_id, version):
        cls = app_class(app_id, version)
        app = cls(self.env, self.app_config.get(app_id))
        task = self.sched.spawn(app.run(), f"{app_id}@{version}")
        self.apps[app_id] = RunningApp(app, task)
        self.history.append(app)
        return app

    def kill(self, app_id):
        ra = self.apps.get(app_id)
        if ra is not None and not ra.task.done:
            self.sched.kill(ra.task)

    def app(self, app_id):
        ra = self.running(app_id)
        return ra.app if ra else None

    def _on_crash(self, app, exc):
        self.updc.app_crashed(app.app_id, app.version, exc)

    # ------------------------------------------------------------ plumbing

    def settle(self):
        if not self.sched.in_task:
            self.sched.run_until_idle()

    def _on_network_event(self, ev):
        self.platform.receive(ev)
        self.settle()

    def boot(self, apps):
        """Starts ``apps`` (pairs of id and version), then brings the network up."""
        for app_id, version in apps:
            self.start(app_id, version)
        self.settle()
        self.sim.start()
        self.settle()

    def at(self, t: float, fn, label: str = "") -> None:
        heapq.heappush(self._actions, (t, next(self._seq), label, fn))

    def run_until(self, t_end: float) -> None:
        every = max(1, round(self.stats_interval * TICKS_PER_SECOND))
        while self.sim.now < t_end - 1e-9:
            t = self.sim.now
            self.sched.advance_to(t)
            self.settle()
            while self._actions and self._actions[0][0] <= t + 1e-9:
                _, _, label, fn = heapq.heappop(self._actions)
                log.info("t=%.1f %s", t, label)
                fn()
                self.settle()
            if self.sim.tick % every == 0 and self.sim.tick > 0:
                self.platform.poll_stats()
                self.settle()
            self.sim.step()

    # --------------------------------------------------------------- update

    def update(self, spec: UpdateSpec, mode: str = "state_transfer"):
        if mode == "state_transfer":
            return self.deploy(spec)
        if mode == "simple_restart":
            return self.simple_restart(spec)
        if mode == "record_replay":
            return self.record_replay(spec)
        raise ValueError(f"unknown update mode {mode!r}")

    def deploy(self, spec: UpdateSpec):
        report = self.updc.run(spec)
        self.reports.append(report)
        self.settle()
        return report

    def _restart_empty(self, spec: UpdateSpec):
        ids = spec.app_ids
        for u in spec.app_updates:
            self.kill(u.app_id)
        self.settle()
        dropped = set()
        for u in spec.app_updates:
            for v in (u.from_version, u.to_version):
                dropped.update(ns for ns, _ in app_descriptor(u.app_id, v).namespaces)
        dropped.discard(STATS_NS)
        for ns in sorted(dropped):
            self.nib.drop_namespace(ns)
        self.platform.wipe(ids)
        for u in spec.app_updates:
            self.start(u.app_id, u.to_version)
        self.settle()
        self.sim.reconnect()
        self.settle()

    def simple_restart(self, spec: UpdateSpec):
        """Kills the apps, discards their state and switch rules, starts the new versions empty."""
        self._restart_empty(spec)
        return None

    def record_replay(self, spec: UpdateSpec):
        """As simple restart, then replays every recorded PacketIn to the new versions
        (their packet-outs suppressed) before traffic resumes."""
        if self.trace is None:
            raise RuntimeError("record_replay needs a runtime created with record=True")
        trace = list(self.trace)
        self.platform.suppress_pkt_out = True
        try:
            self._restart_empty(spec)
            self.sim.replay(trace)
            self.settle()
        finally:
            self.platform.suppress_pkt_out = False
        return None
