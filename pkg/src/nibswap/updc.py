"""The update coordinator: quiesce, install transformers, restart, resume.

``Updc.deploy`` is a scheduler task.  It talks to the apps through their
inboxes, to the platform through pause/resume, and to the store through
transformer registration; all waits carry timeouts.  The app manager it is
given (normally the :class:`~nibswap.runtime.Runtime`) knows how to find,
kill and start app versions.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import xfgen
from .apps import descriptor as app_descriptor
from .errors import (AbortAppStartFailure, AbortChainMismatch, AbortHoldTimeout, ChainMismatch,
                     DslSyntaxError, DuplicateRule, UnknownNamespace, UpdateAborted, UpdateInProgress,
                     ValidationError)
from .events import AppCrashed, PolicyPushed, Quiesce, QuiesceAck, Swapped
from .nib import TransformerRegistration
from .platform import STATS_NS
from .sched import TIMEOUT, Mailbox, Recv

log = logging.getLogger(__name__)

IDLE, QUIESCING, INSTALLING, RESTARTING, RESUMING, DONE, ABORTED = (
    "Idle", "Quiescing", "Installing", "Restarting", "Resuming", "Done", "Aborted")

_NEXT = {
    IDLE: {QUIESCING},
    QUIESCING: {INSTALLING, ABORTED},
    INSTALLING: {RESTARTING, ABORTED},
    RESTARTING: {RESUMING, ABORTED},
    RESUMING: {DONE},
    DONE: {QUIESCING},
    ABORTED: {QUIESCING},
}


class AbortInvalidTransformer(AbortChainMismatch):
    kind = "InvalidTransformer"


@dataclass(frozen=True)
class AppUpdate:
    app_id: str
    from_version: str
    to_version: str


@dataclass(frozen=True)
class UpdateSpec:
    app_updates: tuple
    mu_sources: tuple = ()
    quiesce_timeout: float = 2.0
    hold_timeout: float = 10.0

    def __post_init__(self):
        ids = [u.app_id for u in self.app_updates]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"app ids must be distinct: {ids}")
        if not ids:
            raise ValidationError("update names no apps")

    @property
    def app_ids(self) -> tuple:
        return tuple(u.app_id for u in self.app_updates)

    @classmethod
    def of(cls, updates, mu_sources=(), **kw) -> "UpdateSpec":
        return cls(tuple(AppUpdate(*u) for u in updates), tuple(mu_sources), **kw)

    @classmethod
    def from_json(cls, obj, base_dir=".") -> "UpdateSpec":
        if isinstance(obj, (str, Path)):
            path = Path(obj)
            base_dir = path.parent
            obj = json.loads(path.read_text())
        try:
            updates = tuple(AppUpdate(a["id"], a["from"], a["to"]) for a in obj["apps"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed update spec: {exc!r}") from exc
        sources = tuple((Path(base_dir) / f).read_text() for f in obj.get("mu_files", []))
        return cls(updates, sources,
                   float(obj.get("quiesce_timeout_ms", 2000)) / 1000.0,
                   float(obj.get("hold_timeout_ms", 10000)) / 1000.0)


@dataclass
class ProtocolState:
    phase: str = IDLE
    apps: dict = field(default_factory=dict)


@dataclass
class UpdateReport:
    ok: bool = False
    phase: str = IDLE
    error: str | None = None
    apps: dict = field(default_factory=dict)
    marks: list = field(default_factory=list)  # (label, wall seconds since start, virtual time)
    registered: list = field(default_factory=list)
    exception: object = field(default=None, repr=False, compare=False)
    _t0: float = field(default=None, repr=False)

    def mark(self, label, virtual_now):
        t = time.perf_counter()
        if self._t0 is None:
            self._t0 = t
        self.marks.append((label, t - self._t0, virtual_now))

    def at(self, label) -> float | None:
        for name, wall, _ in self.marks:
            if name == label:
                return wall
        return None

    @property
    def total(self) -> float:
        return self.marks[-1][1] if self.marks else 0.0

    def to_json(self) -> dict:
        exc, self.exception = self.exception, None
        try:
            d = asdict(self)
        finally:
            self.exception = exc
        d.pop("_t0")
        d.pop("exception")
        d["marks"] = [{"label": l, "wall_s": round(w, 6), "virtual_s": v} for l, w, v in self.marks]
        return d


def compile_registrations(sources) -> list:
    """Parses every μ source; a (namespace, from) pair may appear only once overall."""
    regs, seen = [], set()
    for src in sources:
        for ns, frm, to, tr in xfgen.compile(xfgen.parse(src)):
            if (ns, frm) in seen:
                raise DuplicateRule(f"two rules transform {ns} from {frm}")
            seen.add((ns, frm))
            regs.append(TransformerRegistration(ns, frm, to, tr))
    return regs


def check_coverage(nib, regs, targets: dict) -> None:
    """Every existing namespace an updated app needs at a new version must be reachable
    from its current version through exactly one chain of the given rules."""
    steps = {(r.namespace, r.from_version): r.to_version for r in regs}
    current = {ns: hist[-1] for ns, hist in nib.namespaces().items()}
    for ns, want in sorted(targets.items()):
        have = current.get(ns)
        if have is None:
            continue
        v, guard = have, 0
        while v != want:
            nxt = steps.get((ns, v))
            if nxt is None or guard > 64:
                raise ChainMismatch(ns, have, v, f"no transformer chain takes namespace {ns!r}"
                                            f" from {have!r} to {want!r}")
            v, guard = nxt, guard + 1
    for r in regs:
        if r.namespace not in current:
            raise ChainMismatch(r.namespace, None, r.from_version,
                                f"transformer for namespace {r.namespace!r}, which does not exist")


class Updc:
    def __init__(self, nib, platform, sched, manager):
        self.nib = nib
        self.platform = platform
        self.sched = sched
        self.manager = manager
        self.state = ProtocolState()
        self.notify = Mailbox("updc")
        self.report = None
        self.phase_log = []

    def status(self) -> ProtocolState:
        return ProtocolState(self.state.phase, dict(self.state.apps))

    @property
    def active(self) -> bool:
        return self.state.phase in (QUIESCING, INSTALLING, RESTARTING, RESUMING)

    def _enter(self, phase):
        if phase not in _NEXT[self.state.phase]:
            raise RuntimeError(f"illegal transition {self.state.phase} -> {phase}")
        self.state.phase = phase
        self.phase_log.append(phase)
        if self.report is not None:
            self.report.phase = phase

    def _mark(self, label):
        self.report.mark(label, self.sched.now)

    def app_crashed(self, app_id, version, exc):
        if self.active:
            self.notify.put(AppCrashed(app_id, version, exc))

    def run(self, spec: UpdateSpec) -> UpdateReport:
        task = self.sched.spawn(self.deploy(spec), "updc")
        self.sched.run_until_done(task)
        if task.error is not None:
            raise task.error
        return task.result

    # ------------------------------------------------------------- protocol

    def _validate(self, spec):
        for u in spec.app_updates:
            running = self.manager.running(u.app_id)
            if running is None or running.version != u.from_version:
                got = None if running is None else running.version
                raise ValidationError(f"{u.app_id} is running {got}, not {u.from_version}")
            app_descriptor(u.app_id, u.to_version)

    def deploy(self, spec: UpdateSpec):
        if self.active:
            raise UpdateInProgress(self.state.phase)
        self._validate(spec)
        ids = spec.app_ids
        self.report = report = UpdateReport()
        self.state = ProtocolState(IDLE, {a: "running" for a in ids})
        self.notify.drain()
        self._mark("start")

        # phase 1: quiesce the apps and pause their policy pushes
        self._enter(QUIESCING)
        acks = Mailbox("updc-acks")
        for a in ids:
            self.manager.running(a).app.inbox.put(Quiesce(acks))
        self.platform.pause(ids, {u.app_id: u.to_version for u in spec.app_updates}, self.notify)
        self._mark("paused")
        pending = set(ids)
        deadline = self.sched.now + spec.quiesce_timeout
        while pending:
            for a in sorted(pending):
                if self.manager.running(a) is None:
                    pending.discard(a)
                    self.state.apps[a] = "exited"
            if not pending:
                break
            msg = yield Recv(acks, deadline - self.sched.now)
            if msg is TIMEOUT:
                for a in sorted(pending):
                    self.manager.kill(a)
                    self.state.apps[a] = "killed"
                    report.apps[a] = {"graceful": False}
                break
            if isinstance(msg, QuiesceAck) and msg.app_id in pending:
                pending.discard(msg.app_id)
                self.state.apps[msg.app_id] = "quiesced"
                report.apps[msg.app_id] = {"graceful": msg.graceful}
        for a in ids:
            if self.manager.running(a) is not None:
                self.manager.kill(a)
        self._mark("quiesced")

        # phase 2: verify and install the transformers
        self._enter(INSTALLING)
        targets = {}
        for u in spec.app_updates:
            for ns, ver in app_descriptor(u.app_id, u.to_version).namespaces:
                if ns != STATS_NS:
                    targets[ns] = ver
        try:
            regs = compile_registrations(spec.mu_sources)
            check_coverage(self.nib, regs, targets)
            self.nib.check_registrations(regs)
        except (ChainMismatch, UnknownNamespace) as exc:
            return self._abort(spec, AbortChainMismatch(str(exc)))
        except (DslSyntaxError, DuplicateRule, ValidationError) as exc:
            return self._abort(spec, AbortInvalidTransformer(f"{type(exc).__name__}: {exc}"))
        touched = set(targets)
        for u in spec.app_updates:
            touched.update(ns for ns, _ in app_descriptor(u.app_id, u.from_version).namespaces)
        touched.discard(STATS_NS)
        snap = self.nib.snapshot(sorted(touched))
        for r in regs:
            self.nib.register_transformer(r)
            report.registered.append([r.namespace, r.from_version, r.to_version])
        self._mark("installed")

        # phase 3: start the new versions; the platform holds their policies
        self._enter(RESTARTING)
        for u in spec.app_updates:
            try:
                self.manager.start(u.app_id, u.to_version)
                self.state.apps[u.app_id] = "restarting"
            except Exception as exc:
                return self._abort(spec, AbortAppStartFailure(f"{u.app_id}@{u.to_version}: {exc!r}"), snap)
        self._mark("restarted")
        deadline = self.sched.now + spec.hold_timeout
        while True:
            msg = yield Recv(self.notify, deadline - self.sched.now)
            if msg is TIMEOUT:
                return self._abort(spec, AbortHoldTimeout(
                    f"no policy from {sorted(set(ids) - self.platform.pause_set.received_new)}"
                    f" within {spec.hold_timeout}s"), snap)
            if isinstance(msg, AppCrashed) and msg.app_id in ids:
                return self._abort(spec, AbortAppStartFailure(
                    f"{msg.app_id}@{msg.version} crashed: {msg.error!r}"), snap)
            if isinstance(msg, PolicyPushed):
                self.state.apps[msg.app_id] = "pushed"
                self._mark(f"push:{msg.app_id}")
            if isinstance(msg, Swapped):
                break

        # phase 4: resume
        self._enter(RESUMING)
        self.platform.resume()
        for a in ids:
            self.state.apps[a] = "running"
        self._mark("resumed")
        self._enter(DONE)
        report.ok = True
        return report

    def _abort(self, spec, exc: UpdateAborted, snap=None):
        log.warning("update aborted: %s", exc)
        for u in spec.app_updates:
            running = self.manager.running(u.app_id)
            if running is not None:
                self.manager.kill(u.app_id)
        if snap is not None:
            self.nib.restore_snapshot(snap)
        self.platform.abort_update()
        self._enter(ABORTED)
        for u in spec.app_updates:
            self.manager.start(u.app_id, u.from_version)
            self.state.apps[u.app_id] = "restored"
        self.report.ok = False
        self.report.error = f"{exc.kind}: {exc}"
        self.report.exception = exc
        self._mark("aborted")
        return self.report
