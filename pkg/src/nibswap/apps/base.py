"""Application lifecycle shared by every sample app.

An app is a generator task with one inbox.  Network events from the
platform, store notifications and control messages all land in that inbox;
periodic work is driven by receive timeouts.  On ``Quiesce`` the app flushes
its in-memory state, acknowledges and exits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..events import Quiesce, QuiesceAck
from ..nib import Notification
from ..sched import TIMEOUT, Mailbox, Recv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AppDescriptor:
    app_id: str
    version: str
    namespaces: tuple = ()  # ((namespace, version), ...)
    policy_class: str = "forwarding"
    event_filter: frozenset = frozenset()
    subscriptions: tuple = ()

    def namespace_versions(self) -> dict:
        return dict(self.namespaces)


@dataclass
class AppEnv:
    nib: object
    platform: object
    sched: object
    on_crash: object = None  # callable(app, exc)

    def now(self) -> float:
        return self.sched.now


class App:
    descriptor: AppDescriptor = None

    def __init__(self, env: AppEnv, config: dict | None = None):
        self.env = env
        self.config = dict(config or {})
        d = self.descriptor
        self.inbox = Mailbox(f"{d.app_id}@{d.version}")
        self.nib_session = None
        self.session = None
        self.ignore_quiesce = bool(self.config.get("ignore_quiesce", False))
        self.pushes = 0
        self.exited = None
        self._due = {}

    app_id = property(lambda self: self.descriptor.app_id)
    version = property(lambda self: self.descriptor.version)

    def now(self) -> float:
        return self.env.now()

    # hooks --------------------------------------------------------------

    def startup(self):
        """Reads persisted state and pushes the initial policy.  May yield."""
        self.no_change()
        return
        yield

    def on_event(self, ev) -> None:
        pass

    def on_notification(self, note: Notification) -> None:
        pass

    def idle(self) -> None:
        """Called whenever the inbox has been drained."""

    def flush(self) -> None:
        """Writes any state not yet in the store."""

    def timers(self) -> dict:
        return {}

    # helpers ------------------------------------------------------------

    @property
    def nib(self):
        return self.env.nib

    @property
    def platform(self):
        return self.env.platform

    def push(self, pol) -> None:
        self.pushes += 1
        self.platform.update(self.session, pol)

    def no_change(self) -> None:
        self.platform.no_change(self.session)

    def pkt_out(self, sw, pkt, port) -> None:
        self.platform.pkt_out(self.session, sw, pkt, port)

    def load(self, namespace, glob="*") -> dict:
        s = self.nib_session
        out = {}
        for k in self.nib.list_keys(s, namespace, glob):
            doc = self.nib.get(s, namespace, k)
            if doc is not None:
                out[k] = doc
        return out

    def put(self, namespace, key, doc) -> None:
        self.nib.put(self.nib_session, namespace, key, doc)

    def delete(self, namespace, key) -> None:
        self.nib.delete(self.nib_session, namespace, key)

    # main loop ----------------------------------------------------------

    def run(self):
        d = self.descriptor
        try:
            self.nib_session = self.nib.connect(f"{d.app_id}@{d.version}", list(d.namespaces))
            self.session = self.platform.connect(d.app_id, d.version, d.policy_class,
                                                 d.event_filter, self.inbox)
            for ch in d.subscriptions:
                self.nib.subscribe(self.nib_session, ch, sink=self.inbox)
            yield
            yield from self.startup()
            for name, interval in self.timers().items():
                self._due[name] = self.now() + interval
            while True:
                timeout = None
                if self._due:
                    timeout = max(min(self._due.values()) - self.now(), 0.0)
                msg = yield Recv(self.inbox, timeout)
                if isinstance(msg, Quiesce):
                    if self.ignore_quiesce:
                        continue
                    self.flush()
                    msg.reply_to.put(QuiesceAck(d.app_id, True))
                    self.exited = "quiesced"
                    return "quiesced"
                if isinstance(msg, Notification):
                    self.on_notification(msg)
                elif msg is not TIMEOUT:
                    self.on_event(msg)
                self._fire_timers()
                if not len(self.inbox):
                    self.idle()
        except GeneratorExit:
            self.exited = "killed"
            raise
        except Exception as exc:
            self.exited = "crashed"
            log.warning("%s@%s crashed: %r", d.app_id, d.version, exc)
            if self.env.on_crash is not None:
                self.env.on_crash(self, exc)
            raise
        finally:
            self._close()

    def _fire_timers(self):
        now = self.now()
        intervals = self.timers()
        for name in sorted(self._due):
            if self._due[name] <= now + 1e-9:
                self._due[name] = now + intervals[name]
                getattr(self, f"on_{name}")()

    def _close(self):
        if self.session is not None:
            self.platform.disconnect(self.session)
        if self.nib_session is not None and not self.nib_session.closed:
            self.nib.disconnect(self.nib_session)
