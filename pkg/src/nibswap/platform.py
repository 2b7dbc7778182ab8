"""The controller platform: app sessions, event fan-out, policy slots and table installation.

Each app owns one policy slot.  Slots are composed (filtering apps first, then
forwarding apps), compiled per switch and pushed to the simulator in a single
table swap.  While an update is paused, stale pushes from the old versions of
the updating apps are dropped and pushes from their new versions are held until
every updating app has either pushed or signalled that its policy is unchanged;
then all held slots go live together.
"""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field, replace

from . import policy as P
from .errors import Disconnected, NoUpdateInProgress, UpdateInProgress
from .events import PacketIn, PolicyPushed, PortStats, Swapped, SwitchDown, SwitchUp, event_kind
from .sched import Mailbox

log = logging.getLogger(__name__)

LIVE, SUPPRESSED, HELD = "live", "suppressed", "held"
STATS_NS = "flow_stats"
STATS_VERSION = "ns_v0"


@dataclass
class AppPolicySlot:
    app_id: str
    app_version: str
    policy: object
    state: str = LIVE


@dataclass
class PauseSet:
    updating_apps: frozenset
    new_versions: dict = field(default_factory=dict)
    received_new: set = field(default_factory=set)
    swapped: bool = False
    notify: Mailbox | None = None


@dataclass(eq=False)
class AppSession:
    app_id: str
    version: str
    policy_class: str = "forwarding"
    event_filter: frozenset = frozenset()
    inbox: Mailbox = None
    connected: bool = True

    def wants(self, ev) -> bool:
        return event_kind(ev) not in self.event_filter


def flow_stats_key(sw, src_ip, src_port, dst_ip, dst_port) -> str:
    return f"{sw}_{src_ip}_{src_port}_{dst_ip}_{dst_port}"


_UNSET = object()


class Platform:
    def __init__(self, sim, nib=None):
        self._lock = threading.RLock()
        self.sim = sim
        self.nib = nib
        self.sessions = []
        self.slots = {}
        self.held = {}
        self.classes = {}
        self.pause_set = None
        self.suppress_pkt_out = False
        self.suppressed_pushes = 0
        self.recompiles = 0
        self.installs = []
        self.composed_log = []
        self._composed = _UNSET
        self._compiled = {}
        self._stats_session = None
        self._stats_prev = {}
        self.install_observers = []

    # ------------------------------------------------------------- sessions

    def connect(self, app_id, version, policy_class="forwarding", event_filter=(),
                inbox: Mailbox | None = None) -> AppSession:
        with self._lock:
            s = AppSession(app_id, version, policy_class, frozenset(event_filter),
                           inbox if inbox is not None else Mailbox(f"{app_id}@{version}"))
            self.sessions.append(s)
            self.classes[app_id] = policy_class
            return s

    def disconnect(self, session: AppSession) -> None:
        with self._lock:
            session.connected = False
            if session in self.sessions:
                self.sessions.remove(session)

    def _live(self, session):
        if not session.connected:
            raise Disconnected(f"{session.app_id}@{session.version}")

    def event(self, session: AppSession, timeout=None):
        """Blocks until the next item in the app's inbox is available."""
        self._live(session)
        return session.inbox.get(timeout)

    # ----------------------------------------------------------- fan-out

    def receive(self, ev) -> None:
        """Entry point for events coming from the network."""
        with self._lock:
            if isinstance(ev, SwitchUp):
                self._install_switches([ev.switch])
            elif isinstance(ev, SwitchDown):
                self._compiled.pop(ev.switch, None)
            self.dispatch(ev)

    def dispatch(self, ev) -> int:
        with self._lock:
            n = 0
            for s in list(self.sessions):
                if s.connected and s.wants(ev):
                    s.inbox.put(ev)
                    n += 1
            return n

    # ----------------------------------------------------------- policies

    def _updating(self, app_id) -> bool:
        ps = self.pause_set
        return ps is not None and app_id in ps.updating_apps

    def _notify(self, msg):
        ps = self.pause_set
        if ps is not None and ps.notify is not None:
            ps.notify.put(msg)

    def update(self, session: AppSession, pol) -> None:
        with self._lock:
            self._live(session)
            app = session.app_id
            if self._updating(app):
                ps = self.pause_set
                is_new = ps.new_versions.get(app) == session.version
                if not is_new:
                    self.suppressed_pushes += 1
                    log.debug("suppressed stale push from %s@%s", app, session.version)
                    return
                if not ps.swapped:
                    self.held[app] = AppPolicySlot(app, session.version, pol, HELD)
                    ps.received_new.add(app)
                    self._notify(PolicyPushed(app, session.version, True))
                    self._maybe_swap()
                    return
            self.slots[app] = AppPolicySlot(app, session.version, pol, LIVE)
            self._push()

    def no_change(self, session: AppSession) -> None:
        """The app's new version keeps the policy of its predecessor."""
        with self._lock:
            self._live(session)
            app = session.app_id
            ps = self.pause_set
            if not self._updating(app) or ps.swapped or ps.new_versions.get(app) != session.version:
                return
            old = self.slots.get(app)
            self.held[app] = AppPolicySlot(app, session.version, old.policy if old else None, HELD)
            ps.received_new.add(app)
            self._notify(PolicyPushed(app, session.version, False))
            self._maybe_swap()

    def _maybe_swap(self):
        ps = self.pause_set
        if ps.swapped or not ps.received_new >= ps.updating_apps:
            return
        for app in sorted(ps.updating_apps):
            self.slots[app] = replace(self.held.pop(app), state=LIVE)
        ps.swapped = True
        self._push()
        self._notify(Swapped(tuple(sorted(ps.updating_apps))))

    def composed_policy(self):
        tagged = {}
        for app, slot in sorted(self.slots.items()):
            if slot.policy is not None:
                tagged[app] = P.Tag((app, slot.app_version), slot.policy)
        return P.compose_app_policies(tagged, self.classes)

    def _compile(self, composed, sw):
        if composed is None:
            return P.empty_table(sw)
        return P.compile_policy(composed, sw)

    def _push(self, force=False):
        composed = self.composed_policy()
        if not force and composed == self._composed:
            return
        self._composed = composed
        self.recompiles += 1
        if composed is not None:
            self.composed_log.append(composed)
        tables = {sw: self._compile(composed, sw) for sw in sorted(self.sim.up)}
        self._install(tables)

    def _install_switches(self, switches):
        composed = self.composed_policy()
        self._install({sw: self._compile(composed, sw) for sw in switches})

    def _install(self, tables):
        self._compiled.update(tables)
        self.sim.install(tables)
        self.installs.append(dict(tables))
        for obs in list(self.install_observers):
            obs(tables)

    # ------------------------------------------------------ pause / resume

    def pause(self, app_ids, new_versions: dict | None = None, notify: Mailbox | None = None) -> bool:
        """Starts blocking policy pushes from ``app_ids``; returns the acknowledgement."""
        with self._lock:
            if self.pause_set is not None:
                raise UpdateInProgress(sorted(self.pause_set.updating_apps))
            self.pause_set = PauseSet(frozenset(app_ids), dict(new_versions or {}), notify=notify)
            for app in app_ids:
                if app in self.slots:
                    self.slots[app].state = SUPPRESSED
            return True

    def resume(self) -> None:
        with self._lock:
            if self.pause_set is None:
                raise NoUpdateInProgress("resume without pause")
            self._unpause()

    def abort_update(self) -> None:
        """Drops held slots and returns the old slots to service; tables are untouched."""
        with self._lock:
            if self.pause_set is not None:
                self._unpause()

    def _unpause(self):
        for app in self.pause_set.updating_apps:
            if app in self.slots:
                self.slots[app].state = LIVE
        self.held.clear()
        self.pause_set = None

    def wipe(self, app_ids) -> None:
        """Forgets the apps' slots and clears every switch before reinstalling what remains."""
        with self._lock:
            for app in app_ids:
                self.slots.pop(app, None)
                self.held.pop(app, None)
            self._install({sw: P.empty_table(sw) for sw in sorted(self.sim.up)})
            self._composed = _UNSET
            if any(s.policy is not None for s in self.slots.values()):
                self._push(force=True)
            else:
                self._composed = None

    # ------------------------------------------------------------- packets

    def pkt_out(self, session: AppSession, sw, pkt, pt) -> None:
        with self._lock:
            self._live(session)
            if self.suppress_pkt_out:
                return
            self.sim.packet_out(sw, pkt, pt)

    # --------------------------------------------------------------- stats

    def poll_stats(self) -> None:
        """Sends PortStats to apps and mirrors per-flow counters into the store."""
        with self._lock:
            for sw in sorted(self.sim.up):
                for ps in self.sim.port_stats(sw):
                    self.dispatch(ps)
            if self.nib is not None:
                self._write_flow_stats()

    def _write_flow_stats(self):
        if self._stats_session is None or self._stats_session.closed:
            self._stats_session = self.nib.connect("platform", [(STATS_NS, STATS_VERSION)])
        now = self.sim.now
        for (sw, sip, sport, dip, dport, proto), (packets, nbytes) in self.sim.flow_counters().items():
            if proto == "other":
                continue
            key = flow_stats_key(sw, sip, sport, dip, dport)
            prev = self._stats_prev.get(key)
            bps = 0.0
            if prev is not None and now > prev[0]:
                bps = round((nbytes - prev[2]) * 8.0 / (now - prev[0]), 3)
            self._stats_prev[key] = (now, packets, nbytes, bps)
            if prev is not None and prev[1] == packets and prev[3] == bps:
                continue
            self.nib.put(self._stats_session, STATS_NS, key, {
                "switch": sw, "src_ip": sip, "src_port": sport, "dst_ip": dip,
                "dst_port": dport, "proto": proto, "packets": packets,
                "bytes": nbytes, "bps": bps, "at": now,
            })

    # ------------------------------------------------------------ snapshots

    def tables(self) -> dict:
        return dict(self.sim.tables)

    def slot_states(self) -> dict:
        out = {a: (s.app_version, s.state) for a, s in self.slots.items()}
        for a, s in self.held.items():
            out[a + "+held"] = (s.app_version, s.state)
        return out

    def snapshot_json(self) -> str:
        return json.dumps({sw: t.to_json() for sw, t in sorted(self.sim.tables.items())},
                          sort_keys=True)
