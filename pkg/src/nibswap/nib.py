"""Versioned, namespaced key-value store with pub/sub and lazy migration.

Full store keys are ``namespace + ":" + key``.  Every entry remembers the
namespace version it was written at; reading an entry that lags behind the
namespace's current version runs the registered transformer chain on it and
writes the result back, so each entry is migrated at most once per step.
"""
from __future__ import annotations

import copy
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field

from . import xfgen
from .clock import Clock, SystemClock
from .errors import (ChainMismatch, NamespaceNotHeld, TransformFailure, UnknownNamespace,
                     VersionMismatch)

log = logging.getLogger(__name__)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def check_document(doc) -> None:
    """Raises ``TypeError`` unless ``doc`` is a JSON tree with string keys."""
    if doc is None or isinstance(doc, (bool, int, str)):
        return
    if isinstance(doc, float):
        if doc != doc or doc in (float("inf"), float("-inf")):
            raise TypeError("non-finite float in document")
        return
    if isinstance(doc, list):
        for v in doc:
            check_document(v)
        return
    if isinstance(doc, dict):
        for k, v in doc.items():
            if not isinstance(k, str):
                raise TypeError(f"object key {k!r} is not a string")
            check_document(v)
        return
    raise TypeError(f"{type(doc).__name__} is not a document value")


@dataclass
class NamespaceMeta:
    name: str
    version_history: list

    @property
    def current_version(self) -> str:
        return self.version_history[-1]


@dataclass
class StoredEntry:
    namespace: str
    key: str
    doc: object
    doc_version: str

    @property
    def full_key(self) -> str:
        return f"{self.namespace}:{self.key}"


@dataclass
class TransformerRegistration:
    namespace: str
    from_version: str
    to_version: str
    transformer: xfgen.Transformer

    def __post_init__(self):
        if self.from_version == self.to_version:
            raise ValueError("from_version and to_version must differ")


@dataclass
class Session:
    app_id: str
    subscribed_namespaces: list
    closed: bool = False
    _subs: list = field(default_factory=list, repr=False)

    def expected(self, namespace):
        for ns, ver in self.subscribed_namespaces:
            if ns == namespace:
                return ver
        return None


@dataclass(frozen=True)
class Notification:
    channel: str
    payload: object


class Subscription:
    """Receives notifications published on one channel.

    Notifications go to ``sink`` (anything with ``put``) when given, otherwise
    they queue up locally and are read with :meth:`drain`.
    """

    def __init__(self, channel, sink=None):
        self.channel = channel
        self.sink = sink
        self._queue = deque()
        self.active = True

    def deliver(self, note):
        if not self.active:
            return
        if self.sink is not None:
            self.sink.put(note)
        else:
            self._queue.append(note)

    def drain(self) -> list:
        out = list(self._queue)
        self._queue.clear()
        return out

    def cancel(self):
        self.active = False


class Nib:
    def __init__(self, clock: Clock | None = None):
        self.clock = clock or SystemClock()
        self._lock = threading.RLock()
        self._meta: dict[str, NamespaceMeta] = {}
        self._entries: dict[str, StoredEntry] = {}
        # namespace -> [(from, to, transformer)] in version order
        self._chains: dict[str, list] = {}
        self._subs: dict[str, list] = {}

    # ---------------------------------------------------------------- sessions

    def connect(self, app_id: str, requirements) -> Session:
        reqs = [(ns, ver) for ns, ver in requirements]
        with self._lock:
            for ns, ver in reqs:
                if ":" in ns:
                    raise ValueError(f"namespace name {ns!r} contains ':'")
                meta = self._meta.get(ns)
                if meta is not None and meta.current_version != ver:
                    raise VersionMismatch(ns, ver, meta.current_version)
            for ns, ver in reqs:
                if ns not in self._meta:
                    self._meta[ns] = NamespaceMeta(ns, [ver])
                    self._chains.setdefault(ns, [])
            return Session(app_id, reqs)

    def disconnect(self, session: Session) -> None:
        with self._lock:
            session.closed = True
            for sub in session._subs:
                sub.cancel()
                subs = self._subs.get(sub.channel, [])
                if sub in subs:
                    subs.remove(sub)
            session._subs.clear()

    def _check(self, session, namespace) -> NamespaceMeta:
        meta = self._meta.get(namespace)
        if meta is None:
            raise UnknownNamespace(namespace)
        expected = session.expected(namespace)
        if expected is None:
            raise NamespaceNotHeld(namespace, session.app_id)
        if expected != meta.current_version:
            raise VersionMismatch(namespace, expected, meta.current_version)
        return meta

    # -------------------------------------------------------------- accessors

    def put(self, session, namespace, key, doc) -> None:
        check_document(doc)
        with self._lock:
            meta = self._check(session, namespace)
            entry = StoredEntry(namespace, key, copy.deepcopy(doc), meta.current_version)
            self._entries[entry.full_key] = entry
        self.publish(session, f"ns:{namespace}", {"op": "put", "key": key})

    def get(self, session, namespace, key):
        """Returns a copy of the document, or ``None`` when absent."""
        with self._lock:
            meta = self._check(session, namespace)
            entry = self._entries.get(f"{namespace}:{key}")
            if entry is None:
                return None
            if entry.doc_version != meta.current_version:
                entry = self._migrate(entry, meta)
            return copy.deepcopy(entry.doc)

    def delete(self, session, namespace, key) -> bool:
        with self._lock:
            self._check(session, namespace)
            existed = self._entries.pop(f"{namespace}:{key}", None) is not None
        if existed:
            self.publish(session, f"ns:{namespace}", {"op": "delete", "key": key})
        return existed

    def list_keys(self, session, namespace, glob: str = "*") -> list:
        """Stored keys matching ``glob``; listing does not migrate anything."""
        pattern = xfgen.glob_regex(glob)
        prefix = namespace + ":"
        with self._lock:
            self._check(session, namespace)
            keys = [e.key for fk, e in self._entries.items()
                    if fk.startswith(prefix) and pattern.match(e.key)]
        return sorted(keys)

    def _migrate(self, entry: StoredEntry, meta: NamespaceMeta) -> StoredEntry:
        history = meta.version_history
        try:
            start = history.index(entry.doc_version)
        except ValueError:
            raise TransformFailure(f"entry version {entry.doc_version!r} not in history",
                                   key=entry.key)
        steps = {(f, t): tr for f, t, tr in self._chains.get(meta.name, [])}
        key, doc = entry.key, entry.doc
        for v_from, v_to in zip(history[start:], history[start + 1:]):
            tr = steps.get((v_from, v_to))
            if tr is None:
                continue
            try:
                key, doc = tr(key, doc, self.clock)
                check_document(doc)
            except TransformFailure as exc:
                raise TransformFailure(exc.reason, exc.directive, entry.key, v_from, v_to,
                                       cause=exc) from exc
            except Exception as exc:
                raise TransformFailure(str(exc), None, entry.key, v_from, v_to,
                                       cause=exc) from exc
        new_full = f"{meta.name}:{key}"
        if key != entry.key and new_full in self._entries:
            raise TransformFailure(f"renamed key {key!r} already exists", key=entry.key,
                                   from_version=entry.doc_version,
                                   to_version=meta.current_version)
        migrated = StoredEntry(meta.name, key, doc, meta.current_version)
        del self._entries[entry.full_key]
        self._entries[new_full] = migrated
        return migrated

    # ---------------------------------------------------------- transformers

    def register_transformer(self, reg: TransformerRegistration) -> None:
        with self._lock:
            meta = self._meta.get(reg.namespace)
            if meta is None:
                raise UnknownNamespace(reg.namespace)
            if meta.current_version != reg.from_version:
                raise ChainMismatch(reg.namespace, meta.current_version, reg.from_version)
            if reg.to_version in meta.version_history:
                raise ChainMismatch(reg.namespace, meta.current_version, reg.to_version)
            meta.version_history.append(reg.to_version)
            self._chains.setdefault(reg.namespace, []).append(
                (reg.from_version, reg.to_version, reg.transformer))

    def check_registrations(self, regs) -> None:
        """Dry-runs a batch of registrations; raises ``ChainMismatch`` without touching state."""
        with self._lock:
            current = {ns: m.current_version for ns, m in self._meta.items()}
            history = {ns: set(m.version_history) for ns, m in self._meta.items()}
            for reg in regs:
                if reg.namespace not in current:
                    raise UnknownNamespace(reg.namespace)
                if current[reg.namespace] != reg.from_version:
                    raise ChainMismatch(reg.namespace, current[reg.namespace], reg.from_version)
                if reg.to_version in history[reg.namespace]:
                    raise ChainMismatch(reg.namespace, current[reg.namespace], reg.to_version)
                current[reg.namespace] = reg.to_version
                history[reg.namespace].add(reg.to_version)

    # --------------------------------------------------------------- pub/sub

    def subscribe(self, session, channel, sink=None) -> Subscription:
        sub = Subscription(channel, sink)
        with self._lock:
            self._subs.setdefault(channel, []).append(sub)
            if session is not None:
                session._subs.append(sub)
        return sub

    def publish(self, session, channel, payload) -> None:
        with self._lock:
            subs = list(self._subs.get(channel, ()))
        for sub in subs:
            sub.deliver(Notification(channel, copy.deepcopy(payload)))

    # ------------------------------------------------------------ inspection

    def namespaces(self) -> dict:
        with self._lock:
            return {ns: list(m.version_history) for ns, m in sorted(self._meta.items())}

    def current_version(self, namespace) -> str:
        with self._lock:
            if namespace not in self._meta:
                raise UnknownNamespace(namespace)
            return self._meta[namespace].current_version

    def entries(self) -> list:
        """Raw entries, sorted by store key, without migrating anything."""
        with self._lock:
            return [copy.deepcopy(self._entries[k]) for k in sorted(self._entries)]

    def transformer_count(self, namespace) -> int:
        return len(self._chains.get(namespace, ()))

    # --------------------------------------------------------- admin helpers

    def drop_namespace(self, namespace) -> None:
        """Forgets a namespace with its entries and chain (simple-restart baseline)."""
        with self._lock:
            prefix = namespace + ":"
            for fk in [k for k in self._entries if k.startswith(prefix)]:
                del self._entries[fk]
            self._meta.pop(namespace, None)
            self._chains.pop(namespace, None)

    def snapshot(self, namespaces) -> dict:
        with self._lock:
            snap = {}
            for ns in namespaces:
                prefix = ns + ":"
                snap[ns] = (
                    copy.deepcopy(self._meta.get(ns)),
                    list(self._chains.get(ns, [])),
                    {k: copy.deepcopy(e) for k, e in self._entries.items() if k.startswith(prefix)},
                )
            return snap

    def restore_snapshot(self, snap) -> None:
        with self._lock:
            for ns, (meta, chain, entries) in snap.items():
                self.drop_namespace(ns)
                if meta is not None:
                    self._meta[ns] = copy.deepcopy(meta)
                    self._chains[ns] = list(chain)
                self._entries.update(copy.deepcopy(entries))

    # ------------------------------------------------------------ persistence

    def dumps(self) -> str:
        with self._lock:
            meta = {ns: {"history": list(m.version_history), "current": m.current_version}
                    for ns, m in sorted(self._meta.items())}
            lines = [canonical_json({"meta": meta})]
            for fk in sorted(self._entries):
                e = self._entries[fk]
                lines.append(canonical_json(
                    {"ns": e.namespace, "key": e.key, "ver": e.doc_version, "doc": e.doc}))
            trs = []
            for ns in sorted(self._chains):
                for v_from, v_to, tr in self._chains[ns]:
                    trs.append({"ns": ns, "from": v_from, "to": v_to, "source": tr.source})
            lines.append(canonical_json({"transformers": trs}))
            return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def loads(self, text: str) -> None:
        meta, entries, chains = {}, {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec:
                for ns, m in rec["meta"].items():
                    if m["history"][-1] != m["current"]:
                        raise ValueError(f"line {lineno}: current is not last in history")
                    meta[ns] = NamespaceMeta(ns, list(m["history"]))
            elif "transformers" in rec:
                for t in rec["transformers"]:
                    program = xfgen.parse(t["source"])
                    (rule,) = program.rules
                    chains.setdefault(t["ns"], []).append(
                        (t["from"], t["to"], xfgen.compile_rule(rule)))
            else:
                e = StoredEntry(rec["ns"], rec["key"], rec["doc"], rec["ver"])
                entries[e.full_key] = e
        with self._lock:
            self._meta = meta
            self._entries = entries
            self._chains = {ns: chains.get(ns, []) for ns in meta}

    def restore(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            self.loads(fh.read())
