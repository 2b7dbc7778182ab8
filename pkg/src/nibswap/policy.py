"""Star-free, dup-free NetKAT-style policies and their compilation to flow tables.

Packet-set semantics: ``evaluate(p, pkt)`` returns the set of packets a policy
produces.  ``compile_policy(p, sw)`` builds a prioritized first-match table that
reproduces those semantics for every packet located at switch ``sw``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, NamedTuple, Union as _U

from .errors import Unsupported

# OpenFlow's OFPP_CONTROLLER: an output to this port becomes a PacketIn.
CONTROLLER = 0xFFFFFFFD

FIELDS = ("switch", "port", "src_ip", "dst_ip", "src_port", "dst_port", "proto")
PROTOS = ("tcp", "udp", "other")


class Packet(NamedTuple):
    switch: str
    port: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: str = "tcp"


# ------------------------------------------------------------------ predicates

@dataclass(frozen=True)
class PTrue:
    pass


@dataclass(frozen=True)
class PFalse:
    pass


@dataclass(frozen=True)
class Test:
    field: str
    value: Any

    def __post_init__(self):
        if self.field not in FIELDS:
            raise ValueError(f"unknown header field {self.field!r}")


@dataclass(frozen=True)
class And:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Or:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Not:
    pred: "Predicate"


Predicate = _U[PTrue, PFalse, Test, And, Or, Not]

# -------------------------------------------------------------------- policies


@dataclass(frozen=True)
class Filter:
    pred: Predicate


@dataclass(frozen=True)
class Modify:
    field: str
    value: Any

    def __post_init__(self):
        if self.field not in FIELDS:
            raise ValueError(f"unknown header field {self.field!r}")


@dataclass(frozen=True)
class Union:
    left: "Policy"
    right: "Policy"


@dataclass(frozen=True)
class Seq:
    left: "Policy"
    right: "Policy"


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Id:
    pass


@dataclass(frozen=True)
class Tag:
    """Marks the rules generated by ``policy`` as owned by ``owner``; semantically ``policy``."""

    owner: tuple
    policy: "Policy"


Policy = _U[Filter, Modify, Union, Seq, Drop, Id, Tag]


def conj(*preds):
    preds = [p for p in preds if not isinstance(p, PTrue)]
    if not preds:
        return PTrue()
    out = preds[0]
    for p in preds[1:]:
        out = And(out, p)
    return out


def disj(*preds):
    preds = [p for p in preds if not isinstance(p, PFalse)]
    if not preds:
        return PFalse()
    out = preds[0]
    for p in preds[1:]:
        out = Or(out, p)
    return out


def union_all(pols):
    pols = list(pols)
    if not pols:
        return Drop()
    out = pols[0]
    for p in pols[1:]:
        out = Union(out, p)
    return out


def seq_all(pols):
    pols = list(pols)
    if not pols:
        return Id()
    out = pols[0]
    for p in pols[1:]:
        out = Seq(out, p)
    return out


def match(**fields):
    return conj(*(Test(f, v) for f, v in fields.items()))


def forward(pred, port):
    return Seq(Filter(pred), Modify("port", port))


def to_controller(pred=None):
    return forward(PTrue() if pred is None else pred, CONTROLLER)


# ------------------------------------------------------------------- semantics

def holds(pred, pkt: Packet) -> bool:
    if isinstance(pred, Test):
        return getattr(pkt, pred.field) == pred.value
    if isinstance(pred, And):
        return holds(pred.left, pkt) and holds(pred.right, pkt)
    if isinstance(pred, Or):
        return holds(pred.left, pkt) or holds(pred.right, pkt)
    if isinstance(pred, Not):
        return not holds(pred.pred, pkt)
    if isinstance(pred, PTrue):
        return True
    if isinstance(pred, PFalse):
        return False
    raise TypeError(pred)


def evaluate(p, pkt: Packet) -> frozenset:
    if isinstance(p, Seq):
        out = set()
        for q in evaluate(p.left, pkt):
            out |= evaluate(p.right, q)
        return frozenset(out)
    if isinstance(p, Union):
        return evaluate(p.left, pkt) | evaluate(p.right, pkt)
    if isinstance(p, Filter):
        return frozenset((pkt,)) if holds(p.pred, pkt) else frozenset()
    if isinstance(p, Modify):
        return frozenset((pkt._replace(**{p.field: p.value}),))
    if isinstance(p, Tag):
        return evaluate(p.policy, pkt)
    if isinstance(p, Id):
        return frozenset((pkt,))
    if isinstance(p, Drop):
        return frozenset()
    raise TypeError(p)


# ----------------------------------------------------------------- compilation
#
# A classifier is a total, first-match list of (pattern, actions, owners):
#   pattern  dict field -> value (conjunction of equality tests)
#   actions  frozenset of action tuples; an action is a sorted tuple of
#            (field, value) writes; () is the identity, the empty set drops
#   owners   frozenset of Tag owners that contributed to the rule
# Every classifier ends with a match-all rule.

_ID = ()
_KEEP = frozenset((_ID,))
_DROP = frozenset()
_NONE = frozenset()


def _meet(m1, m2):
    if len(m1) > len(m2):
        m1, m2 = m2, m1
    out = dict(m2)
    for f, v in m1.items():
        if f in out and out[f] != v:
            return None
        out[f] = v
    return out


def _covers(general, specific):
    """True when every packet matching ``specific`` also matches ``general``."""
    if len(general) > len(specific):
        return False
    for f, v in general.items():
        if specific.get(f, _MISSING) != v:
            return False
    return True


_MISSING = object()


def _compose(a, b):
    if not b:
        return a
    if not a:
        return b
    d = dict(a)
    d.update(b)
    return tuple(sorted(d.items(), key=lambda kv: kv[0]))


def _tidy(rules):
    """Drops unreachable rules and rules made redundant by a later, more general one."""
    kept = []
    for m, acts, own in rules:
        if any(_covers(km, m) for km, _, _ in kept):
            continue
        kept.append((m, acts, own))
    out = []
    for m, acts, own in reversed(kept):
        redundant = False
        for m2, acts2, _ in reversed(out):
            if _meet(m, m2) is None:
                continue
            redundant = acts2 == acts and _covers(m2, m)
            break
        if not redundant:
            out.append((m, acts, own))
    out.reverse()
    return out


def _union(c1, c2):
    out = []
    for m1, a1, o1 in c1:
        for m2, a2, o2 in c2:
            m = _meet(m1, m2)
            if m is not None:
                out.append((m, a1 | a2, o1 | o2))
    return _tidy(out)


def _restrict(c2, action):
    """Classifier over pre-packets for 'apply ``action`` then ``c2``'."""
    writes = dict(action)
    out = []
    for m2, acts2, own2 in c2:
        m = {}
        ok = True
        for f, v in m2.items():
            if f in writes:
                if writes[f] != v:
                    ok = False
                    break
            else:
                m[f] = v
        if ok:
            out.append((m, frozenset(_compose(action, a2) for a2 in acts2), own2))
    return _tidy(out)


def _seq(c1, c2):
    out = []
    for m1, a1, o1 in c1:
        if not a1:
            out.append((m1, _DROP, o1))
            continue
        block = None
        for act in sorted(a1):
            r = _restrict(c2, act)
            block = r if block is None else _union(block, r)
        for m, acts, own in block:
            mm = _meet(m1, m)
            if mm is not None:
                out.append((mm, acts, o1 | own))
    return _tidy(out)


def _compile_pred(pred):
    if isinstance(pred, PTrue):
        return [({}, _KEEP, _NONE)]
    if isinstance(pred, PFalse):
        return [({}, _DROP, _NONE)]
    if isinstance(pred, Test):
        return [({pred.field: pred.value}, _KEEP, _NONE), ({}, _DROP, _NONE)]
    if isinstance(pred, Not):
        inner = _compile_pred(pred.pred)
        return _tidy([(m, _DROP if a else _KEEP, o) for m, a, o in inner])
    if isinstance(pred, And):
        return _seq(_compile_pred(pred.left), _compile_pred(pred.right))
    if isinstance(pred, Or):
        return _union(_compile_pred(pred.left), _compile_pred(pred.right))
    raise TypeError(pred)


def _classify(p):
    if isinstance(p, Filter):
        return _compile_pred(p.pred)
    if isinstance(p, Modify):
        return [({}, frozenset((((p.field, p.value),),)), _NONE)]
    if isinstance(p, Union):
        return _union(_classify(p.left), _classify(p.right))
    if isinstance(p, Seq):
        return _seq(_classify(p.left), _classify(p.right))
    if isinstance(p, Drop):
        return [({}, _DROP, _NONE)]
    if isinstance(p, Id):
        return [({}, _KEEP, _NONE)]
    if isinstance(p, Tag):
        return [(m, a, o | {p.owner}) for m, a, o in _classify(p.policy)]
    raise TypeError(p)


def _specialize_pred(pred, sw):
    if isinstance(pred, Test) and pred.field == "switch":
        return PTrue() if pred.value == sw else PFalse()
    if isinstance(pred, (And, Or)):
        return type(pred)(_specialize_pred(pred.left, sw), _specialize_pred(pred.right, sw))
    if isinstance(pred, Not):
        return Not(_specialize_pred(pred.pred, sw))
    return pred


def specialize(p, sw):
    """Resolves every ``switch`` test against ``sw``; rejects writes to ``switch``."""
    if isinstance(p, Filter):
        return Filter(_specialize_pred(p.pred, sw))
    if isinstance(p, Modify):
        if p.field == "switch":
            raise Unsupported("Modify(switch): topology terms are not compiled locally")
        return p
    if isinstance(p, (Union, Seq)):
        return type(p)(specialize(p.left, sw), specialize(p.right, sw))
    if isinstance(p, Tag):
        return Tag(p.owner, specialize(p.policy, sw))
    if isinstance(p, (Drop, Id)):
        return p
    raise Unsupported(type(p).__name__)


@dataclass(frozen=True)
class Rule:
    priority: int
    match: tuple  # sorted ((field, value), ...)
    actions: tuple  # sorted tuple of actions; each action a sorted tuple of writes
    owners: frozenset = frozenset()

    def matches(self, pkt: Packet) -> bool:
        for f, v in self.match:
            if getattr(pkt, f) != v:
                return False
        return True

    def apply(self, pkt: Packet) -> frozenset:
        return frozenset(pkt._replace(**dict(a)) if a else pkt for a in self.actions)

    def to_json(self):
        return {
            "priority": self.priority,
            "match": dict(self.match),
            "actions": [[list(w) for w in a] for a in self.actions],
            "owners": sorted(list(o) for o in self.owners),
        }


def _action_key(a):
    return json.dumps(a, default=str)


@dataclass(frozen=True)
class FlowTable:
    switch: str
    rules: tuple

    def lookup(self, pkt: Packet):
        for r in self.rules:
            if r.matches(pkt):
                return r
        return None

    def apply(self, pkt: Packet):
        """Output packets of the first matching rule, or ``None`` when nothing matches
        (the switch sends such packets to the controller)."""
        r = self.lookup(pkt)
        return None if r is None else r.apply(pkt)

    def signature(self):
        """Table contents without ownership, for comparing installed behaviour."""
        return tuple((r.priority, r.match, r.actions) for r in self.rules)

    def owners(self) -> frozenset:
        out = set()
        for r in self.rules:
            out |= r.owners
        return frozenset(out)

    def to_json(self):
        return {"switch": self.switch, "rules": [r.to_json() for r in self.rules]}


def empty_table(sw) -> FlowTable:
    return FlowTable(sw, ())


def compile_policy(p, sw) -> FlowTable:
    cl = _classify(specialize(p, sw))
    n = len(cl)
    rules = []
    for i, (m, acts, own) in enumerate(cl):
        rules.append(Rule(
            priority=n - 1 - i,
            match=tuple(sorted(m.items(), key=lambda kv: kv[0])),
            actions=tuple(sorted(acts, key=_action_key)),
            owners=frozenset(own),
        ))
    return FlowTable(sw, tuple(rules))


# ------------------------------------------------------------------ composition

def compose_app_policies(slots: dict, classes: dict | None = None):
    """Filtering-class apps run before forwarding-class apps; peers combine by union.

    ``slots`` maps app id to policy; ``classes`` maps app id to ``"filtering"``
    or ``"forwarding"`` (default).  Returns ``None`` when no app has a policy.
    """
    classes = classes or {}
    filtering = [slots[a] for a in sorted(slots) if classes.get(a) == "filtering"]
    forwarding = [slots[a] for a in sorted(slots) if classes.get(a, "forwarding") != "filtering"]
    if filtering and forwarding:
        return Seq(union_all(filtering), union_all(forwarding))
    if filtering or forwarding:
        return union_all(filtering or forwarding)
    return None


# --------------------------------------------------------------- s-expressions

_BARE = re.compile(r"[A-Za-z0-9_.:\-]+\Z")
_INT = re.compile(r"-?\d+\Z")


def _fmt_value(v):
    if isinstance(v, bool):
        raise TypeError("boolean header values are not supported")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str) and _BARE.match(v) and not _INT.match(v):
        return v
    return json.dumps(v)


def pred_to_sexpr(p) -> str:
    if isinstance(p, PTrue):
        return "true"
    if isinstance(p, PFalse):
        return "false"
    if isinstance(p, Test):
        return f"(= {p.field} {_fmt_value(p.value)})"
    if isinstance(p, And):
        return f"(and {pred_to_sexpr(p.left)} {pred_to_sexpr(p.right)})"
    if isinstance(p, Or):
        return f"(or {pred_to_sexpr(p.left)} {pred_to_sexpr(p.right)})"
    if isinstance(p, Not):
        return f"(not {pred_to_sexpr(p.pred)})"
    raise TypeError(p)


def to_sexpr(p) -> str:
    if isinstance(p, Id):
        return "id"
    if isinstance(p, Drop):
        return "drop"
    if isinstance(p, Filter):
        return f"(filter {pred_to_sexpr(p.pred)})"
    if isinstance(p, Modify):
        return f"(mod {p.field} {_fmt_value(p.value)})"
    if isinstance(p, Union):
        return f"(union {to_sexpr(p.left)} {to_sexpr(p.right)})"
    if isinstance(p, Seq):
        return f"(seq {to_sexpr(p.left)} {to_sexpr(p.right)})"
    if isinstance(p, Tag):
        app, ver = p.owner
        return f"(tag {_fmt_value(app)} {_fmt_value(ver)} {to_sexpr(p.policy)})"
    raise TypeError(p)


_TOKEN = re.compile(r'\s*(?:(\()|(\))|("(?:[^"\\]|\\.)*")|([^\s()"]+))')


def _tokens(text):
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"bad s-expression near {text[pos:pos + 10]!r}")
        pos = m.end()
        if m.group(1):
            out.append("(")
        elif m.group(2):
            out.append(")")
        elif m.group(3):
            out.append(("str", json.loads(m.group(3))))
        else:
            out.append(("atom", m.group(4)))
    return out


def _read(tokens, i):
    tok = tokens[i]
    if tok == "(":
        items = []
        i += 1
        while tokens[i] != ")":
            item, i = _read(tokens, i)
            items.append(item)
        return items, i + 1
    if tok == ")":
        raise ValueError("unexpected ')'")
    return tok, i + 1


def _value(tok):
    kind, text = tok
    if kind == "atom" and _INT.match(text):
        return int(text)
    return text


def _atom(tok):
    if not isinstance(tok, tuple) or tok[0] != "atom":
        raise ValueError(f"expected a symbol, got {tok!r}")
    return tok[1]


def _to_pred(x):
    if isinstance(x, tuple):
        name = _atom(x)
        if name == "true":
            return PTrue()
        if name == "false":
            return PFalse()
        raise ValueError(f"unknown predicate {name!r}")
    head = _atom(x[0])
    if head == "=":
        return Test(_atom(x[1]), _value(x[2]))
    if head == "and":
        return And(_to_pred(x[1]), _to_pred(x[2]))
    if head == "or":
        return Or(_to_pred(x[1]), _to_pred(x[2]))
    if head == "not":
        return Not(_to_pred(x[1]))
    raise ValueError(f"unknown predicate form {head!r}")


def _to_pol(x):
    if isinstance(x, tuple):
        name = _atom(x)
        if name == "id":
            return Id()
        if name == "drop":
            return Drop()
        raise ValueError(f"unknown policy {name!r}")
    head = _atom(x[0])
    if head == "filter":
        return Filter(_to_pred(x[1]))
    if head == "mod":
        return Modify(_atom(x[1]), _value(x[2]))
    if head == "union":
        return Union(_to_pol(x[1]), _to_pol(x[2]))
    if head == "seq":
        return Seq(_to_pol(x[1]), _to_pol(x[2]))
    if head == "tag":
        return Tag((_value(x[1]), _value(x[2])), _to_pol(x[3]))
    raise ValueError(f"unknown policy form {head!r}")


def from_sexpr(text: str):
    tokens = _tokens(text)
    tree, i = _read(tokens, 0)
    if i != len(tokens):
        raise ValueError("trailing input after s-expression")
    return _to_pol(tree)
