"""A small DSL for transforming JSON documents between namespace versions.

A program is a list of rules, one per ``(namespace, from_version)``::

    for fw_allowed:* ns_v0->ns_v1 {
      INIT ["last_count"] {$out = 0}
      INIT ["time_created"] {$out = time.time()}
    };

Directives: ``INIT path block`` adds a field, ``SET path block`` overwrites an
existing one, ``RENAME path path``, ``DELETE path`` and ``RENAMEKEY block``
(rewrites the store key, ``$key`` is the current key).  Blocks are a single
``$out = expr`` assignment.  Expressions read the *pre-transform* document via
``$in["field"]``.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Union

from .clock import Clock
from .errors import DslSyntaxError, DuplicateRule, TransformFailure, ValidationError

Path = tuple  # tuple[str, ...]


# --------------------------------------------------------------------------- AST

@dataclass(frozen=True, eq=False)
class Lit:
    value: Any

    def _ident(self):
        return (type(self.value), self.value)

    def __eq__(self, other):
        return isinstance(other, Lit) and self._ident() == other._ident()

    def __hash__(self):
        return hash(self._ident())


@dataclass(frozen=True)
class Now:
    pass


@dataclass(frozen=True)
class InRef:
    path: Path


@dataclass(frozen=True)
class KeyRef:
    pass


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Lit, Now, InRef, KeyRef, BinOp]


@dataclass(frozen=True)
class Init:
    path: Path
    expr: Expr


@dataclass(frozen=True)
class Set:
    path: Path
    expr: Expr


@dataclass(frozen=True)
class Rename:
    old: Path
    new: Path


@dataclass(frozen=True)
class Delete:
    path: Path


@dataclass(frozen=True)
class RenameKey:
    expr: Expr


Directive = Union[Init, Set, Rename, Delete, RenameKey]


@dataclass(frozen=True)
class TransformRule:
    namespace: str
    key_glob: str
    from_version: str
    to_version: str
    directives: tuple


@dataclass(frozen=True)
class TransformProgram:
    rules: tuple

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)


# ------------------------------------------------------------------------- globs

def glob_regex(glob: str) -> re.Pattern:
    """``*`` matches any substring; every other character is literal."""
    return re.compile("".join(".*" if c == "*" else re.escape(c) for c in glob) + r"\Z", re.S)


def glob_match(glob: str, key: str) -> bool:
    return glob_regex(glob).match(key) is not None


# ------------------------------------------------------------------------ parser

_WS = re.compile(r"(?:\s+|#[^\n]*)+")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_VERSION = re.compile(r"[A-Za-z0-9_.]+")
_GLOB = re.compile(r"[^\s{};]+")
_STRING = re.compile(r'"(?:[^"\\\n]|\\.)*"')
_NUMBER = re.compile(r"-?\d+(?:(\.\d+)?([eE][+-]?\d+)?)")
_KEYWORDS = ("INIT", "SET", "RENAMEKEY", "RENAME", "DELETE")


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.pos = 0

    # position helpers
    def where(self, pos=None):
        pos = self.pos if pos is None else pos
        line = self.src.count("\n", 0, pos) + 1
        col = pos - (self.src.rfind("\n", 0, pos) + 1) + 1
        return line, col

    def error(self, message, pos=None):
        line, col = self.where(pos)
        return DslSyntaxError(message, line, col)

    def skip(self):
        m = _WS.match(self.src, self.pos)
        if m:
            self.pos = m.end()

    def at_end(self):
        self.skip()
        return self.pos >= len(self.src)

    def peek(self, lit):
        self.skip()
        return self.src.startswith(lit, self.pos)

    def expect(self, lit):
        if not self.peek(lit):
            found = self.src[self.pos:self.pos + 12] or "end of input"
            raise self.error(f"expected {lit!r}, found {found!r}")
        self.pos += len(lit)

    def match(self, regex, what):
        self.skip()
        m = regex.match(self.src, self.pos)
        if not m:
            raise self.error(f"expected {what}")
        self.pos = m.end()
        return m

    def keyword(self):
        self.skip()
        for kw in _KEYWORDS:
            if self.src.startswith(kw, self.pos):
                end = self.pos + len(kw)
                if end < len(self.src) and (self.src[end].isalnum() or self.src[end] == "_"):
                    continue
                self.pos = end
                return kw
        return None

    # grammar
    def program(self):
        rules = []
        seen = {}
        while not self.at_end():
            start = self.pos
            rule = self.rule()
            ident = (rule.namespace, rule.from_version)
            if ident in seen:
                line, col = self.where(start)
                raise DuplicateRule(
                    f"{line}:{col}: duplicate rule for {rule.namespace} from {rule.from_version}")
            seen[ident] = rule
            rules.append(rule)
        if not rules:
            raise self.error("a program needs at least one rule")
        return TransformProgram(tuple(rules))

    def rule(self):
        self.skip()
        m = _IDENT.match(self.src, self.pos)
        if not m or m.group() != "for":
            raise self.error("expected 'for'")
        self.pos = m.end()
        ns = self.match(_IDENT, "namespace name").group()
        self.expect(":")
        if self.src[self.pos:self.pos + 1].isspace():
            raise self.error("expected key glob directly after ':'")
        glob = self.match(_GLOB, "key glob").group()
        v_from = self.match(_VERSION, "source version").group()
        self.expect("->")
        self.skip()
        to_pos = self.pos
        v_to = self.match(_VERSION, "target version").group()
        if v_from == v_to:
            raise self.error(f"rule maps version {v_from!r} onto itself", to_pos)
        self.expect("{")
        directives = []
        while not self.peek("}"):
            directives.append(self.directive())
        self.expect("}")
        self.expect(";")
        return TransformRule(ns, glob, v_from, v_to, tuple(directives))

    def directive(self):
        kw = self.keyword()
        if kw == "INIT":
            return Init(self.path(), self.block())
        if kw == "SET":
            return Set(self.path(), self.block())
        if kw == "RENAME":
            return Rename(self.path(), self.path())
        if kw == "DELETE":
            return Delete(self.path())
        if kw == "RENAMEKEY":
            return RenameKey(self.block())
        raise self.error("expected a directive (INIT, SET, RENAME, DELETE, RENAMEKEY) or '}'")

    def path(self):
        # segments of one path are adjacent: ["a"]["b"]; whitespace starts a new path
        if not self.peek("["):
            raise self.error("expected a field path like [\"name\"]")
        parts = []
        while self.src.startswith("[", self.pos):
            self.pos += 1
            parts.append(self.string())
            self.expect("]")
        return tuple(parts)

    def string(self):
        m = self.match(_STRING, "string literal")
        return json.loads(m.group())

    def block(self):
        self.expect("{")
        self.expect("$out")
        self.expect("=")
        e = self.expr()
        self.expect("}")
        return e

    def expr(self):
        left = self.term()
        while True:
            self.skip()
            c = self.src[self.pos:self.pos + 1]
            if c in ("+", "-") and c:
                self.pos += 1
                left = BinOp(c, left, self.term())
            else:
                return left

    def term(self):
        left = self.primary()
        while True:
            self.skip()
            c = self.src[self.pos:self.pos + 1]
            if c in ("*", "/") and c:
                self.pos += 1
                left = BinOp(c, left, self.primary())
            else:
                return left

    def primary(self):
        self.skip()
        s, p = self.src, self.pos
        if s.startswith("(", p):
            self.pos += 1
            e = self.expr()
            self.expect(")")
            return e
        if s.startswith('"', p):
            return Lit(self.string())
        m = _NUMBER.match(s, p)
        if m:
            self.pos = m.end()
            text = m.group()
            if m.group(1) or m.group(2):
                return Lit(float(text))
            return Lit(int(text))
        if s.startswith("$in", p) and not s.startswith("$in_", p):
            self.pos += 3
            return InRef(self.path())
        if s.startswith("$key", p):
            self.pos += 4
            return KeyRef()
        for spelling in ("time.time()", "now()"):
            if s.startswith(spelling, p):
                self.pos += len(spelling)
                return Now()
        m = _IDENT.match(s, p)
        if m and m.group() in ("true", "false", "null"):
            self.pos = m.end()
            return Lit({"true": True, "false": False, "null": None}[m.group()])
        raise self.error("expected an expression")


def parse(source: str) -> TransformProgram:
    return _Parser(source).program()


# ------------------------------------------------------------------ pretty print

def _fmt_path(path):
    return "".join(f"[{json.dumps(p)}]" for p in path)


def _fmt_lit(v):
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def format_expr(e) -> str:
    if isinstance(e, Lit):
        return _fmt_lit(e.value)
    if isinstance(e, Now):
        return "now()"
    if isinstance(e, InRef):
        return "$in" + _fmt_path(e.path)
    if isinstance(e, KeyRef):
        return "$key"
    if isinstance(e, BinOp):
        return f"({format_expr(e.left)} {e.op} {format_expr(e.right)})"
    raise TypeError(e)


def format_directive(d) -> str:
    if isinstance(d, Init):
        return f"INIT {_fmt_path(d.path)} {{$out = {format_expr(d.expr)}}}"
    if isinstance(d, Set):
        return f"SET {_fmt_path(d.path)} {{$out = {format_expr(d.expr)}}}"
    if isinstance(d, Rename):
        return f"RENAME {_fmt_path(d.old)} {_fmt_path(d.new)}"
    if isinstance(d, Delete):
        return f"DELETE {_fmt_path(d.path)}"
    if isinstance(d, RenameKey):
        return f"RENAMEKEY {{$out = {format_expr(d.expr)}}}"
    raise TypeError(d)


def format_rule(rule: TransformRule) -> str:
    body = "".join(f"  {format_directive(d)}\n" for d in rule.directives)
    return (f"for {rule.namespace}:{rule.key_glob} {rule.from_version}->{rule.to_version} {{\n"
            f"{body}}};\n")


def pretty_print(program: TransformProgram) -> str:
    return "".join(format_rule(r) for r in program.rules)


# -------------------------------------------------------------------- evaluation

def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _lookup(doc, path, directive):
    cur = doc
    for part in path:
        if not isinstance(cur, dict) or part not in cur:
            raise TransformFailure(f"field {_fmt_path(path)} is absent", directive)
        cur = cur[part]
    return cur


def evaluate(e, key: str, doc_in, clock: Clock, directive=None):
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, Now):
        return float(clock.now())
    if isinstance(e, KeyRef):
        return key
    if isinstance(e, InRef):
        return copy.deepcopy(_lookup(doc_in, e.path, directive))
    if isinstance(e, BinOp):
        a = evaluate(e.left, key, doc_in, clock, directive)
        b = evaluate(e.right, key, doc_in, clock, directive)
        if e.op == "+" and isinstance(a, str) and isinstance(b, str):
            return a + b
        if not (_is_number(a) and _is_number(b)):
            raise TransformFailure(
                f"operator {e.op!r} not defined for {type(a).__name__} and {type(b).__name__}",
                directive)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if b == 0:
            raise TransformFailure("division by zero", directive)
        return a / b
    raise TypeError(e)


def _parent(doc, path, directive):
    if not isinstance(doc, dict):
        raise TransformFailure("document is not an object", directive)
    parent = doc
    for part in path[:-1]:
        nxt = parent.get(part) if isinstance(parent, dict) else None
        if not isinstance(nxt, dict):
            raise TransformFailure(f"no object at {_fmt_path(path[:-1])}", directive)
        parent = nxt
    return parent, path[-1]


def _run_directive(d, key, doc_in, work, clock):
    label = format_directive(d)
    if isinstance(d, Init):
        parent, leaf = _parent(work, d.path, label)
        if leaf in parent:
            raise TransformFailure(f"field {_fmt_path(d.path)} already present", label)
        parent[leaf] = evaluate(d.expr, key, doc_in, clock, label)
    elif isinstance(d, Set):
        parent, leaf = _parent(work, d.path, label)
        if leaf not in parent:
            raise TransformFailure(f"field {_fmt_path(d.path)} is absent", label)
        parent[leaf] = evaluate(d.expr, key, doc_in, clock, label)
    elif isinstance(d, Rename):
        src, src_leaf = _parent(work, d.old, label)
        if src_leaf not in src:
            raise TransformFailure(f"field {_fmt_path(d.old)} is absent", label)
        dst, dst_leaf = _parent(work, d.new, label)
        if dst_leaf in dst:
            raise TransformFailure(f"field {_fmt_path(d.new)} already present", label)
        dst[dst_leaf] = src.pop(src_leaf)
    elif isinstance(d, Delete):
        parent, leaf = _parent(work, d.path, label)
        if leaf not in parent:
            raise TransformFailure(f"field {_fmt_path(d.path)} is absent", label)
        del parent[leaf]
    elif isinstance(d, RenameKey):
        new_key = evaluate(d.expr, key, doc_in, clock, label)
        if not isinstance(new_key, str) or not new_key:
            raise TransformFailure("RENAMEKEY must produce a non-empty string", label)
        return new_key
    return key


@dataclass(frozen=True, eq=False)
class Transformer:
    """Executable form of one rule: ``(key, doc, clock) -> (key', doc')``.

    Keys that miss the rule's glob pass through unchanged.  Application is
    all-or-nothing; the input document is never mutated.
    """

    rule: TransformRule
    _pattern: re.Pattern

    @property
    def namespace(self):
        return self.rule.namespace

    @property
    def from_version(self):
        return self.rule.from_version

    @property
    def to_version(self):
        return self.rule.to_version

    @property
    def source(self) -> str:
        return format_rule(self.rule)

    def matches(self, key: str) -> bool:
        return self._pattern.match(key) is not None

    def __call__(self, key: str, doc, clock: Clock):
        work = copy.deepcopy(doc)
        if not self.matches(key):
            return key, work
        new_key = key
        for d in self.rule.directives:
            new_key = _run_directive(d, new_key, doc, work, clock)
        return new_key, work


def _written_paths(d):
    if isinstance(d, (Init, Set, Delete)):
        return [d.path]
    if isinstance(d, Rename):
        return [d.new]
    return []


def validate_rule(rule: TransformRule) -> None:
    if not rule.directives:
        raise ValidationError(f"rule {rule.namespace}:{rule.key_glob} has no directives")
    seen = set()
    renames = 0
    for d in rule.directives:
        if isinstance(d, RenameKey):
            renames += 1
            if renames > 1:
                raise ValidationError("more than one RENAMEKEY in a rule")
        for p in _written_paths(d):
            if p in seen:
                raise ValidationError(f"field {_fmt_path(p)} written twice in one rule")
            seen.add(p)


def compile_rule(rule: TransformRule) -> Transformer:
    validate_rule(rule)
    return Transformer(rule, glob_regex(rule.key_glob))


def compile(program: TransformProgram) -> list:
    """Returns ``[(namespace, from_version, to_version, Transformer), ...]`` in rule order."""
    out = []
    for rule in program.rules:
        t = compile_rule(rule)
        out.append((rule.namespace, rule.from_version, rule.to_version, t))
    return out


def compile_source(source: str) -> list:
    return compile(parse(source))


def apply(t: Callable, key: str, doc, clock: Clock):
    return t(key, doc, clock)
