"""Restricted reactive LTL fragment: parser, automaton compilation, monitoring.

The compiler accepts the transition-template fragment

    init:        one proposition
    transitions: conjunction of  G(m -> (X m1 | X m2 | ...))  clauses
    goal:        conjunction of  G F m  clauses

which covers every task formula exercised here. Environment-assumption
blocks are parsed and sanity-checked but play no role in synthesis.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace


# --- AST --------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    def __str__(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class Prop(Node):
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Not(Node):
    arg: Node

    def __str__(self):
        return f"!{_wrap(self.arg, 5)}"


@dataclass(frozen=True)
class And(Node):
    left: Node
    right: Node

    def __str__(self):
        return f"{_wrap(self.left, 3)} & {_wrap(self.right, 3)}"


@dataclass(frozen=True)
class Or(Node):
    left: Node
    right: Node

    def __str__(self):
        return f"{_wrap(self.left, 2)} | {_wrap(self.right, 2)}"


@dataclass(frozen=True)
class Implies(Node):
    left: Node
    right: Node

    def __str__(self):
        return f"{_wrap(self.left, 2)} -> {_wrap(self.right, 1)}"


@dataclass(frozen=True)
class Unary(Node):
    op: str  # X | F | G
    arg: Node

    def __str__(self):
        return f"{self.op} {_wrap(self.arg, 5)}"


@dataclass(frozen=True)
class Until(Node):
    left: Node
    right: Node

    def __str__(self):
        return f"{_wrap(self.left, 4)} U {_wrap(self.right, 4)}"


_PREC = {Prop: 6, Not: 5, Unary: 5, Until: 4, And: 3, Or: 2, Implies: 1}


def _wrap(n: Node, parent_prec: int) -> str:
    mine = _PREC[type(n)]
    s = str(n)
    return f"({s})" if mine < parent_prec else s


# --- lexer / parser ----------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<lpar>\()|(?P<rpar>\))|(?P<not>!|~|¬)|(?P<and>&&?|∧|/\\)"
    r"|(?P<or>\|\|?|∨|\\/)|(?P<impl>->|→)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*))"
)

_UNARY_OPS = {"X", "F", "G"}


class LtlError(ValueError):
    """Lex/parse/compile error with source position context."""


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _lex(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos].isspace():
                pos += 1
                continue
            raise LtlError(f"unexpected character {text[pos]!r} at position {pos}")
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return toks


class _Parser:
    """Recursive descent; precedence ! > X,F,G > U > & > | > ->  (-> right-assoc)."""

    def __init__(self, text: str, alphabet: set | None):
        self.text = text
        self.toks = _lex(text)
        self.i = 0
        self.alphabet = alphabet

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, kind: str | None = None) -> _Tok:
        t = self.peek()
        if t is None:
            raise LtlError(f"unexpected end of formula in {self.text!r}")
        if kind is not None and t.kind != kind:
            raise LtlError(f"expected {kind} at position {t.pos}, got {t.text!r}")
        self.i += 1
        return t

    def parse(self) -> Node:
        node = self.implies()
        t = self.peek()
        if t is not None:
            raise LtlError(f"trailing input {t.text!r} at position {t.pos}")
        return node

    def implies(self) -> Node:
        left = self.disjunct()
        t = self.peek()
        if t and t.kind == "impl":
            self.take()
            return Implies(left, self.implies())
        return left

    def disjunct(self) -> Node:
        node = self.conjunct()
        while (t := self.peek()) and t.kind == "or":
            self.take()
            node = Or(node, self.conjunct())
        return node

    def conjunct(self) -> Node:
        node = self.until()
        while (t := self.peek()) and t.kind == "and":
            self.take()
            node = And(node, self.until())
        return node

    def until(self) -> Node:
        node = self.unary()
        while (t := self.peek()) and t.kind == "ident" and t.text == "U":
            self.take()
            node = Until(node, self.unary())
        return node

    def unary(self) -> Node:
        t = self.peek()
        if t is None:
            raise LtlError(f"unexpected end of formula in {self.text!r}")
        if t.kind == "not":
            self.take()
            return Not(self.unary())
        if t.kind == "ident" and t.text in _UNARY_OPS:
            self.take()
            return Unary(t.text, self.unary())
        if t.kind == "lpar":
            self.take()
            node = self.implies()
            self.take("rpar")
            return node
        if t.kind == "ident":
            self.take()
            if self.alphabet is not None and t.text not in self.alphabet:
                raise LtlError(f"undeclared proposition {t.text!r} at position {t.pos}")
            return Prop(t.text)
        raise LtlError(f"unexpected token {t.text!r} at position {t.pos}")


def parse(text: str, alphabet: set | list | None = None) -> Node:
    alpha = set(alphabet) if alphabet is not None else None
    return _Parser(text, alpha).parse()


# --- automaton ----------------------------------------------------------------


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class TaskAutomaton:
    """Valid-transition graph over modes with initial mode and goal set.

    `mode_ids` binds proposition names to world mode ids; edges are stored on
    names. Value semantics: edits return new automata.
    """

    modes: tuple
    initial: str
    goals: tuple
    edges: frozenset  # {(from, to)}
    mode_ids: dict = field(default_factory=dict)
    per_transition_policies: bool = False

    def successors(self, mode: str) -> list[str]:
        return sorted(t for f, t in self.edges if f == mode)

    def has_edge(self, a: str, b: str) -> bool:
        return (a, b) in self.edges

    def shortest_path(self, src: str, goal_set=None) -> list[str] | None:
        """BFS to the nearest goal mode; ties broken by lowest mode id."""
        goals = set(self.goals if goal_set is None else goal_set)
        if src in goals:
            return [src]
        order = {m: self.mode_ids.get(m, i) for i, m in enumerate(self.modes)}
        frontier = [src]
        prev = {src: None}
        while frontier:
            nxt = []
            for u in sorted(frontier, key=lambda m: order[m]):
                for v in sorted(self.successors(u), key=lambda m: order[m]):
                    if v not in prev:
                        prev[v] = u
                        if v in goals:
                            path = [v]
                            while path[-1] != src:
                                path.append(prev[path[-1]])
                            return list(reversed(path))
                        nxt.append(v)
            frontier = nxt
        return None

    def validate(self):
        reach = {self.initial}
        stack = [self.initial]
        while stack:
            u = stack.pop()
            for v in self.successors(u):
                if v not in reach:
                    reach.add(v)
                    stack.append(v)
        missing = set(self.modes) - reach
        if missing:
            raise CompileError(f"modes unreachable from initial: {sorted(missing)}")
        for m in self.modes:
            if self.shortest_path(m) is None:
                raise CompileError(f"goal unreachable from mode {m!r} (dead end)")

    def add_transition(self, from_mode: str, to_mode: str) -> "TaskAutomaton":
        for m in (from_mode, to_mode):
            if m not in self.modes:
                raise KeyError(f"unknown mode {m!r}")
        return replace(self, edges=frozenset(self.edges | {(from_mode, to_mode)}))

    def to_json(self) -> dict:
        return {
            "modes": list(self.modes),
            "initial": self.initial,
            "goals": list(self.goals),
            "edges": sorted(list(e) for e in self.edges),
            "modeIds": self.mode_ids,
            "perTransitionPolicies": self.per_transition_policies,
        }

    @staticmethod
    def from_json(d: dict) -> "TaskAutomaton":
        return TaskAutomaton(
            modes=tuple(d["modes"]),
            initial=d["initial"],
            goals=tuple(d["goals"]),
            edges=frozenset(tuple(e) for e in d["edges"]),
            mode_ids={k: int(v) for k, v in d.get("modeIds", {}).items()},
            per_transition_policies=bool(d.get("perTransitionPolicies", False)),
        )

    def to_dot(self) -> str:
        lines = ["digraph task {", "  rankdir=LR;"]
        for m in self.modes:
            shape = "doublecircle" if m in self.goals else "circle"
            style = ' style="bold"' if m == self.initial else ""
            lines.append(f'  "{m}" [shape={shape}{style}];')
        for a, b in sorted(self.edges):
            lines.append(f'  "{a}" -> "{b}";')
        lines.append("}")
        return "\n".join(lines)


def _conjuncts(node: Node) -> list[Node]:
    if isinstance(node, And):
        return _conjuncts(node.left) + _conjuncts(node.right)
    return [node]


def _disjuncts(node: Node) -> list[Node]:
    if isinstance(node, Or):
        return _disjuncts(node.left) + _disjuncts(node.right)
    return [node]


def _reject_fg(node: Node):
    if isinstance(node, Unary) and node.op == "F":
        inner = node.arg
        if isinstance(inner, Unary) and inner.op == "G":
            raise CompileError(f"banned template 'F G ...' in {node}")
    for child in getattr(node, "__dict__", {}).values():
        if isinstance(child, Node):
            _reject_fg(child)


def compile_automaton(
    init: Node,
    transitions: Node,
    goal: Node,
    alphabet: list[str],
    mode_ids: dict | None = None,
    per_transition_policies: bool = False,
) -> TaskAutomaton:
    """Template-fragment compilation to a transition automaton."""
    for f in (init, transitions, goal):
        _reject_fg(f)
    if not isinstance(init, Prop):
        raise CompileError(f"initial condition must be a single proposition, got {init}")
    goals = []
    for clause in _conjuncts(goal):
        ok = (
            isinstance(clause, Unary)
            and clause.op == "G"
            and isinstance(clause.arg, Unary)
            and clause.arg.op == "F"
            and isinstance(clause.arg.arg, Prop)
        )
        if not ok:
            raise CompileError(f"goal clause outside the 'G F m' template: {clause}")
        goals.append(clause.arg.arg.name)
    edges = set()
    sources = set()
    # G distributes over conjunction: G(c1 & c2 & ...) == G(c1) & G(c2) & ...
    clauses = []
    for clause in _conjuncts(transitions):
        if not (isinstance(clause, Unary) and clause.op == "G"):
            raise CompileError(f"transition clause outside the 'G(m -> ...)' template: {clause}")
        clauses.extend(_conjuncts(clause.arg))
    for body in clauses:
        if not (isinstance(body, Implies) and isinstance(body.left, Prop)):
            raise CompileError(f"transition clause outside the 'G(m -> ...)' template: {body}")
        src = body.left.name
        sources.add(src)
        for target in _disjuncts(body.right):
            if not (isinstance(target, Unary) and target.op == "X" and isinstance(target.arg, Prop)):
                raise CompileError(f"transition target outside the 'X m' template: {target}")
            edges.add((src, target.arg.name))
    auto = TaskAutomaton(
        modes=tuple(alphabet),
        initial=init.name,
        goals=tuple(dict.fromkeys(goals)),
        edges=frozenset(edges),
        mode_ids=dict(mode_ids or {m: i + 1 for i, m in enumerate(alphabet)}),
        per_transition_policies=per_transition_policies,
    )
    auto.validate()
    return auto


# --- spec files ---------------------------------------------------------------

_BLOCK_RE = re.compile(r"^\[(?P<tag>[a-z_]+)\]\s*$", re.M)
KNOWN_BLOCKS = {"alphabet", "init", "transitions", "goal", "env_init", "env_transitions", "env_goal"}


def parse_spec_file(text: str) -> dict:
    """Split a plain-text spec into tagged blocks of raw formula text."""
    blocks = {}
    tag = None
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _BLOCK_RE.match(stripped)
        if m:
            tag = m.group("tag")
            if tag not in KNOWN_BLOCKS:
                raise LtlError(f"unknown block tag [{tag}]")
            blocks.setdefault(tag, [])
            continue
        if tag is None:
            raise LtlError(f"content before any block tag: {stripped!r}")
        blocks[tag].append(stripped)
    return {k: " ".join(v) for k, v in blocks.items()}


def compile_spec_text(text: str, per_transition_policies: bool = False) -> TaskAutomaton:
    blocks = parse_spec_file(text)
    for need in ("alphabet", "init", "transitions", "goal"):
        if need not in blocks or not blocks[need]:
            raise LtlError(f"spec file is missing the [{need}] block")
    alphabet = blocks["alphabet"].split()
    alpha = set(alphabet)
    init = parse(blocks["init"], alpha)
    trans = parse(blocks["transitions"], alpha)
    goal = parse(blocks["goal"], alpha)
    # environment assumptions: parsed and checked for declared propositions only
    for tag in ("env_init", "env_transitions", "env_goal"):
        if blocks.get(tag):
            parse(blocks[tag], None)
    return compile_automaton(init, trans, goal, alphabet, per_transition_policies=per_transition_policies)


# --- runtime monitor -----------------------------------------------------------


@dataclass
class MonitorState:
    current: str
    plan: list  # remaining path, plan[0] == current
    replans: int = 0
    history: list = field(default_factory=list)


@dataclass
class Directive:
    mode: str
    next_mode: str | None
    policy_key: object  # mode name, or (mode, next) when per-transition
    events: list


def start_monitor(auto: TaskAutomaton) -> MonitorState:
    path = auto.shortest_path(auto.initial)
    if path is None:
        raise CompileError("no path from initial mode to any goal")
    return MonitorState(current=auto.initial, plan=list(path))


def _directive(auto: TaskAutomaton, mon: MonitorState, events: list) -> Directive:
    nxt = mon.plan[1] if len(mon.plan) > 1 else None
    key = (mon.current, nxt) if auto.per_transition_policies and nxt else mon.current
    return Directive(mode=mon.current, next_mode=nxt, policy_key=key, events=events)


def step_monitor(auto: TaskAutomaton, mon: MonitorState, observed: str) -> tuple[MonitorState, Directive]:
    """Advance the receding-horizon plan on the observed mode.

    Expected transitions advance the plan; unexpected ones replan via BFS and
    flag an invariance-failure event when the exit was not the planned guard
    crossing. Every emitted directive uses only automaton edges.
    """
    if observed not in auto.modes:
        raise KeyError(f"observed mode {observed!r} is not in the automaton alphabet")
    events: list[str] = []
    if observed == mon.current:
        return mon, _directive(auto, mon, events)
    mon.history.append((mon.current, observed))
    planned = mon.plan[1] if len(mon.plan) > 1 else None
    if observed == planned:
        mon.current = observed
        mon.plan = mon.plan[1:]
        events.append(f"advance:{observed}")
    else:
        if not auto.has_edge(mon.current, observed):
            events.append(f"invariance-failure:{mon.current}->{observed}")
        path = auto.shortest_path(observed)
        if path is None:
            raise CompileError(f"dead end: no path from {observed!r} to a goal mode")
        mon.current = observed
        mon.plan = list(path)
        mon.replans += 1
        events.append("replan:" + "->".join(path))
    return mon, _directive(auto, mon, events)


# --- thesis task formulas -------------------------------------------------------

SCOOP_SPEC = """
[alphabet]
a b c d
[init]
a
[transitions]
G((a -> (X a | X b)) & (b -> (X a | X b | X c)) & (c -> (X a | X b | X c | X d)) & (d -> X d))
[goal]
G F d
"""

SCOOP_SPEC_BLACK = """
[alphabet]
a b c d
[init]
a
[transitions]
G((a -> (X a | X b)) & (b -> (X b | X c)) & (c -> (X c | X d)) & (d -> X d))
[goal]
G F d
"""

COOK_CB = """
[alphabet]
w1 y d1 w2 g d2
[init]
w1
[transitions]
G((w1 -> X y) & (y -> (X w1 | X d1)) & (d1 -> (X w2 | X g)) & (w2 -> X g) & (g -> (X w2 | X d2)) & (d2 -> X d2))
[goal]
G F d2
"""

COOK_BC = """
[alphabet]
w1 g d1 w2 y d2
[init]
w1
[transitions]
G((w1 -> X g) & (g -> (X w1 | X d1)) & (d1 -> (X w2 | X y)) & (w2 -> X y) & (y -> (X w2 | X d2)) & (d2 -> X d2))
[goal]
G F d2
"""

COOK_C = """
[alphabet]
w y g d
[init]
w
[transitions]
G((w -> (X y | X g)) & (y -> (X w | X d)) & (g -> X w) & (d -> X d))
[goal]
G F d
"""

COOK_CC = """
[alphabet]
w y d
[init]
w
[transitions]
G((w -> X y) & (y -> (X w | X d)) & (d -> X w))
[goal]
G F d
"""
