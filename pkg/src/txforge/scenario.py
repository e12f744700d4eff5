"""Task behaviors, expression language, and model binding.

Scenario files are JSON with top-level keys exactly
{"tasks", "initial", "results", "faults"}.  Task bodies are declarative:
a read set plus an ordered list of (variable, expression) writes, with an
optional exception handler.  Expressions are strings in a small strict
language over 64-bit integers, booleans, and strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .bpmn import TASK, ProcessModel
from .errors import (
    ActorMismatch,
    DivisionByZero,
    MissingBehavior,
    Overflow,
    ParseError,
    TypeMismatch,
    UndefinedVariable,
    UnknownField,
    UnknownTask,
    UnresolvableRead,
)
from .regions import FlowGraph, NodeBehaviors, build_flow_graph

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

EXCEPTION = "exception"
PREPARE_NO = "prepare-no"
RESOLVE = "resolve"
FAIL = "fail"


# --- expression language ------------------------------------------------

_TWO_CHAR = ("||", "&&", "==", "!=", "<=", ">=")


def _tokenize(text: str) -> list[tuple[str, object, int]]:
    tokens: list[tuple[str, object, int]] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if text[i:i + 2] in _TWO_CHAR:
            tokens.append(("op", text[i:i + 2], i))
            i += 2
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(("int", int(text[i:j]), i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            if word == "true":
                tokens.append(("bool", True, i))
            elif word == "false":
                tokens.append(("bool", False, i))
            else:
                tokens.append(("ident", word, i))
            i = j
            continue
        if c == '"':
            j = i + 1
            chars: list[str] = []
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    if j + 1 >= n or text[j + 1] not in ('"', "\\"):
                        raise ParseError("bad escape in string literal", j)
                    chars.append(text[j + 1])
                    j += 2
                else:
                    chars.append(text[j])
                    j += 1
            if j >= n:
                raise ParseError("unterminated string literal", i)
            tokens.append(("str", "".join(chars), i))
            i = j + 1
            continue
        if c in "+-*/!()<>":
            tokens.append(("op", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(("eof", None, n))
    return tokens


@dataclass(frozen=True)
class Expression:
    text: str
    ast: tuple

    def __repr__(self):  # keep journal/debug output compact
        return f"Expression({self.text!r})"


class _Parser:
    """Recursive descent over:

    expr := or ; or := and ('||' and)* ; and := cmp ('&&' cmp)* ;
    cmp := add (('=='|'!='|'<'|'<='|'>'|'>=') add)? ;
    add := mul (('+'|'-') mul)* ; mul := unary (('*'|'/') unary)* ;
    unary := '!' unary | atom ;
    atom := int | 'true' | 'false' | string | ident | '(' expr ')'
    """

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        kind, value, loc = self.take()
        if kind != "op" or value != op:
            raise ParseError(f"expected {op!r}", loc)

    def parse(self) -> tuple:
        ast = self.parse_or()
        kind, _, loc = self.peek()
        if kind != "eof":
            raise ParseError("trailing input after expression", loc)
        return ast

    def parse_or(self) -> tuple:
        left = self.parse_and()
        while self.peek()[:2] == ("op", "||"):
            self.take()
            left = ("or", left, self.parse_and())
        return left

    def parse_and(self) -> tuple:
        left = self.parse_cmp()
        while self.peek()[:2] == ("op", "&&"):
            self.take()
            left = ("and", left, self.parse_cmp())
        return left

    def parse_cmp(self) -> tuple:
        left = self.parse_add()
        kind, value, _ = self.peek()
        if kind == "op" and value in ("==", "!=", "<", "<=", ">", ">="):
            self.take()
            return ("cmp", value, left, self.parse_add())
        return left

    def parse_add(self) -> tuple:
        left = self.parse_mul()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in ("+", "-"):
                self.take()
                left = ("arith", value, left, self.parse_mul())
            else:
                return left

    def parse_mul(self) -> tuple:
        left = self.parse_unary()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in ("*", "/"):
                self.take()
                left = ("arith", value, left, self.parse_unary())
            else:
                return left

    def parse_unary(self) -> tuple:
        kind, value, _ = self.peek()
        if kind == "op" and value == "!":
            self.take()
            return ("not", self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> tuple:
        kind, value, loc = self.take()
        if kind == "int":
            if value > INT_MAX:
                raise ParseError("integer literal out of 64-bit range", loc)
            return ("int", value)
        if kind == "bool":
            return ("bool", value)
        if kind == "str":
            return ("str", value)
        if kind == "ident":
            return ("var", value)
        if kind == "op" and value == "(":
            inner = self.parse_or()
            self.expect_op(")")
            return inner
        raise ParseError("expected a value, variable, or parenthesised expression", loc)


def parse_expr(text: str) -> Expression:
    if not isinstance(text, str):
        raise ParseError(f"expression must be a string, got {type(text).__name__}")
    return Expression(text=text, ast=_Parser(text).parse())


def free_vars(expr: Expression) -> frozenset[str]:
    out: set[str] = set()

    def walk(node: tuple):
        tag = node[0]
        if tag == "var":
            out.add(node[1])
        elif tag in ("or", "and"):
            walk(node[1])
            walk(node[2])
        elif tag in ("cmp", "arith"):
            walk(node[2])
            walk(node[3])
        elif tag == "not":
            walk(node[1])

    walk(expr.ast)
    return frozenset(out)


def _check_int(value: int) -> int:
    if value < INT_MIN or value > INT_MAX:
        raise Overflow(f"integer result {value} out of 64-bit range")
    return value


def _type_name(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    return "string"


def eval_expr(expr: Expression, env: dict[str, object]):
    """Strict left-to-right evaluation; && and || short-circuit."""

    def ev(node: tuple):
        tag = node[0]
        if tag in ("int", "bool", "str"):
            return node[1]
        if tag == "var":
            if node[1] not in env:
                raise UndefinedVariable(node[1])
            return env[node[1]]
        if tag == "not":
            v = ev(node[1])
            if not isinstance(v, bool):
                raise TypeMismatch(f"! needs bool, got {_type_name(v)}")
            return not v
        if tag == "and":
            left = ev(node[1])
            if not isinstance(left, bool):
                raise TypeMismatch(f"&& needs bool, got {_type_name(left)}")
            if not left:
                return False
            right = ev(node[2])
            if not isinstance(right, bool):
                raise TypeMismatch(f"&& needs bool, got {_type_name(right)}")
            return right
        if tag == "or":
            left = ev(node[1])
            if not isinstance(left, bool):
                raise TypeMismatch(f"|| needs bool, got {_type_name(left)}")
            if left:
                return True
            right = ev(node[2])
            if not isinstance(right, bool):
                raise TypeMismatch(f"|| needs bool, got {_type_name(right)}")
            return right
        if tag == "cmp":
            op = node[1]
            left, right = ev(node[2]), ev(node[3])
            if _type_name(left) != _type_name(right):
                raise TypeMismatch(
                    f"{op} between {_type_name(left)} and {_type_name(right)}"
                )
            if op == "==":
                return left == right
            if op == "!=":
                return left != right
            if not isinstance(left, int) or isinstance(left, bool):
                raise TypeMismatch(f"{op} needs ints, got {_type_name(left)}")
            if op == "<":
                return left < right
            if op == "<=":
                return left <= right
            if op == ">":
                return left > right
            return left >= right
        if tag == "arith":
            op = node[1]
            left, right = ev(node[2]), ev(node[3])
            if op == "+" and isinstance(left, str) and isinstance(right, str):
                return left + right
            if isinstance(left, bool) or isinstance(right, bool) or \
                    not isinstance(left, int) or not isinstance(right, int):
                raise TypeMismatch(
                    f"{op} between {_type_name(left)} and {_type_name(right)}"
                )
            if op == "+":
                return _check_int(left + right)
            if op == "-":
                return _check_int(left - right)
            if op == "*":
                return _check_int(left * right)
            if right == 0:
                raise DivisionByZero(f"{left} / 0")
            # Truncate toward zero.
            q = abs(left) // abs(right)
            return _check_int(q if (left >= 0) == (right >= 0) else -q)
        raise TypeMismatch(f"unknown expression node {tag}")

    return ev(expr.ast)


# --- scenario documents ---------------------------------------------------

@dataclass(frozen=True)
class Handler:
    actions: tuple[tuple[str, Expression], ...]
    outcome: str  # "resolve" | "fail"


@dataclass(frozen=True)
class TaskBehavior:
    actor: str
    reads: frozenset[str]
    writes: tuple[tuple[str, Expression], ...]
    handler: Handler | None = None

    def write_vars(self) -> frozenset[str]:
        declared = {var for var, _ in self.writes}
        if self.handler:
            declared |= {var for var, _ in self.handler.actions}
        return frozenset(declared)


@dataclass(frozen=True)
class FaultSpec:
    task: str
    attempt: int
    kind: str  # "exception" | "prepare-no"
    message: str
    participant: str | None = None


@dataclass
class ScenarioSpec:
    tasks: dict[str, TaskBehavior]
    initial: dict[str, object]
    results: frozenset[str]
    faults: list[FaultSpec]


def _check_literal(value, where: str):
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        if value < INT_MIN or value > INT_MAX:
            raise ParseError(f"integer out of 64-bit range in {where}")
        return value
    if isinstance(value, str):
        return value
    raise ParseError(f"unsupported literal type {type(value).__name__} in {where}")


def _check_var_refs(var: str, expr: Expression, available: set[str], where: str) -> None:
    missing = free_vars(expr) - available
    if missing:
        raise ParseError(
            f"expression for {var!r} in {where} references undeclared "
            f"variable {sorted(missing)[0]!r}"
        )


def _parse_writes(raw, available: set[str], where: str) -> tuple[tuple[str, Expression], ...]:
    if not isinstance(raw, list):
        raise ParseError(f"writes must be a list in {where}")
    writes: list[tuple[str, Expression]] = []
    for entry in raw:
        if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[0], str)):
            raise ParseError(f"each write must be [variable, expression] in {where}")
        var, expr_text = entry
        expr = parse_expr(expr_text)
        _check_var_refs(var, expr, available, where)
        writes.append((var, expr))
        available.add(var)
    return tuple(writes)


def _parse_task(task_id: str, raw) -> TaskBehavior:
    if not isinstance(raw, dict):
        raise ParseError(f"task {task_id} entry must be an object")
    allowed = {"actor", "reads", "writes", "handler"}
    extra = set(raw) - allowed
    if extra:
        raise UnknownField(f"task {task_id}: {sorted(extra)[0]}")
    for key in allowed:
        if key not in raw:
            raise ParseError(f"task {task_id} missing field {key!r}")
    actor = raw["actor"]
    if not isinstance(actor, str) or not actor:
        raise ParseError(f"task {task_id}: actor must be a non-empty string")
    reads_raw = raw["reads"]
    if not isinstance(reads_raw, list) or not all(isinstance(r, str) for r in reads_raw):
        raise ParseError(f"task {task_id}: reads must be a list of variable names")
    reads = frozenset(reads_raw)

    available = set(reads)
    writes = _parse_writes(raw["writes"], available, f"task {task_id}")

    handler = None
    if raw["handler"] is not None:
        hraw = raw["handler"]
        if not isinstance(hraw, dict):
            raise ParseError(f"task {task_id}: handler must be an object or null")
        hextra = set(hraw) - {"actions", "outcome"}
        if hextra:
            raise UnknownField(f"task {task_id} handler: {sorted(hextra)[0]}")
        if "actions" not in hraw or "outcome" not in hraw:
            raise ParseError(f"task {task_id}: handler needs actions and outcome")
        if hraw["outcome"] not in (RESOLVE, FAIL):
            raise ParseError(f"task {task_id}: handler outcome must be resolve or fail")
        h_available = set(reads)
        actions = _parse_writes(hraw["actions"], h_available, f"task {task_id} handler")
        handler = Handler(actions=actions, outcome=hraw["outcome"])
    return TaskBehavior(actor=actor, reads=reads, writes=writes, handler=handler)


def _parse_fault(raw, index: int) -> FaultSpec:
    where = f"faults[{index}]"
    if not isinstance(raw, dict):
        raise ParseError(f"{where} must be an object")
    allowed = {"task", "attempt", "kind", "message", "participant"}
    extra = set(raw) - allowed
    if extra:
        raise UnknownField(f"{where}: {sorted(extra)[0]}")
    for key in ("task", "attempt", "kind", "message"):
        if key not in raw:
            raise ParseError(f"{where} missing field {key!r}")
    if not isinstance(raw["attempt"], int) or isinstance(raw["attempt"], bool) or raw["attempt"] < 1:
        raise ParseError(f"{where}: attempt must be a positive integer")
    kind = raw["kind"]
    if kind not in (EXCEPTION, PREPARE_NO):
        raise ParseError(f"{where}: kind must be {EXCEPTION!r} or {PREPARE_NO!r}")
    participant = raw.get("participant")
    if kind == PREPARE_NO and not participant:
        raise ParseError(f"{where}: prepare-no fault needs a participant")
    if kind == EXCEPTION and participant:
        raise ParseError(f"{where}: exception fault takes no participant")
    return FaultSpec(
        task=raw["task"],
        attempt=raw["attempt"],
        kind=kind,
        message=raw["message"],
        participant=participant,
    )


def parse_scenario(text: str) -> ScenarioSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos)
    return scenario_from_doc(doc)


def scenario_from_doc(doc) -> ScenarioSpec:
    if not isinstance(doc, dict):
        raise ParseError("scenario document must be a JSON object")
    expected = {"tasks", "initial", "results", "faults"}
    extra = set(doc) - expected
    if extra:
        raise UnknownField(sorted(extra)[0])
    missing = expected - set(doc)
    if missing:
        raise ParseError(f"scenario missing top-level key {sorted(missing)[0]!r}")

    if not isinstance(doc["tasks"], dict):
        raise ParseError("tasks must be an object")
    tasks = {tid: _parse_task(tid, raw) for tid, raw in doc["tasks"].items()}

    if not isinstance(doc["initial"], dict):
        raise ParseError("initial must be an object")
    initial = {
        var: _check_literal(value, f"initial[{var}]")
        for var, value in doc["initial"].items()
    }

    if not isinstance(doc["results"], list) or not all(isinstance(r, str) for r in doc["results"]):
        raise ParseError("results must be a list of variable names")

    if not isinstance(doc["faults"], list):
        raise ParseError("faults must be a list")
    faults = [_parse_fault(raw, i) for i, raw in enumerate(doc["faults"])]

    return ScenarioSpec(
        tasks=tasks,
        initial=initial,
        results=frozenset(doc["results"]),
        faults=faults,
    )


def scenario_to_doc(spec: ScenarioSpec) -> dict:
    def handler_doc(h: Handler | None):
        if h is None:
            return None
        return {
            "actions": [[var, expr.text] for var, expr in h.actions],
            "outcome": h.outcome,
        }

    return {
        "tasks": {
            tid: {
                "actor": b.actor,
                "reads": sorted(b.reads),
                "writes": [[var, expr.text] for var, expr in b.writes],
                "handler": handler_doc(b.handler),
            }
            for tid, b in sorted(spec.tasks.items())
        },
        "initial": dict(sorted(spec.initial.items())),
        "results": sorted(spec.results),
        "faults": [
            {
                "task": f.task,
                "attempt": f.attempt,
                "kind": f.kind,
                "message": f.message,
                **({"participant": f.participant} if f.participant else {}),
            }
            for f in spec.faults
        ],
    }


def serialize_scenario(spec: ScenarioSpec) -> str:
    return json.dumps(scenario_to_doc(spec), indent=2, sort_keys=True) + "\n"


# --- binding ---------------------------------------------------------------

@dataclass
class BoundModel:
    model: ProcessModel
    spec: ScenarioSpec
    graph: FlowGraph
    behaviors: NodeBehaviors
    guards: dict[str, Expression]  # flow id -> parsed guard


def build_behaviors(model: ProcessModel, spec: ScenarioSpec,
                    guards: dict[str, Expression]) -> NodeBehaviors:
    task_ids = frozenset(el.id for el in model.elements if el.kind == TASK)
    reads = {tid: spec.tasks[tid].reads for tid in task_ids if tid in spec.tasks}
    writes = {tid: spec.tasks[tid].write_vars() for tid in task_ids if tid in spec.tasks}
    guard_reads = {fid: free_vars(expr) for fid, expr in guards.items()}
    return NodeBehaviors(
        tasks=task_ids,
        reads=reads,
        writes=writes,
        guard_reads=guard_reads,
        initial_vars=frozenset(spec.initial),
        result_vars=spec.results,
    )


def bind(model: ProcessModel, spec: ScenarioSpec) -> BoundModel:
    """Pair every task with its behavior and statically check resolvability."""
    task_ids = {el.id for el in model.elements if el.kind == TASK}
    for tid in spec.tasks:
        if tid not in task_ids:
            raise UnknownTask(tid)
    for tid in sorted(task_ids):
        if tid not in spec.tasks:
            raise MissingBehavior(tid)

    lane_actors = {lane.actor for lane in model.lanes.values()}
    for tid in sorted(task_ids):
        lane = model.lane_of(tid)
        actor = spec.tasks[tid].actor
        if lane is None or lane.actor != actor:
            raise ActorMismatch(
                f"task {tid} is in lane {lane.actor if lane else '<none>'!r} "
                f"but its behavior declares actor {actor!r}"
            )

    for fault in spec.faults:
        if fault.task not in task_ids:
            raise UnknownTask(f"fault references unknown task {fault.task}")
        if fault.kind == PREPARE_NO and fault.participant not in lane_actors:
            raise ActorMismatch(
                f"prepare-no fault names undeclared actor {fault.participant!r}"
            )

    guards: dict[str, Expression] = {}
    for flow in model.flows:
        if flow.guard is not None:
            try:
                guards[flow.id] = parse_expr(flow.guard)
            except ParseError as exc:
                raise ParseError(f"guard on flow {flow.id}: {exc.detail}")

    graph = build_flow_graph(model)
    behaviors = build_behaviors(model, spec, guards)

    # A read is resolvable when the variable is an initial var or at least one
    # source->reader path writes it upstream.
    order = graph.topo_order()

    def writable_before(d: str) -> dict[str, bool]:
        pre: dict[str, bool] = {n: False for n in graph.nodes}
        post: dict[str, bool] = {n: False for n in graph.nodes}
        for n in order:
            pre[n] = any(post[e.src] for e in graph.preds[n])
            post[n] = pre[n] or d in behaviors.writes_of(n)
        return {"pre": pre, "post": post}  # type: ignore[return-value]

    cache: dict[str, dict] = {}

    def resolvable(d: str, node: str, after_node: bool) -> bool:
        if d in spec.initial:
            return True
        if d not in cache:
            cache[d] = writable_before(d)
        table = cache[d]["post" if after_node else "pre"]
        return table[node]

    for tid in sorted(task_ids):
        for d in sorted(spec.tasks[tid].reads):
            if not resolvable(d, tid, after_node=False):
                raise UnresolvableRead(d, tid)
    for fid, expr in sorted(guards.items()):
        src = next(f.source for f in model.flows if f.id == fid)
        for d in sorted(free_vars(expr)):
            if not resolvable(d, src, after_node=True):
                raise UnresolvableRead(d, f"guard:{fid}")

    bound_model = ProcessModel(
        id=model.id,
        elements=model.elements,
        flows=model.flows,
        lanes=model.lanes,
        initial_vars=frozenset(spec.initial),
        result_vars=spec.results,
    )
    return BoundModel(
        model=bound_model, spec=spec, graph=graph, behaviors=behaviors, guards=guards
    )
