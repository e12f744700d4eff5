"""Discrete-event execution engine for compiled contract-unit networks.

One FIFO event queue drives every node state machine.  Writes inside a
(sub)transaction are buffered; children commit buffers into their parent,
and only a top-level commit reaches the ledger, through a decentralized
two-phase commit that costs n^2 + 2n messages for n participants.  Failed
transactions recover committed descendants in reverse first-invocation
order and leave the ledger untouched.

Determinism contract: identical bundle + scenario + command sequence yields
byte-identical journals and ledger dumps.  Journal entries therefore carry
no wall-clock data; step timings live only in the metrics counters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .canon import canonical_json, sha256_hex
from .compiler import (
    ACTIVE as S_ACTIVE,
    DONE as S_DONE,
    IDLE as S_IDLE,
    K_AND_JOIN,
    K_AND_SPLIT,
    K_ENTRY,
    K_EXIT,
    K_TASK,
    K_XOR_MERGE,
    K_XOR_SPLIT,
    MAIN,
    ContractUnit,
    DeploymentBundle,
    NodeFsm,
    WireEdge,
    bundle_from_doc,
    bundle_to_doc,
)
from .errors import (
    CorruptCheckpoint,
    DivisionByZero,
    HashMismatch,
    NothingToStep,
    Overflow,
    ProtocolError,
    ReentrancyViolation,
    TypeMismatch,
    UndefinedVariable,
    VersionMismatch,
)
from .ledger import COMMITTED as EV_COMMITTED
from .ledger import Ledger, LedgerEvent
from .scenario import (
    EXCEPTION,
    PREPARE_NO,
    RESOLVE,
    Expression,
    FaultSpec,
    TaskBehavior,
    eval_expr,
    parse_expr,
)

RUNNING = "running"
AWAITING_REPAIR = "awaiting-repair"
DONE_SUCCESS = "done-success"
DONE_FAILED = "done-failed"

TX_ACTIVE = "Active"
TX_PREPARING = "Preparing"
TX_COMMITTED = "Committed"
TX_ABORTED = "Aborted"
TX_FAILED = "Failed"

COORDINATOR = "coordinator"

_EXPR_ERRORS = (UndefinedVariable, TypeMismatch, DivisionByZero, Overflow)


@dataclass
class TxContext:
    tx_id: str
    logical_name: str
    version: int
    parent: str | None
    status: str
    buffer: list[tuple[str, object]] = field(default_factory=list)
    participants: list[str] = field(default_factory=list)
    child_order: list[str] = field(default_factory=list)
    begin_seq: int = 0
    native: bool = False

    def to_doc(self) -> dict:
        return {
            "txId": self.tx_id,
            "logicalName": self.logical_name,
            "version": self.version,
            "parent": self.parent,
            "status": self.status,
            "buffer": [[v, val] for v, val in self.buffer],
            "participants": list(self.participants),
            "childOrder": list(self.child_order),
            "beginSeq": self.begin_seq,
            "native": self.native,
        }

    @staticmethod
    def from_doc(doc) -> "TxContext":
        return TxContext(
            tx_id=doc["txId"],
            logical_name=doc["logicalName"],
            version=doc["version"],
            parent=doc["parent"],
            status=doc["status"],
            buffer=[(v, val) for v, val in doc["buffer"]],
            participants=list(doc["participants"]),
            child_order=list(doc["childOrder"]),
            begin_seq=doc["beginSeq"],
            native=doc["native"],
        )


@dataclass
class Activation:
    act_id: str
    unit_name: str
    version: int
    tx_id: str | None
    parent_act: str | None
    parent_inv_node: str | None
    node_states: dict[str, str]
    join_arrivals: dict[str, int] = field(default_factory=dict)
    replay_skip: list[str] = field(default_factory=list)
    done: bool = False

    def to_doc(self) -> dict:
        return {
            "actId": self.act_id,
            "unitName": self.unit_name,
            "version": self.version,
            "txId": self.tx_id,
            "parentAct": self.parent_act,
            "parentInvNode": self.parent_inv_node,
            "nodeStates": dict(sorted(self.node_states.items())),
            "joinArrivals": dict(sorted(self.join_arrivals.items())),
            "replaySkip": list(self.replay_skip),
            "done": self.done,
        }

    @staticmethod
    def from_doc(doc) -> "Activation":
        return Activation(
            act_id=doc["actId"],
            unit_name=doc["unitName"],
            version=doc["version"],
            tx_id=doc["txId"],
            parent_act=doc["parentAct"],
            parent_inv_node=doc["parentInvNode"],
            node_states=dict(doc["nodeStates"]),
            join_arrivals={k: v for k, v in doc["joinArrivals"].items()},
            replay_skip=list(doc["replaySkip"]),
            done=doc["done"],
        )


@dataclass
class StepReport:
    step_index: int
    event: dict
    fired: list[str]
    mode: str


class Engine:
    """Single logical event loop over one session's state."""

    def __init__(self, bundle: DeploymentBundle, scenario_doc=None, seed_vars=None):
        if scenario_doc is not None:
            if sha256_hex(canonical_json(scenario_doc)) != bundle.scenario_hash:
                raise HashMismatch("scenario does not match the bundle's scenarioHash")
        self.bundle = bundle
        self.ledger = Ledger()
        self.journal: list[dict] = []
        self.queue: list[dict] = []
        self.tx_tree: dict[str, TxContext] = {}
        self.tx_order: list[str] = []
        self.activations: dict[str, Activation] = {}
        self.act_order: list[str] = []
        self.attempt_counts: dict[str, int] = {}
        self.mode = RUNNING
        self.seq = 0
        self.step_count = 0
        self.instance_counts: dict[str, int] = {}
        self.armed_no: dict[str, list[dict]] = {}
        self.injected_faults: list[FaultSpec] = []
        self.pending_failure: dict | None = None
        self.pending_resume: tuple[str, str] | None = None
        self.deferred: list[dict] = []
        self.gate: str | None = None
        self.locks: set[tuple[str, str]] = set()
        self.replay_pending: dict | None = None
        self.current_ticket: dict | None = None
        self.ticket_counter = 0
        self.patch_applied = False
        self.messages_2pc: dict[str, int] = {}
        self.step_delays: list[tuple[int, int]] = []  # (step index, microseconds)
        self.initial_vars: dict[str, object] = dict(
            bundle.scenario_doc.get("initial", {})
        )
        if seed_vars:
            self.initial_vars.update(seed_vars)
        self._guard_cache: dict[str, Expression] = {}

        doc = bundle.scenario_doc
        for fdoc in doc.get("faults", []):
            self.injected_faults.append(FaultSpec(
                task=fdoc["task"],
                attempt=fdoc["attempt"],
                kind=fdoc["kind"],
                message=fdoc["message"],
                participant=fdoc.get("participant"),
            ))

    # --- plumbing --------------------------------------------------------

    def _journal_entry(self, kind: str, **payload) -> dict:
        self.seq += 1
        entry = {"seq": self.seq, "kind": kind}
        entry.update(payload)
        self.journal.append(entry)
        self._on_journal(entry)
        return entry

    def _on_journal(self, entry: dict) -> None:
        """Hook for live observers (the HTTP gateway's event stream)."""

    def _guard_expr(self, text: str) -> Expression:
        if text not in self._guard_cache:
            self._guard_cache[text] = parse_expr(text)
        return self._guard_cache[text]

    def unit_for(self, act: Activation) -> ContractUnit:
        return self.bundle.unit(act.unit_name, act.version)

    def journal_dump(self) -> str:
        return "".join(canonical_json(e) + "\n" for e in self.journal)

    def journal_hash(self) -> str:
        return sha256_hex(self.journal_dump())

    # --- session lifecycle -------------------------------------------------

    @staticmethod
    def start_session(bundle: DeploymentBundle, scenario_doc=None, seed_vars=None) -> "Engine":
        engine = Engine(bundle, scenario_doc=scenario_doc, seed_vars=seed_vars)
        main_unit = bundle.unit(MAIN)
        act = Activation(
            act_id=MAIN,
            unit_name=MAIN,
            version=main_unit.version,
            tx_id=None,
            parent_act=None,
            parent_inv_node=None,
            node_states={n: S_IDLE for n in main_unit.network.machines},
        )
        engine.activations[MAIN] = act
        engine.act_order.append(MAIN)
        engine.queue.append({"type": "token", "act": MAIN, "node": main_unit.network.entry})
        return engine

    def step(self) -> StepReport:
        if self.mode != RUNNING:
            raise NothingToStep(f"engine mode is {self.mode}")
        if not self.queue:
            raise NothingToStep("event queue is empty")
        started = time.perf_counter()
        event = self.queue.pop(0)
        fired = self._dispatch(event)
        self.step_count += 1
        micros = int((time.perf_counter() - started) * 1_000_000)
        self.step_delays.append((self.step_count, micros))
        return StepReport(self.step_count, event, fired, self.mode)

    def run(self, max_steps: int | None = None) -> str:
        steps = 0
        while self.mode == RUNNING and self.queue:
            if max_steps is not None and steps >= max_steps:
                return self.mode
            self.step()
            steps += 1
        if self.mode == RUNNING and not self.queue:
            raise ProtocolError("event queue drained before the process completed")
        return self.mode

    # --- event dispatch ----------------------------------------------------

    def _dispatch(self, event: dict) -> list[str]:
        if event["type"] != "token":
            raise ProtocolError(f"unknown event type {event['type']}")
        act = self.activations[event["act"]]
        node = event["node"]
        if act.done:
            return []
        machine = self.unit_for(act).network.machines[node]
        fired: list[str] = [f"{act.act_id}:{node}"]

        if machine.kind == K_ENTRY:
            # Start events carry no semantics; the token chains straight
            # through so the first step already reaches a real node.
            act.node_states[node] = S_DONE
            wire = self.unit_for(act).network.outgoing(node)[0]
            fired.extend(self._dispatch({"type": "token", "act": act.act_id, "node": wire.dst}))
            return fired
        if machine.kind == K_EXIT:
            act.node_states[node] = S_DONE
            act.done = True
            self.mode = DONE_SUCCESS
            return fired
        if machine.kind == K_AND_JOIN:
            arrivals = act.join_arrivals.get(node, 0) + 1
            if arrivals < machine.indegree:
                act.join_arrivals[node] = arrivals
                return fired
            act.join_arrivals[node] = 0
            act.node_states[node] = S_DONE
            self._finish_node(act, node)
            return fired
        if machine.kind in (K_XOR_MERGE, K_AND_SPLIT):
            act.node_states[node] = S_DONE
            self._finish_node(act, node)
            return fired
        if machine.kind == K_XOR_SPLIT:
            self._fire_xor_split(act, node)
            return fired
        if machine.kind == K_TASK and machine.invokes:
            self._fire_invocation(act, node, machine)
            return fired
        if machine.kind == K_TASK:
            self._fire_task(act, node, machine)
            return fired
        raise ProtocolError(f"unhandled machine kind {machine.kind}")

    def _finish_node(self, act: Activation, node: str) -> None:
        network = self.unit_for(act).network
        if node == network.exit and act.act_id != MAIN:
            self._complete_activation(act)
            return
        machine = network.machines[node]
        wires = network.outgoing(node)
        if machine.invokes and machine.exit_kind == "ExclusiveGateway" and len(wires) >= 2:
            # The collapsed child ends in an exclusive split: route by guard.
            chosen = self._choose_xor_wire(act, node, wires)
            if chosen is not None:
                self.queue.append({"type": "token", "act": act.act_id, "node": chosen.dst})
            return
        for wire in wires:
            self.queue.append({"type": "token", "act": act.act_id, "node": wire.dst})

    def _choose_xor_wire(self, act: Activation, node: str, wires) -> WireEdge | None:
        """First outgoing flow whose guard holds, else the default flow; a
        dead end or a guard error fails the enclosing transaction."""
        ctx = self.tx_tree.get(act.tx_id) if act.tx_id else None
        default_wire = None
        try:
            for wire in wires:
                if wire.is_default:
                    default_wire = wire
                    continue
                if wire.guard is None:
                    continue
                env = self._guard_env(ctx, self._guard_expr(wire.guard))
                value = eval_expr(self._guard_expr(wire.guard), env)
                if not isinstance(value, bool):
                    raise TypeMismatch(f"guard on {wire.flow_id} is not boolean")
                self._journal_entry(
                    "GuardEvaluated",
                    txId=ctx.tx_id if ctx else None,
                    node=node,
                    flowId=wire.flow_id,
                    value=value,
                )
                if value:
                    return wire
        except _EXPR_ERRORS as exc:
            self._gateway_fault(act, node, f"guard evaluation failed: {exc.detail}")
            return None
        if default_wire is None:
            self._gateway_fault(act, node, "no guard matched and no default flow")
            return None
        return default_wire

    def _fire_xor_split(self, act: Activation, node: str) -> None:
        network = self.unit_for(act).network
        if node == network.exit and act.act_id != MAIN:
            # A split on the region boundary has no internal branches; the
            # parent network routes at the invocation node instead.
            act.node_states[node] = S_DONE
            self._complete_activation(act)
            return
        chosen = self._choose_xor_wire(act, node, network.outgoing(node))
        if chosen is None:
            return
        act.node_states[node] = S_DONE
        self.queue.append({"type": "token", "act": act.act_id, "node": chosen.dst})

    def _guard_env(self, ctx: TxContext | None, expr: Expression) -> dict:
        from .scenario import free_vars

        env = {}
        for var in sorted(free_vars(expr)):
            value = self._scoped_lookup(ctx, var)
            if value is not _MISSING:
                env[var] = value
        return env

    def _gateway_fault(self, act: Activation, node: str, message: str) -> None:
        self._journal_entry(
            "FaultInjected", stage="fired", sort="guard", taskId=node, message=message
        )
        ctx = self.tx_tree.get(act.tx_id) if act.tx_id else None
        cause = {"kind": "guard", "taskId": node, "message": message, "attempt": 0}
        if ctx is not None:
            self._fail_transaction(ctx, cause)
        else:
            self.mode = DONE_FAILED
            self.pending_failure = cause

    # --- transactions ------------------------------------------------------

    def _next_tx_id(self, logical_name: str) -> str:
        n = self.instance_counts.get(logical_name, 0) + 1
        self.instance_counts[logical_name] = n
        return f"{logical_name}#{n}"

    def _fire_invocation(self, act: Activation, node: str, machine: NodeFsm) -> None:
        is_top = act.tx_id is None
        if is_top and self.gate is not None:
            self.deferred.append({"type": "token", "act": act.act_id, "node": node})
            return
        if machine.entry_kind == "ParallelGateway" and machine.indegree >= 2:
            # The collapsed child starts at a parallel join: synchronize the
            # arrivals here before invoking it.
            arrivals = act.join_arrivals.get(node, 0) + 1
            if arrivals < machine.indegree:
                act.join_arrivals[node] = arrivals
                return
            act.join_arrivals[node] = 0
        act.node_states[node] = S_ACTIVE
        ctx = self._begin_tx(act, node, machine.invokes)
        if is_top:
            self.gate = ctx.tx_id

    def _begin_tx(self, parent_act: Activation, inv_node: str, logical_name: str) -> TxContext:
        version = self.bundle.router.active_version(logical_name)
        unit = self.bundle.unit(logical_name, version)
        tx_id = self._next_tx_id(logical_name)
        parent_ctx = self.tx_tree.get(parent_act.tx_id) if parent_act.tx_id else None
        entry = self._journal_entry(
            "TxBegun",
            txId=tx_id,
            logicalName=logical_name,
            version=version,
            parentTxId=parent_ctx.tx_id if parent_ctx else None,
        )
        ctx = TxContext(
            tx_id=tx_id,
            logical_name=logical_name,
            version=version,
            parent=parent_ctx.tx_id if parent_ctx else None,
            status=TX_ACTIVE,
            begin_seq=entry["seq"],
        )
        self.tx_tree[tx_id] = ctx
        self.tx_order.append(tx_id)
        if parent_ctx:
            parent_ctx.child_order.append(tx_id)
        child = Activation(
            act_id=tx_id,
            unit_name=logical_name,
            version=version,
            tx_id=tx_id,
            parent_act=parent_act.act_id,
            parent_inv_node=inv_node,
            node_states={n: S_IDLE for n in unit.network.machines},
        )
        self.activations[tx_id] = child
        self.act_order.append(tx_id)
        if (
            self.replay_pending is not None
            and self.replay_pending["logicalName"] == logical_name
        ):
            self._apply_replay(ctx, child, unit)
        self.queue.append({"type": "token", "act": tx_id, "node": unit.network.entry})
        return ctx

    def _apply_replay(self, ctx: TxContext, act: Activation, unit: ContractUnit) -> None:
        payload = self.replay_pending
        self.replay_pending = None
        for item in payload["tasks"]:
            writes = [(var, value) for var, value in item["writes"]]
            ctx.buffer.extend(writes)
            self._add_participant(ctx, item["actor"])
            self._journal_entry(
                "TaskCompleted",
                txId=ctx.tx_id,
                taskId=item["taskId"],
                actor=item["actor"],
                reads={},
                writes=[[var, value] for var, value in writes],
                replayed=True,
                viaHandler=False,
                attempt=0,
            )
            if item["taskId"] in unit.network.machines:
                act.replay_skip.append(item["taskId"])

    def _add_participant(self, ctx: TxContext, actor: str) -> None:
        walk: TxContext | None = ctx
        while walk is not None:
            if actor not in walk.participants:
                walk.participants.append(actor)
            walk = self.tx_tree.get(walk.parent) if walk.parent else None

    def _complete_activation(self, act: Activation) -> None:
        ctx = self.tx_tree[act.tx_id]
        if ctx.parent is not None:
            self._commit_child(ctx)
        else:
            if not self._commit_top(ctx):
                return
        act.done = True
        parent = self.activations[act.parent_act]
        parent.node_states[act.parent_inv_node] = S_DONE
        if ctx.parent is None:
            self.release_gate_of(ctx.tx_id)
        self._finish_node(parent, act.parent_inv_node)

    def _commit_child(self, ctx: TxContext) -> None:
        parent = self.tx_tree[ctx.parent]
        if parent.status != TX_ACTIVE:
            raise ProtocolError(
                f"cannot commit {ctx.tx_id}: parent {parent.tx_id} is {parent.status}"
            )
        parent.buffer.extend(ctx.buffer)
        ctx.buffer = []
        ctx.status = TX_COMMITTED
        self._journal_entry(
            "TxCommitted", txId=ctx.tx_id, parentTxId=parent.tx_id, block=None
        )

    def _commit_top(self, ctx: TxContext) -> bool:
        """Two-phase commit: PREPARE to each participant, every participant
        broadcasts its VOTE to the coordinator and all peers, DECISION to
        each.  n participants cost exactly n^2 + 2n messages."""
        ctx.status = TX_PREPARING
        participants = list(ctx.participants)
        n = len(participants)
        if n == 0:
            if ctx.buffer:
                raise ProtocolError(f"{ctx.tx_id} has writes but no participants")
            ctx.status = TX_COMMITTED
            self._journal_entry("TxCommitted", txId=ctx.tx_id, parentTxId=None, block=None)
            return True

        armed = self.armed_no.get(ctx.tx_id, [])
        no_voters = {a["participant"] for a in armed}
        count = 0
        for p in participants:
            self._journal_entry(
                "MessageSent", txId=ctx.tx_id, phase="prepare",
                sender=COORDINATOR, recipient=p,
            )
            count += 1
        votes: dict[str, str] = {}
        for p in participants:
            vote = "no" if p in no_voters else "yes"
            votes[p] = vote
            for recipient in [COORDINATOR] + [q for q in participants if q != p]:
                self._journal_entry(
                    "MessageSent", txId=ctx.tx_id, phase="vote",
                    sender=p, recipient=recipient, vote=vote,
                )
                count += 1
        decision = "commit" if all(v == "yes" for v in votes.values()) else "abort"
        for p in participants:
            self._journal_entry(
                "MessageSent", txId=ctx.tx_id, phase="decision",
                sender=COORDINATOR, recipient=p, decision=decision,
            )
            count += 1
        self.messages_2pc[ctx.tx_id] = self.messages_2pc.get(ctx.tx_id, 0) + count

        if decision == "commit":
            ref = self.ledger.apply_block(
                ctx.tx_id,
                ctx.buffer,
                [LedgerEvent(EV_COMMITTED, ctx.tx_id, None, ctx.logical_name)],
            )
            ctx.buffer = []
            ctx.status = TX_COMMITTED
            self._journal_entry(
                "TxCommitted", txId=ctx.tx_id, parentTxId=None,
                block={"height": ref.height, "hash": ref.content_hash},
            )
            return True

        first = armed[0]
        cause = {
            "kind": "prepare-no",
            "taskId": first["taskId"],
            "message": first["message"],
            "participant": first["participant"],
            "attempt": first["attempt"],
        }
        self._fail_transaction(ctx, cause)
        return False

    def _recover_committed(self, ctx: TxContext) -> None:
        for child_id in reversed(ctx.child_order):
            child = self.tx_tree[child_id]
            if child.status == TX_COMMITTED:
                self._recover_committed(child)
        for p in ctx.participants:
            self.ledger.emit_notice(ctx.tx_id, p, "release local resources")
            self._journal_entry("RecoveryNotified", txId=ctx.tx_id, participant=p)

    def abort(self, ctx: TxContext, cause: dict, terminal: str, cascaded: bool = False) -> None:
        """Reverse-order recovery; the ledger's blocks and state stay untouched."""
        for child_id in reversed(ctx.child_order):
            child = self.tx_tree[child_id]
            if child.status == TX_COMMITTED:
                self._recover_committed(child)
            elif child.status in (TX_ACTIVE, TX_PREPARING):
                self.abort(child, cause, TX_ABORTED, cascaded=True)
        for p in ctx.participants:
            self.ledger.emit_notice(ctx.tx_id, p, "release local resources")
            self._journal_entry("RecoveryNotified", txId=ctx.tx_id, participant=p)
        ctx.buffer = []
        ctx.status = terminal
        self._journal_entry(
            "TxAborted", txId=ctx.tx_id, status=terminal, cascaded=cascaded, cause=cause
        )

    def _discard_activation_events(self, act_id: str) -> None:
        doomed = {act_id}
        changed = True
        while changed:
            changed = False
            for a in self.activations.values():
                if a.parent_act in doomed and a.act_id not in doomed:
                    doomed.add(a.act_id)
                    changed = True
        self.queue = [e for e in self.queue if e.get("act") not in doomed]
        for a_id in doomed:
            self.activations[a_id].done = True

    def _fail_transaction(self, ctx: TxContext, cause: dict) -> None:
        self.abort(ctx, cause, TX_FAILED)
        act = self.activations.get(ctx.tx_id)
        if act is not None:
            parent = self.activations[act.parent_act]
            parent.node_states[act.parent_inv_node] = S_IDLE
            self.pending_resume = (parent.act_id, act.parent_inv_node)
            self._discard_activation_events(act.act_id)
        self.pending_failure = {
            "txId": ctx.tx_id,
            "logicalName": ctx.logical_name,
            "taskId": cause.get("taskId", ""),
            "message": cause.get("message", ""),
            "attempt": cause.get("attempt", 0),
        }
        self.mode = AWAITING_REPAIR
        self.patch_applied = False
        # A failed child suspends its chain but the chain still owns the
        # ledger gate until repair finishes or escalation aborts the top.
        self.release_gate_of(ctx.tx_id)

    def release_gate_of(self, tx_id: str) -> None:
        if self.gate == tx_id:
            self._release_gate()

    def _release_gate(self) -> None:
        self.gate = None
        if self.deferred:
            self.queue.extend(self.deferred)
            self.deferred = []

    # --- task execution ------------------------------------------------------

    def _find_fault(self, task: str, attempt: int) -> FaultSpec | None:
        for fault in self.injected_faults:
            if fault.task == task and fault.attempt == attempt:
                return fault
        return None

    def _scoped_lookup(self, ctx: TxContext | None, var: str):
        walk = ctx
        while walk is not None:
            for v, value in reversed(walk.buffer):
                if v == var:
                    return value
            walk = self.tx_tree.get(walk.parent) if walk.parent else None
        from .ledger import ABSENT

        value = self.ledger.read(var)
        if value is not ABSENT:
            return value
        if var in self.initial_vars:
            return self.initial_vars[var]
        return _MISSING

    def _fire_task(self, act: Activation, node: str, machine: NodeFsm) -> None:
        if node in act.replay_skip:
            act.node_states[node] = S_DONE
            self._finish_node(act, node)
            return
        is_native = act.tx_id is None
        if is_native and self.gate is not None:
            self.deferred.append({"type": "token", "act": act.act_id, "node": node})
            return
        act.node_states[node] = S_ACTIVE

        if is_native:
            ctx = TxContext(
                tx_id=self._next_tx_id(f"{MAIN}.{node}"),
                logical_name=MAIN,
                version=act.version,
                parent=None,
                status=TX_ACTIVE,
                native=True,
            )
            entry = self._journal_entry(
                "TxBegun", txId=ctx.tx_id, logicalName=MAIN, version=act.version,
                parentTxId=None,
            )
            ctx.begin_seq = entry["seq"]
            self.tx_tree[ctx.tx_id] = ctx
            self.tx_order.append(ctx.tx_id)
        else:
            ctx = self.tx_tree[act.tx_id]

        completed = self.exec_task(act, node, machine, ctx)
        if not completed:
            return
        if is_native:
            if ctx.buffer:
                ref = self.ledger.apply_block(
                    ctx.tx_id,
                    ctx.buffer,
                    [LedgerEvent(EV_COMMITTED, ctx.tx_id, None, node)],
                )
                ctx.buffer = []
                block = {"height": ref.height, "hash": ref.content_hash}
            else:
                block = None
            ctx.status = TX_COMMITTED
            self._journal_entry("TxCommitted", txId=ctx.tx_id, parentTxId=None, block=block)
        act.node_states[node] = S_DONE
        self._finish_node(act, node)

    def exec_task(self, act: Activation, node: str, machine: NodeFsm, ctx: TxContext) -> bool:
        """Run one task attempt.  Returns True when the task completed (its
        writes are buffered); False when the enclosing transaction failed."""
        unit = self.unit_for(act)
        behavior = machine.behavior
        if behavior is None:
            raise ProtocolError(f"task {node} has no behavior")
        lock = (act.unit_name, node)
        if lock in self.locks:
            self.attempt_counts[node] = self.attempt_counts.get(node, 0) + 1
            self._journal_entry(
                "FaultInjected", stage="fired", sort="reentrancy", taskId=node,
                message=f"re-entrant execution of {node} in {act.unit_name}",
            )
            self._task_failure(act, node, ctx, {
                "kind": "reentrancy", "taskId": node,
                "message": f"re-entrant execution of {node}",
                "attempt": self.attempt_counts[node],
            })
            return False
        self.locks.add(lock)
        try:
            self.attempt_counts[node] = self.attempt_counts.get(node, 0) + 1
            attempt = self.attempt_counts[node]
            fault = self._find_fault(node, attempt)

            if fault is not None and fault.kind == EXCEPTION:
                self._journal_entry(
                    "FaultInjected", stage="fired", sort="injected", taskId=node,
                    message=fault.message, attempt=attempt,
                )
                return self._handle_task_fault(act, node, machine, ctx, {
                    "kind": "exception", "taskId": node,
                    "message": fault.message, "attempt": attempt,
                })

            if fault is not None and fault.kind == PREPARE_NO:
                self._journal_entry(
                    "FaultInjected", stage="fired", sort="prepare-no", taskId=node,
                    message=fault.message, participant=fault.participant, attempt=attempt,
                )
                top = ctx
                while top.parent is not None:
                    top = self.tx_tree[top.parent]
                self.armed_no.setdefault(top.tx_id, []).append({
                    "participant": fault.participant,
                    "taskId": node,
                    "message": fault.message,
                    "attempt": attempt,
                })

            resolved = self._resolve_reads(act, node, ctx, behavior, unit)
            if resolved is None:
                return False
            env, snapshot = resolved

            pending: list[tuple[str, object]] = []
            try:
                for var, expr in behavior.writes:
                    value = eval_expr(expr, env)
                    env[var] = value
                    pending.append((var, value))
            except _EXPR_ERRORS as exc:
                self._journal_entry(
                    "FaultInjected", stage="fired", sort="expr", taskId=node,
                    message=exc.detail, attempt=attempt,
                )
                return self._handle_task_fault(act, node, machine, ctx, {
                    "kind": "expr", "taskId": node,
                    "message": exc.detail, "attempt": attempt,
                })

            if ctx.native and self.armed_no.get(ctx.tx_id):
                armed = self.armed_no[ctx.tx_id][0]
                self._task_failure(act, node, ctx, {
                    "kind": "prepare-no", "taskId": armed["taskId"],
                    "message": armed["message"], "attempt": armed["attempt"],
                })
                return False

            ctx.buffer.extend(pending)
            self._add_participant(ctx, behavior.actor)
            self._journal_entry(
                "TaskCompleted", txId=ctx.tx_id, taskId=node, actor=behavior.actor,
                reads=snapshot, writes=[[var, value] for var, value in pending],
                replayed=False, viaHandler=False, attempt=attempt,
            )
            return True
        finally:
            self.locks.discard(lock)

    def _resolve_reads(self, act, node, ctx, behavior: TaskBehavior, unit: ContractUnit):
        env: dict[str, object] = {}
        snapshot: dict[str, object] = {}
        attempt = self.attempt_counts.get(node, 0)
        for var in sorted(behavior.reads):
            if var not in unit.readable:
                self._journal_entry(
                    "FaultInjected", stage="fired", sort="scope", taskId=node,
                    message=f"read of {var} outside the readable scope of {unit.logical_name}",
                    attempt=attempt,
                )
                self._task_failure(act, node, ctx, {
                    "kind": "scope", "taskId": node,
                    "message": f"read of {var} outside scope", "attempt": attempt,
                })
                return None
            value = self._scoped_lookup(ctx, var)
            if value is _MISSING:
                # The handler gets no chance: it resolves the same reads and
                # would hit the same missing variable.
                self._journal_entry(
                    "FaultInjected", stage="fired", sort="expr", taskId=node,
                    message=f"undefined variable {var}", attempt=attempt,
                )
                self._task_failure(act, node, ctx, {
                    "kind": "expr", "taskId": node,
                    "message": f"undefined variable {var}", "attempt": attempt,
                })
                return None
            env[var] = value
            snapshot[var] = value
        return env, snapshot

    def _handle_task_fault(self, act, node, machine, ctx: TxContext, cause: dict) -> bool:
        """Give the task's exception handler a chance; unresolved means the
        enclosing transaction fails.  Returns True when the handler resolved."""
        behavior = machine.behavior if machine is not None else None
        handler = behavior.handler if behavior is not None else None
        if handler is not None:
            unit = self.unit_for(act)
            try:
                env: dict[str, object] = {}
                snapshot: dict[str, object] = {}
                for var in sorted(behavior.reads):
                    if var not in unit.readable:
                        raise TypeMismatch(f"read of {var} outside scope")
                    value = self._scoped_lookup(ctx, var)
                    if value is _MISSING:
                        raise UndefinedVariable(var)
                    env[var] = value
                    snapshot[var] = value
                pending: list[tuple[str, object]] = []
                for var, expr in handler.actions:
                    value = eval_expr(expr, env)
                    env[var] = value
                    pending.append((var, value))
            except _EXPR_ERRORS as exc:
                self._task_failure(act, node, ctx, {
                    "kind": "handler", "taskId": node,
                    "message": f"handler failed: {exc.detail}",
                    "attempt": cause.get("attempt", 0),
                })
                return False
            if handler.outcome == RESOLVE:
                ctx.buffer.extend(pending)
                self._add_participant(ctx, behavior.actor)
                self._journal_entry(
                    "TaskCompleted", txId=ctx.tx_id, taskId=node, actor=behavior.actor,
                    reads=snapshot, writes=[[var, value] for var, value in pending],
                    replayed=False, viaHandler=True, attempt=cause.get("attempt", 0),
                )
                return True
        self._task_failure(act, node, ctx, cause)
        return False

    def _task_failure(self, act: Activation, node: str, ctx: TxContext, cause: dict) -> None:
        if ctx.native:
            self.abort(ctx, cause, TX_FAILED)
            act.node_states[node] = S_IDLE
            self.pending_resume = (act.act_id, node)
            self.pending_failure = {
                "txId": ctx.tx_id,
                "logicalName": ctx.logical_name,
                "taskId": cause.get("taskId", node),
                "message": cause.get("message", ""),
                "attempt": cause.get("attempt", 0),
            }
            self.mode = AWAITING_REPAIR
            self.patch_applied = False
        else:
            self._fail_transaction(ctx, cause)

    # --- re-entrancy guard (public surface) -----------------------------------

    def reentrancy_guard(self, unit_name: str, task_id: str) -> tuple[str, str]:
        """Acquire the execution lock for (unit, task); raises when held."""
        lock = (unit_name, task_id)
        if lock in self.locks:
            self._journal_entry(
                "FaultInjected", stage="fired", sort="reentrancy", taskId=task_id,
                message=f"re-entrant acquisition of {task_id} in {unit_name}",
            )
            raise ReentrancyViolation(f"{unit_name}/{task_id}")
        self.locks.add(lock)
        return lock

    def release_guard(self, lock: tuple[str, str]) -> None:
        self.locks.discard(lock)

    # --- fault injection (gateway surface) -------------------------------------

    def inject_fault(self, fault: FaultSpec) -> None:
        self.injected_faults.append(fault)
        self._journal_entry(
            "FaultInjected", stage="registered", sort=fault.kind, taskId=fault.task,
            message=fault.message, attempt=fault.attempt,
            **({"participant": fault.participant} if fault.participant else {}),
        )

    # --- metrics ---------------------------------------------------------------

    def metrics(self) -> dict:
        return {
            "messages2pc": dict(self.messages_2pc),
            "stepDelays": [[i, d] for i, d in self.step_delays],
            "taskAttempts": dict(sorted(self.attempt_counts.items())),
            "steps": self.step_count,
        }

    def recount_from_journal(self) -> dict:
        """Independent recount of the live counters from journal entries."""
        messages: dict[str, int] = {}
        attempts: dict[str, int] = {}
        for entry in self.journal:
            if entry["kind"] == "MessageSent":
                messages[entry["txId"]] = messages.get(entry["txId"], 0) + 1
            elif entry["kind"] == "TaskCompleted":
                if not entry["replayed"] and not entry["viaHandler"]:
                    attempts[entry["taskId"]] = attempts.get(entry["taskId"], 0) + 1
            elif entry["kind"] == "FaultInjected" and entry.get("stage") == "fired":
                if entry.get("sort") in ("injected", "scope", "reentrancy", "expr"):
                    attempts[entry["taskId"]] = attempts.get(entry["taskId"], 0) + 1
        return {"messages2pc": messages, "taskAttempts": attempts}

    # --- checkpointing -----------------------------------------------------------

    def checkpoint(self) -> dict:
        doc = {
            "formatVersion": 1,
            "modelHash": self.bundle.model_hash,
            "scenarioHash": self.bundle.scenario_hash,
            "bundle": bundle_to_doc(self.bundle),
            "engine": {
                "queue": list(self.queue),
                "txTree": {tx_id: self.tx_tree[tx_id].to_doc() for tx_id in self.tx_order},
                "txOrder": list(self.tx_order),
                "attemptCounts": dict(sorted(self.attempt_counts.items())),
                "mode": self.mode,
                "activations": [self.activations[a].to_doc() for a in self.act_order],
                "instanceCounts": dict(sorted(self.instance_counts.items())),
                "armedNo": {k: list(v) for k, v in sorted(self.armed_no.items())},
                "injectedFaults": [
                    {
                        "task": f.task, "attempt": f.attempt, "kind": f.kind,
                        "message": f.message, "participant": f.participant,
                    }
                    for f in self.injected_faults
                ],
                "pendingFailure": self.pending_failure,
                "pendingResume": list(self.pending_resume) if self.pending_resume else None,
                "deferred": list(self.deferred),
                "gate": self.gate,
                "locks": sorted([list(l) for l in self.locks]),
                "replayPending": self.replay_pending,
                "ticket": self.current_ticket,
                "ticketCounter": self.ticket_counter,
                "patchApplied": self.patch_applied,
                "stepCount": self.step_count,
                "seq": self.seq,
                "initialVars": dict(sorted(self.initial_vars.items())),
            },
            "journal": list(self.journal),
            "ledgerBlocks": self.ledger.to_doc(),
            "ledgerEvents": [e.to_doc() for e in self.ledger.event_log],
            "metrics": self.metrics(),
            "selfHash": "",
        }
        doc["selfHash"] = sha256_hex(canonical_json(doc))
        return doc

    @staticmethod
    def restore(doc) -> "Engine":
        if not isinstance(doc, dict) or "formatVersion" not in doc:
            raise CorruptCheckpoint("not a checkpoint document")
        if doc["formatVersion"] != 1:
            raise VersionMismatch(f"unsupported checkpoint format {doc['formatVersion']}")
        claimed = doc.get("selfHash")
        verify = dict(doc)
        verify["selfHash"] = ""
        if sha256_hex(canonical_json(verify)) != claimed:
            raise CorruptCheckpoint("selfHash does not match checkpoint content")

        bundle = bundle_from_doc(doc["bundle"])
        engine = Engine(bundle)
        e = doc["engine"]
        engine.queue = [dict(ev) for ev in e["queue"]]
        engine.tx_order = list(e["txOrder"])
        engine.tx_tree = {tx_id: TxContext.from_doc(e["txTree"][tx_id]) for tx_id in engine.tx_order}
        engine.attempt_counts = {k: v for k, v in e["attemptCounts"].items()}
        engine.mode = e["mode"]
        engine.activations = {}
        engine.act_order = []
        for adoc in e["activations"]:
            act = Activation.from_doc(adoc)
            engine.activations[act.act_id] = act
            engine.act_order.append(act.act_id)
        engine.instance_counts = {k: v for k, v in e["instanceCounts"].items()}
        engine.armed_no = {k: [dict(x) for x in v] for k, v in e["armedNo"].items()}
        engine.injected_faults = [
            FaultSpec(f["task"], f["attempt"], f["kind"], f["message"], f["participant"])
            for f in e["injectedFaults"]
        ]
        engine.pending_failure = e["pendingFailure"]
        engine.pending_resume = tuple(e["pendingResume"]) if e["pendingResume"] else None
        engine.deferred = [dict(ev) for ev in e["deferred"]]
        engine.gate = e["gate"]
        engine.locks = {tuple(l) for l in e["locks"]}
        engine.replay_pending = e["replayPending"]
        engine.current_ticket = e["ticket"]
        engine.ticket_counter = e["ticketCounter"]
        engine.patch_applied = e["patchApplied"]
        engine.step_count = e["stepCount"]
        engine.seq = e["seq"]
        engine.initial_vars = dict(e["initialVars"])
        engine.journal = [dict(entry) for entry in doc["journal"]]
        engine.ledger = Ledger.from_doc(doc["ledgerBlocks"], doc["ledgerEvents"])
        if not engine.ledger.verify_chain():
            raise CorruptCheckpoint("ledger hash chain does not verify")
        engine.messages_2pc = {k: v for k, v in doc["metrics"]["messages2pc"].items()}
        engine.step_delays = [(i, d) for i, d in doc["metrics"]["stepDelays"]]
        return engine


class _Missing:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "<missing>"


_MISSING = _Missing()
