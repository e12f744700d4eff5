"""Repair of failed (sub)transactions by fragment replacement.

A failure maps to the innermost selected region containing the failed task;
its slice exports as the repair ticket together with the dataflow context.
A candidate replacement passes structural, behavioral, and reuse checks,
then the two dataflow gates: the replacement may only consume what flowed
into the failed fragment (pre condition) and must certainly produce what
flowed out of it (post condition).  Violating a dataflow gate escalates the
repair to the parent transaction's fragment; patch defects reject instead.
An accepted patch compiles as a fresh contract-unit version, the router is
flipped to it, and execution resumes against the new version, optionally
replaying journaled results of tasks that had already completed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bpmn import FragmentDoc, fragment_parts, fragment_to_model, parse_fragment, slice_fragment, splice_fragment
from .canon import sha256_hex
from .compiler import (
    MAIN,
    compile_unit,
    refresh_bundle_sources,
    rebind,
)
from .errors import (
    MalformedXml,
    NoParent,
    NoPatchApplied,
    NotAwaitingRepair,
    NotSese,
    ParseError,
    ProtocolError,
    StaleTicket,
    StructureError,
    UnknownField,
    UnsupportedElement,
)
from .regions import (
    Region,
    TransactionPlan,
    build_flow_graph,
    dataflow_in,
    external_reads,
    guaranteed_writes,
    required_out,
    root_region,
)
from .runtime import AWAITING_REPAIR, RUNNING, Engine, TX_ABORTED
from .scenario import NodeBehaviors, TaskBehavior, _parse_task, free_vars
from .compiler import IDLE as S_IDLE

CHECK_STRUCTURAL = "Structural"
CHECK_BEHAVIOR = "Behavior"
CHECK_REUSE = "Reuse"
CHECK_PRE = "PreRepair"
CHECK_POST = "PostRepair"

ACCEPTED = "accepted"
ESCALATED = "escalated"
REJECTED = "rejected"


@dataclass
class RepairTicket:
    ticket_id: str
    failed_tx_id: str
    logical_name: str
    region: Region
    fragment: FragmentDoc
    in_set: frozenset[str]
    required_out: frozenset[str]
    cause: dict
    completed: list[dict]  # {taskId, writes, actor} in completion order
    escalation_depth: int

    def to_doc(self) -> dict:
        return {
            "ticketId": self.ticket_id,
            "failedTxId": self.failed_tx_id,
            "logicalName": self.logical_name,
            "region": {
                "entry": self.region.entry,
                "exit": self.region.exit,
                "members": sorted(self.region.members),
            },
            "fragmentXml": self.fragment.xml,
            "entryId": self.fragment.entry_id,
            "exitId": self.fragment.exit_id,
            "boundaryIn": list(self.fragment.boundary_in),
            "boundaryOut": list(self.fragment.boundary_out),
            "in": sorted(self.in_set),
            "requiredOut": sorted(self.required_out),
            "cause": dict(self.cause),
            "completedTasks": [dict(c) for c in self.completed],
            "escalationDepth": self.escalation_depth,
        }

    @staticmethod
    def from_doc(doc) -> "RepairTicket":
        return RepairTicket(
            ticket_id=doc["ticketId"],
            failed_tx_id=doc["failedTxId"],
            logical_name=doc["logicalName"],
            region=Region(
                entry=doc["region"]["entry"],
                exit=doc["region"]["exit"],
                members=frozenset(doc["region"]["members"]),
            ),
            fragment=FragmentDoc(
                xml=doc["fragmentXml"],
                entry_id=doc["entryId"],
                exit_id=doc["exitId"],
                boundary_in=tuple(doc["boundaryIn"]),
                boundary_out=tuple(doc["boundaryOut"]),
            ),
            in_set=frozenset(doc["in"]),
            required_out=frozenset(doc["requiredOut"]),
            cause=dict(doc["cause"]),
            completed=[dict(c) for c in doc["completedTasks"]],
            escalation_depth=doc["escalationDepth"],
        )

    def sidecar_doc(self) -> dict:
        """The exported sidecar: dataflow context for the external editor."""
        return {
            "ticketId": self.ticket_id,
            "logicalName": self.logical_name,
            "cause": dict(self.cause),
            "in": sorted(self.in_set),
            "requiredOut": sorted(self.required_out),
            "completedTasks": [dict(c) for c in self.completed],
        }


@dataclass
class FragmentPatch:
    fragment_xml: str
    scenario_patch: dict[str, dict]  # taskId -> raw behavior doc
    reuse_completed: list[str] = field(default_factory=list)

    @staticmethod
    def from_docs(fragment_xml: str, sidecar: dict) -> "FragmentPatch":
        allowed = {"ticketId", "scenarioPatch", "reuseCompleted"}
        extra = set(sidecar) - allowed
        if extra:
            raise UnknownField(f"patch sidecar: {sorted(extra)[0]}")
        return FragmentPatch(
            fragment_xml=fragment_xml,
            scenario_patch=dict(sidecar.get("scenarioPatch") or {}),
            reuse_completed=list(sidecar.get("reuseCompleted") or []),
        )


@dataclass
class Verdict:
    verdict: str  # accepted | escalated | rejected
    reasons: list[dict] = field(default_factory=list)
    target: str | None = None
    new_ticket: RepairTicket | None = None

    def to_doc(self) -> dict:
        return {
            "verdict": self.verdict,
            "reasons": [dict(r) for r in self.reasons],
            "target": self.target,
            "newTicket": self.new_ticket.to_doc() if self.new_ticket else None,
        }


def _reason(check: str, detail: str, offending=None) -> dict:
    return {"check": check, "detail": detail, "offendingVars": sorted(offending or [])}


# --- ticket construction ----------------------------------------------------


def _dynamic_scope(engine: Engine, tx_id: str) -> set[str]:
    scope = {tx_id}
    changed = True
    while changed:
        changed = False
        for ctx in engine.tx_tree.values():
            if ctx.parent in scope and ctx.tx_id not in scope:
                scope.add(ctx.tx_id)
                changed = True
    return scope


def _completed_tasks(engine: Engine, scope_tx: str | None) -> list[dict]:
    scope = _dynamic_scope(engine, scope_tx) if scope_tx else None
    latest: dict[str, dict] = {}
    order: list[str] = []
    for entry in engine.journal:
        if entry["kind"] != "TaskCompleted":
            continue
        if scope is not None and entry["txId"] not in scope:
            continue
        task = entry["taskId"]
        if task not in latest:
            order.append(task)
        latest[task] = {
            "taskId": task,
            "writes": [list(w) for w in entry["writes"]],
            "actor": entry["actor"],
        }
    return [latest[t] for t in order]


def _region_for(engine: Engine, logical_name: str) -> Region:
    bound = rebind(engine.bundle)
    if logical_name == MAIN:
        return root_region(bound.graph)
    return engine.bundle.plan.region_of(logical_name)


def _build_ticket(engine: Engine, logical_name: str, failed_tx_id: str,
                  cause: dict, escalation_depth: int) -> RepairTicket:
    bound = rebind(engine.bundle)
    region = _region_for(engine, logical_name)
    fragment = slice_fragment(bound.model, region)
    in_set = dataflow_in(bound.graph, region, bound.behaviors)
    out_set = required_out(bound.graph, region, bound.behaviors)
    scope_tx = failed_tx_id if logical_name != MAIN else None
    engine.ticket_counter += 1
    return RepairTicket(
        ticket_id=f"T{engine.ticket_counter}",
        failed_tx_id=failed_tx_id,
        logical_name=logical_name,
        region=region,
        fragment=fragment,
        in_set=in_set,
        required_out=out_set,
        cause={
            "taskId": cause.get("taskId", ""),
            "message": cause.get("message", ""),
            "attempt": cause.get("attempt", 0),
        },
        completed=_completed_tasks(engine, scope_tx),
        escalation_depth=escalation_depth,
    )


def make_ticket(engine: Engine, failed_tx_id: str | None = None) -> RepairTicket:
    """Ticket for the innermost failed transaction; idempotent per failure."""
    if engine.mode != AWAITING_REPAIR or engine.pending_failure is None:
        raise NotAwaitingRepair(f"engine mode is {engine.mode}")
    if failed_tx_id is None:
        failed_tx_id = engine.pending_failure["txId"]
    if engine.current_ticket is not None:
        ticket = RepairTicket.from_doc(engine.current_ticket)
        if ticket.failed_tx_id != failed_tx_id:
            raise StaleTicket(
                f"a ticket for {ticket.failed_tx_id} is already open"
            )
        return ticket
    if failed_tx_id != engine.pending_failure["txId"]:
        raise NotAwaitingRepair(f"{failed_tx_id} is not the failed transaction")
    ticket = _build_ticket(
        engine,
        engine.pending_failure["logicalName"],
        failed_tx_id,
        engine.pending_failure,
        escalation_depth=0,
    )
    engine.current_ticket = ticket.to_doc()
    return ticket


def _parent_selection(engine: Engine, region: Region, logical_name: str) -> tuple[str, Region] | None:
    """The innermost selected region strictly containing this one, the
    process root when no selection is left, or None when already at root."""
    if logical_name == MAIN:
        return None
    best: tuple[str, Region] | None = None
    for candidate, name in engine.bundle.plan.selections:
        if region.members < candidate.members:
            if best is None or len(candidate.members) < len(best[1].members):
                best = (name, candidate)
    if best is not None:
        return best
    return (MAIN, _region_for(engine, MAIN))


# --- validation ---------------------------------------------------------------


def _merged_behavior_docs(engine: Engine, patch: FragmentPatch) -> dict[str, dict]:
    merged = {tid: dict(doc) for tid, doc in engine.bundle.scenario_doc["tasks"].items()}
    merged.update({tid: dict(doc) for tid, doc in patch.scenario_patch.items()})
    return merged


def _fragment_behaviors(frag: FragmentDoc, behaviors: dict[str, TaskBehavior]):
    model = fragment_to_model(frag)
    graph = build_flow_graph(model)
    task_ids = frozenset(el.id for el in model.elements if el.kind == "Task")
    guards = {}
    for flow in model.flows:
        if flow.guard is not None:
            from .scenario import parse_expr

            guards[flow.id] = free_vars(parse_expr(flow.guard))
    return graph, NodeBehaviors(
        tasks=task_ids,
        reads={tid: behaviors[tid].reads for tid in task_ids},
        writes={tid: behaviors[tid].write_vars() for tid in task_ids},
        guard_reads=guards,
    )


def validate_patch(engine: Engine, ticket: RepairTicket, patch: FragmentPatch) -> Verdict:
    """Pure verdict computation; escalation effects are applied separately."""
    if engine.current_ticket is None or engine.current_ticket["ticketId"] != ticket.ticket_id:
        raise StaleTicket(f"ticket {ticket.ticket_id} is not the current ticket")

    # Structural: the fragment must parse and be internally SESE, and must
    # not collide with ids outside the replaced region.
    try:
        frag = parse_fragment(patch.fragment_xml)
        parts = fragment_parts(frag)
    except (MalformedXml, NotSese, StructureError, UnsupportedElement) as exc:
        return Verdict(REJECTED, [_reason(CHECK_STRUCTURAL, f"{exc.code}: {exc.detail}")])
    bound = rebind(engine.bundle)
    model_outside_ids = (
        {el.id for el in bound.model.elements if el.id not in ticket.region.members}
        | {
            f.id for f in bound.model.flows
            if not (f.source in ticket.region.members and f.target in ticket.region.members)
        }
    )
    patch_ids = {el.id for el in parts.elements} | {f.id for f in parts.flows}
    collisions = patch_ids & model_outside_ids
    if collisions:
        return Verdict(REJECTED, [_reason(
            CHECK_STRUCTURAL,
            f"patch ids collide with the model outside the replaced region: {sorted(collisions)}",
        )])

    # Behavior: every fragment task covered by a parseable behavior whose
    # actor is a declared lane matching the fragment's lane assignment.
    reasons: list[dict] = []
    lane_actors = {lane.actor for lane in bound.model.lanes.values()}
    frag_lane_of = {
        member: lane.actor for lane in parts.lanes.values() for member in lane.members
    }
    frag_task_ids = [el.id for el in parts.elements if el.kind == "Task"]
    behaviors: dict[str, TaskBehavior] = {}
    for tid, doc in sorted(patch.scenario_patch.items()):
        if tid not in frag_task_ids:
            reasons.append(_reason(
                CHECK_BEHAVIOR, f"behavior patch for {tid}, which is not in the fragment"
            ))
    for tid in frag_task_ids:
        raw = patch.scenario_patch.get(tid) or engine.bundle.scenario_doc["tasks"].get(tid)
        if raw is None:
            reasons.append(_reason(CHECK_BEHAVIOR, f"no behavior for task {tid}"))
            continue
        try:
            behavior = _parse_task(tid, raw)
        except (ParseError, UnknownField) as exc:
            reasons.append(_reason(CHECK_BEHAVIOR, f"task {tid}: {exc.detail}"))
            continue
        behaviors[tid] = behavior
        if behavior.actor not in lane_actors:
            reasons.append(_reason(
                CHECK_BEHAVIOR, f"task {tid} actor {behavior.actor!r} is not a declared lane"
            ))
        if frag_lane_of.get(tid) != behavior.actor:
            reasons.append(_reason(
                CHECK_BEHAVIOR,
                f"task {tid} sits in fragment lane {frag_lane_of.get(tid)!r} "
                f"but its behavior declares {behavior.actor!r}",
            ))
    if reasons:
        return Verdict(REJECTED, reasons)

    # Reuse: only journaled completions, with unchanged declared write sets.
    completed_by_id = {c["taskId"]: c for c in ticket.completed}
    for tid in patch.reuse_completed:
        if patch.reuse_completed.count(tid) > 1:
            reasons.append(_reason(CHECK_REUSE, f"task {tid} reused more than once"))
            break
    if ticket.logical_name == MAIN and patch.reuse_completed:
        reasons.append(_reason(
            CHECK_REUSE, "reuse of completed tasks is not supported at the process root"
        ))
    for tid in patch.reuse_completed:
        if tid not in completed_by_id:
            reasons.append(_reason(
                CHECK_REUSE, f"task {tid} did not complete inside the failed scope"
            ))
            continue
        old_doc = engine.bundle.scenario_doc["tasks"].get(tid)
        old_writes = frozenset(
            var for var, _ in (old_doc or {}).get("writes", [])
        ) | frozenset(
            var for var, _ in ((old_doc or {}).get("handler") or {}).get("actions", [])
        )
        if tid in patch.scenario_patch:
            new_writes = behaviors[tid].write_vars() if tid in behaviors else frozenset(
                var for var, _ in patch.scenario_patch[tid].get("writes", [])
            )
            if new_writes != old_writes:
                reasons.append(_reason(
                    CHECK_REUSE,
                    f"task {tid} is reused but its declared write set changed",
                    offending=new_writes ^ old_writes,
                ))
    if reasons:
        return Verdict(REJECTED, reasons)

    # Dataflow gates.
    frag_graph, frag_behaviors = _fragment_behaviors(frag, behaviors)
    reads_needed = external_reads(frag_graph, frag_behaviors)
    extra_reads = reads_needed - ticket.in_set
    if extra_reads:
        reasons.append(_reason(
            CHECK_PRE,
            "replacement fragment reads variables that did not flow into the "
            "failed fragment",
            offending=extra_reads,
        ))
    produced = guaranteed_writes(frag_graph, frag_behaviors)
    replayed = frozenset(
        var
        for tid in patch.reuse_completed
        for var, _ in completed_by_id.get(tid, {}).get("writes", [])
    )
    missing_out = ticket.required_out - (produced | replayed)
    if missing_out:
        reasons.append(_reason(
            CHECK_POST,
            "replacement fragment does not certainly produce everything "
            "downstream consumes",
            offending=missing_out,
        ))
    if not reasons:
        return Verdict(ACCEPTED)

    parent = _parent_selection(engine, ticket.region, ticket.logical_name)
    if parent is None:
        reasons.append(_reason(CHECK_PRE, "NoParent: already at the process root"))
        return Verdict(REJECTED, reasons)
    parent_name, _parent_region = parent
    preview = _preview_ticket(engine, ticket, parent_name)
    return Verdict(ESCALATED, reasons, target=parent_name, new_ticket=preview)


def _preview_ticket(engine: Engine, ticket: RepairTicket, parent_name: str) -> RepairTicket:
    """The ticket escalation would produce, built without side effects."""
    counter = engine.ticket_counter
    parent_tx = _enclosing_instance(engine, ticket, parent_name)
    preview = _build_ticket(
        engine, parent_name, parent_tx or ticket.failed_tx_id,
        ticket.cause, ticket.escalation_depth + 1,
    )
    engine.ticket_counter = counter  # preview must not consume ids
    preview.ticket_id = f"T{counter + 1}"
    return preview


def _enclosing_instance(engine: Engine, ticket: RepairTicket, parent_name: str) -> str | None:
    """The live tx instance of parent_name enclosing the failed transaction."""
    ctx = engine.tx_tree.get(ticket.failed_tx_id)
    while ctx is not None:
        if ctx.logical_name == parent_name:
            return ctx.tx_id
        ctx = engine.tx_tree.get(ctx.parent) if ctx.parent else None
    return None


def escalate(engine: Engine, ticket: RepairTicket) -> RepairTicket:
    """Abort the parent transaction context and restart repair at its region."""
    if engine.current_ticket is None or engine.current_ticket["ticketId"] != ticket.ticket_id:
        raise StaleTicket(f"ticket {ticket.ticket_id} is not the current ticket")
    parent = _parent_selection(engine, ticket.region, ticket.logical_name)
    if parent is None:
        raise NoParent("the process root has no parent to escalate to")
    parent_name, _parent_region = parent

    parent_tx = _enclosing_instance(engine, ticket, parent_name)
    if parent_tx is not None and parent_name != MAIN:
        ctx = engine.tx_tree[parent_tx]
        if ctx.status not in ("Aborted", "Failed"):
            engine.abort(ctx, {
                "kind": "escalation",
                "taskId": ticket.cause.get("taskId", ""),
                "message": f"repair escalated past {ticket.logical_name}",
                "attempt": ticket.cause.get("attempt", 0),
            }, TX_ABORTED)
        act = engine.activations.get(parent_tx)
        if act is not None:
            grand = engine.activations[act.parent_act]
            grand.node_states[act.parent_inv_node] = S_IDLE
            engine.pending_resume = (grand.act_id, act.parent_inv_node)
            engine._discard_activation_events(act.act_id)
        engine.release_gate_of(parent_tx)
        scope_tx = parent_tx
    else:
        engine.pending_resume = None  # root repair restarts the whole flow
        scope_tx = None

    new_ticket = _build_ticket(
        engine, parent_name,
        scope_tx or ticket.failed_tx_id,
        ticket.cause, ticket.escalation_depth + 1,
    )
    engine.current_ticket = new_ticket.to_doc()
    engine.pending_failure = {
        "txId": new_ticket.failed_tx_id,
        "logicalName": parent_name,
        "taskId": ticket.cause.get("taskId", ""),
        "message": ticket.cause.get("message", ""),
        "attempt": ticket.cause.get("attempt", 0),
    }
    engine.patch_applied = False
    return new_ticket


# --- applying a patch -----------------------------------------------------------


def apply_patch(engine: Engine, ticket: RepairTicket, patch: FragmentPatch) -> dict:
    """Splice, re-analyze, compile the next unit version, and flip the router."""
    verdict = validate_patch(engine, ticket, patch)
    if verdict.verdict != ACCEPTED:
        raise ProtocolError(
            f"apply_patch needs an accepted verdict, got {verdict.verdict}"
        )
    frag = parse_fragment(patch.fragment_xml)
    parts = fragment_parts(frag)
    bound = rebind(engine.bundle)
    logical_name = ticket.logical_name

    new_model = splice_fragment(bound.model, ticket.region, frag)

    scenario_doc = {k: v for k, v in engine.bundle.scenario_doc.items()}
    new_tasks = dict(scenario_doc["tasks"])
    for tid, raw in patch.scenario_patch.items():
        new_tasks[tid] = dict(raw)
    model_task_ids = {el.id for el in new_model.elements if el.kind == "Task"}
    new_tasks = {tid: doc for tid, doc in new_tasks.items() if tid in model_task_ids}
    scenario_doc["tasks"] = new_tasks
    scenario_doc["faults"] = [
        f for f in scenario_doc.get("faults", []) if f["task"] in model_task_ids
    ]

    from .scenario import bind, scenario_from_doc

    new_spec = scenario_from_doc(scenario_doc)
    new_bound = bind(new_model, new_spec)

    new_region = Region(
        entry=frag.entry_id,
        exit=frag.exit_id,
        members=frozenset(el.id for el in parts.elements),
    )
    new_plan = _replan(engine.bundle.plan, logical_name, ticket.region, new_region)

    if logical_name == MAIN:
        version = engine.bundle.router.entries[MAIN]["history"][-1] + 1
        region_for_unit = root_region(new_bound.graph)
    else:
        version = engine.bundle.router.entries[logical_name]["history"][-1] + 1
        region_for_unit = new_region
    new_unit = compile_unit(new_bound, new_plan, logical_name, region_for_unit, version)

    old_version = engine.bundle.router.active_version(logical_name)
    engine.bundle.plan = new_plan
    engine.bundle.add_unit(new_unit)
    engine.bundle.router.activate(logical_name, version)
    refresh_bundle_sources(engine.bundle, new_bound)

    engine._journal_entry(
        "PatchApplied",
        logicalName=logical_name,
        oldVersion=old_version,
        newVersion=version,
        fragmentHash=sha256_hex(patch.fragment_xml),
        ticketId=ticket.ticket_id,
    )
    completed_by_id = {c["taskId"]: c for c in ticket.completed}
    if patch.reuse_completed:
        engine.replay_pending = {
            "logicalName": logical_name,
            "tasks": [
                completed_by_id[c["taskId"]]
                for c in ticket.completed
                if c["taskId"] in patch.reuse_completed
            ],
        }
    else:
        engine.replay_pending = None
    engine.patch_applied = True
    return {"newVersion": version, "logicalName": logical_name}


def _replan(plan: TransactionPlan, repaired: str, old_region: Region,
            new_region: Region) -> TransactionPlan:
    """Selection update after a splice: the repaired name maps to the new
    region, selections inside the old region disappear (the replacement
    compiles flat), and enclosing selections swap old members for new."""
    selections: list[tuple[Region, str]] = []
    if repaired == MAIN:
        dropped = {name for _, name in plan.selections}
    else:
        dropped = {
            name for region, name in plan.selections
            if region.members < old_region.members or name == repaired
        }
    for region, name in plan.selections:
        if name in dropped and name != repaired:
            continue
        if name == repaired:
            selections.append((new_region, name))
            continue
        if old_region.members < region.members:
            members = (region.members - old_region.members) | new_region.members
            entry = new_region.entry if region.entry in old_region.members else region.entry
            exit_ = new_region.exit if region.exit in old_region.members else region.exit
            selections.append((Region(entry=entry, exit=exit_, members=frozenset(members)), name))
        else:
            selections.append((region, name))

    parent: dict[str, str | None] = {}
    for region, name in selections:
        best = None
        for other, other_name in selections:
            if other_name == name:
                continue
            if region.members < other.members:
                if best is None or len(other.members) < len(best[1].members):
                    best = (other_name, other)
        parent[name] = best[0] if best else None
    children: dict[str | None, list[str]] = {None: []}
    for _, name in selections:
        children.setdefault(name, [])
    for _, name in selections:
        children.setdefault(parent[name], []).append(name)
    return TransactionPlan(selections=selections, parent=parent, children=children)


def resume(engine: Engine) -> str:
    """Re-enter the running mode against the repaired version and run on."""
    if engine.mode != AWAITING_REPAIR:
        raise NoPatchApplied(f"engine mode is {engine.mode}")
    if not engine.patch_applied or engine.current_ticket is None:
        raise NoPatchApplied("no accepted patch has been applied for the current ticket")
    ticket = RepairTicket.from_doc(engine.current_ticket)
    engine.current_ticket = None
    engine.pending_failure = None
    engine.patch_applied = False
    engine.mode = RUNNING

    if ticket.logical_name == MAIN:
        from .runtime import Activation

        main_unit = engine.bundle.unit(MAIN)
        engine.queue = [e for e in engine.queue if e.get("act") != MAIN]
        engine.deferred = []
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
        engine.queue.append(
            {"type": "token", "act": MAIN, "node": main_unit.network.entry}
        )
    else:
        if engine.pending_resume is None:
            raise ProtocolError("no pending invocation to resume")
        act_id, node = engine.pending_resume
        engine.pending_resume = None
        engine.queue.append({"type": "token", "act": act_id, "node": node})
    return engine.run()
