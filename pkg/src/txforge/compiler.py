"""Compile a bound model plus transaction plan into contract units.

Each selected region becomes one versioned ContractUnit holding a network of
node state machines; a region nested directly inside another is collapsed to
a single invocation node bound to the child's logical name.  A "main" unit
drives everything outside the selections.  The router maps logical names to
active versions; repair registers and activates new versions without touching
any other unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bpmn import AND, END, START, TASK, XOR, parse_bpmn
from .canon import canonical_json, sha256_hex
from .errors import PlanGraphMismatch, UnknownName, VersionConflict
from .regions import (
    FlowGraph,
    NodeBehaviors,
    Region,
    TransactionPlan,
    dataflow_in,
    region_boundary_ok,
    root_region,
)
from .scenario import (
    BoundModel,
    Handler,
    TaskBehavior,
    parse_expr,
    scenario_from_doc,
    scenario_to_doc,
)

MAIN = "main"

# NodeFsm kinds
K_TASK = "Task"
K_XOR_SPLIT = "XorSplit"
K_XOR_MERGE = "XorMerge"
K_AND_SPLIT = "AndSplit"
K_AND_JOIN = "AndJoin"
K_ENTRY = "Entry"
K_EXIT = "Exit"

IDLE = "Idle"
ACTIVE = "Active"
DONE = "Done"


@dataclass(frozen=True)
class WireEdge:
    flow_id: str
    src: str
    dst: str
    guard: str | None = None
    is_default: bool = False


@dataclass
class NodeFsm:
    node_id: str
    kind: str
    element_kind: str = ""
    name: str = ""
    actor: str | None = None
    invokes: str | None = None
    behavior: TaskBehavior | None = None
    indegree: int = 1
    # For invocation nodes: the collapsed child region's boundary element
    # kinds.  A parallel-join entry means the invocation synchronizes its
    # arrivals; an exclusive-split exit means completion routes by guard.
    entry_kind: str = ""
    exit_kind: str = ""

    @property
    def states(self) -> tuple[str, ...]:
        return (IDLE, ACTIVE, DONE)

    @property
    def transitions(self) -> tuple[tuple[str, str, str, str], ...]:
        """(fromState, trigger, action, toState) rows, by kind."""
        if self.kind == K_TASK and self.invokes:
            return (
                (IDLE, "TokenArrived", f"invoke:{self.invokes}", ACTIVE),
                (ACTIVE, "ChildCommitted", "emit-token", DONE),
            )
        if self.kind == K_TASK:
            return (
                (IDLE, "TokenArrived", "task-start", ACTIVE),
                (ACTIVE, "TaskCompleted", "emit-token", DONE),
            )
        if self.kind == K_AND_JOIN:
            return (
                (IDLE, "TokenArrived[arrivals<indegree]", "count", IDLE),
                (IDLE, "TokenArrived[arrivals==indegree]", "reset;emit-token", DONE),
            )
        if self.kind == K_XOR_SPLIT:
            return ((IDLE, "TokenArrived", "eval-guards;emit-one", DONE),)
        return ((IDLE, "TokenArrived", "emit-token", DONE),)


@dataclass
class FsmNetwork:
    machines: dict[str, NodeFsm]
    wiring: list[WireEdge]
    entry: str
    exit: str

    def outgoing(self, node: str) -> list[WireEdge]:
        return [w for w in self.wiring if w.src == node]

    def incoming(self, node: str) -> list[WireEdge]:
        return [w for w in self.wiring if w.dst == node]


@dataclass
class ContractUnit:
    logical_name: str
    version: int
    network: FsmNetwork
    readable: frozenset[str]
    writable: frozenset[str]
    participants: frozenset[str]
    child_invocations: dict[str, str]
    region_entry: str
    region_exit: str
    region_members: frozenset[str]


@dataclass
class Router:
    entries: dict[str, dict] = field(default_factory=dict)

    def register(self, logical_name: str, version: int) -> int:
        entry = self.entries.get(logical_name)
        if entry is None:
            if version != 1:
                raise VersionConflict(
                    f"first version of {logical_name} must be 1, got {version}"
                )
            self.entries[logical_name] = {"active": 1, "history": [1]}
            return 1
        if version != entry["history"][-1] + 1:
            raise VersionConflict(
                f"{logical_name} v{version} conflicts with history {entry['history']}"
            )
        entry["history"].append(version)
        return version

    def activate(self, logical_name: str, version: int) -> None:
        entry = self.entries.get(logical_name)
        if entry is None or version not in entry["history"]:
            raise UnknownName(f"{logical_name} v{version}")
        entry["active"] = version

    def active_version(self, logical_name: str) -> int:
        entry = self.entries.get(logical_name)
        if entry is None:
            raise UnknownName(logical_name)
        return entry["active"]


@dataclass
class DeploymentBundle:
    model_xml: str
    model_hash: str
    scenario_doc: dict
    scenario_hash: str
    plan: TransactionPlan
    units: dict[str, dict[int, ContractUnit]]
    router: Router

    def unit(self, logical_name: str, version: int | None = None) -> ContractUnit:
        if logical_name not in self.units:
            raise UnknownName(logical_name)
        if version is None:
            version = self.router.active_version(logical_name)
        versions = self.units[logical_name]
        if version not in versions:
            raise UnknownName(f"{logical_name} v{version}")
        return versions[version]

    def add_unit(self, unit: ContractUnit) -> int:
        version = self.router.register(unit.logical_name, unit.version)
        self.units.setdefault(unit.logical_name, {})[unit.version] = unit
        return version


def route(bundle: DeploymentBundle, logical_name: str) -> ContractUnit:
    """The unit the router's active version points at."""
    return bundle.unit(logical_name)


def _fsm_kind(element_kind: str, in_deg: int, out_deg: int) -> str:
    if element_kind == START:
        return K_ENTRY
    if element_kind == END:
        return K_EXIT
    if element_kind == TASK:
        return K_TASK
    if element_kind == XOR:
        return K_XOR_SPLIT if out_deg >= 2 else K_XOR_MERGE
    if element_kind == AND:
        return K_AND_SPLIT if out_deg >= 2 else K_AND_JOIN
    raise PlanGraphMismatch(f"unknown element kind {element_kind}")


def build_fsm_network(
    graph: FlowGraph,
    territory: frozenset[str],
    entry: str,
    exit_: str,
    children: list[tuple[str, Region]],
    bound: BoundModel,
) -> tuple[FsmNetwork, dict[str, str]]:
    """Network over `territory` with each child region collapsed to one
    invocation node named after the child transaction."""
    node_map: dict[str, str] = {}
    boundary_kinds: dict[str, tuple[str, str]] = {}
    for child_name, child_region in children:
        for member in child_region.members:
            node_map[member] = child_name
        boundary_kinds[child_name] = (
            graph.kinds[child_region.entry], graph.kinds[child_region.exit]
        )

    in_deg = {n: len(graph.preds[n]) for n in graph.nodes}
    out_deg = {n: len(graph.succs[n]) for n in graph.nodes}
    names = {el.id: el.name for el in bound.model.elements}
    lane_of = {
        member: lane.actor
        for lane in bound.model.lanes.values()
        for member in lane.members
    }

    machines: dict[str, NodeFsm] = {}
    child_invocations: dict[str, str] = {}
    for n in graph.nodes:
        if n not in territory:
            continue
        mapped = node_map.get(n, n)
        if mapped != n:
            if mapped not in machines:
                entry_kind, exit_kind = boundary_kinds[mapped]
                machines[mapped] = NodeFsm(
                    node_id=mapped, kind=K_TASK, invokes=mapped,
                    entry_kind=entry_kind, exit_kind=exit_kind,
                )
                child_invocations[mapped] = mapped
            continue
        element_kind = graph.kinds[n]
        machines[n] = NodeFsm(
            node_id=n,
            kind=_fsm_kind(element_kind, in_deg[n], out_deg[n]),
            element_kind=element_kind,
            name=names.get(n, ""),
            actor=lane_of.get(n),
            behavior=bound.spec.tasks.get(n),
        )

    wiring: list[WireEdge] = []
    guards = {f.id: (f.guard, f.is_default) for f in bound.model.flows}
    for e in graph.edges:
        if e.src not in territory or e.dst not in territory:
            continue
        src = node_map.get(e.src, e.src)
        dst = node_map.get(e.dst, e.dst)
        if src == dst and src in child_invocations:
            continue  # edge fully inside a collapsed child
        guard, is_default = guards[e.flow_id]
        wiring.append(WireEdge(e.flow_id, src, dst, guard, is_default))

    for machine in machines.values():
        machine.indegree = max(
            1, sum(1 for w in wiring if w.dst == machine.node_id)
        )

    network = FsmNetwork(
        machines=machines,
        wiring=wiring,
        entry=node_map.get(entry, entry),
        exit=node_map.get(exit_, exit_),
    )
    return network, child_invocations


def _unit_scope(
    graph: FlowGraph, region: Region, behaviors: NodeBehaviors
) -> tuple[frozenset[str], frozenset[str]]:
    writable = frozenset().union(
        *(behaviors.writes_of(n) for n in region.members)
    ) if region.members else frozenset()
    readable = dataflow_in(graph, region, behaviors) | writable
    return readable, writable


def _unit_participants(region: Region, bound: BoundModel) -> frozenset[str]:
    actors = set()
    for lane in bound.model.lanes.values():
        for member in lane.members:
            if member in region.members:
                actors.add(lane.actor)
    return frozenset(actors)


def compile_unit(
    bound: BoundModel,
    plan: TransactionPlan,
    logical_name: str,
    region: Region,
    version: int,
) -> ContractUnit:
    graph = bound.graph
    if logical_name == MAIN:
        territory = frozenset(graph.nodes)
        entry, exit_ = graph.source, graph.sink
        child_names = plan.children.get(None, [])
    else:
        territory = region.members
        entry, exit_ = region.entry, region.exit
        child_names = plan.children.get(logical_name, [])
    children = [(name, plan.region_of(name)) for name in child_names]
    network, invocations = build_fsm_network(
        graph, territory, entry, exit_, children, bound
    )
    readable, writable = _unit_scope(graph, region, bound.behaviors)
    return ContractUnit(
        logical_name=logical_name,
        version=version,
        network=network,
        readable=readable,
        writable=writable,
        participants=_unit_participants(region, bound),
        child_invocations=invocations,
        region_entry=region.entry,
        region_exit=region.exit,
        region_members=region.members,
    )


def compile_bundle(bound: BoundModel, plan: TransactionPlan) -> DeploymentBundle:
    """One ContractUnit per selected region plus the main unit, all at v1."""
    graph = bound.graph
    node_set = set(graph.nodes)
    for region, name in plan.selections:
        if not region.members <= node_set:
            raise PlanGraphMismatch(f"selection {name} references unknown nodes")
        if not region_boundary_ok(graph, region.entry, region.exit, region.members):
            raise PlanGraphMismatch(f"selection {name} is not a SESE region of the graph")
        if name in node_set:
            raise PlanGraphMismatch(f"transaction name {name} collides with an element id")

    bundle = DeploymentBundle(
        model_xml="",
        model_hash="",
        scenario_doc={},
        scenario_hash="",
        plan=plan,
        units={},
        router=Router(),
    )
    bundle.add_unit(compile_unit(bound, plan, MAIN, root_region(graph), 1))
    for region, name in plan.selections:
        bundle.add_unit(compile_unit(bound, plan, name, region, 1))
    refresh_bundle_sources(bundle, bound)
    return bundle


def refresh_bundle_sources(bundle: DeploymentBundle, bound: BoundModel) -> None:
    from .bpmn import serialize  # local import to avoid cycle at module load

    bundle.model_xml = serialize(bound.model)
    bundle.model_hash = sha256_hex(bundle.model_xml)
    bundle.scenario_doc = scenario_to_doc(bound.spec)
    bundle.scenario_hash = sha256_hex(canonical_json(bundle.scenario_doc))


def rebind(bundle: DeploymentBundle) -> BoundModel:
    """Reconstruct the bound model from the bundle's embedded sources."""
    from .scenario import bind

    model = parse_bpmn(bundle.model_xml)
    spec = scenario_from_doc(bundle.scenario_doc)
    return bind(model, spec)


# --- serialization --------------------------------------------------------

def _behavior_doc(b: TaskBehavior | None):
    if b is None:
        return None
    doc = {
        "actor": b.actor,
        "reads": sorted(b.reads),
        "writes": [[var, expr.text] for var, expr in b.writes],
        "handler": None,
    }
    if b.handler:
        doc["handler"] = {
            "actions": [[var, expr.text] for var, expr in b.handler.actions],
            "outcome": b.handler.outcome,
        }
    return doc


def _behavior_from_doc(doc) -> TaskBehavior | None:
    if doc is None:
        return None
    handler = None
    if doc.get("handler"):
        handler = Handler(
            actions=tuple((var, parse_expr(text)) for var, text in doc["handler"]["actions"]),
            outcome=doc["handler"]["outcome"],
        )
    return TaskBehavior(
        actor=doc["actor"],
        reads=frozenset(doc["reads"]),
        writes=tuple((var, parse_expr(text)) for var, text in doc["writes"]),
        handler=handler,
    )


def unit_to_doc(unit: ContractUnit) -> dict:
    return {
        "logicalName": unit.logical_name,
        "version": unit.version,
        "nodes": [
            {
                "id": m.node_id,
                "kind": m.kind,
                "elementKind": m.element_kind,
                "name": m.name,
                "actor": m.actor,
                "invokes": m.invokes,
                "behavior": _behavior_doc(m.behavior),
                "entryKind": m.entry_kind,
                "exitKind": m.exit_kind,
            }
            for m in unit.network.machines.values()
        ],
        "edges": [
            {
                "id": w.flow_id,
                "source": w.src,
                "target": w.dst,
                "guard": w.guard,
                "default": w.is_default,
            }
            for w in unit.network.wiring
        ],
        "entry": unit.network.entry,
        "exit": unit.network.exit,
        "scope": {
            "readable": sorted(unit.readable),
            "writable": sorted(unit.writable),
        },
        "participants": sorted(unit.participants),
        "region": {
            "entry": unit.region_entry,
            "exit": unit.region_exit,
            "members": sorted(unit.region_members),
        },
    }


def unit_from_doc(doc) -> ContractUnit:
    machines = {}
    for nd in doc["nodes"]:
        machines[nd["id"]] = NodeFsm(
            node_id=nd["id"],
            kind=nd["kind"],
            element_kind=nd["elementKind"],
            name=nd["name"],
            actor=nd["actor"],
            invokes=nd["invokes"],
            behavior=_behavior_from_doc(nd["behavior"]),
            entry_kind=nd.get("entryKind", ""),
            exit_kind=nd.get("exitKind", ""),
        )
    wiring = [
        WireEdge(ed["id"], ed["source"], ed["target"], ed["guard"], ed["default"])
        for ed in doc["edges"]
    ]
    for m in machines.values():
        m.indegree = max(1, sum(1 for w in wiring if w.dst == m.node_id))
    network = FsmNetwork(
        machines=machines, wiring=wiring, entry=doc["entry"], exit=doc["exit"]
    )
    return ContractUnit(
        logical_name=doc["logicalName"],
        version=doc["version"],
        network=network,
        readable=frozenset(doc["scope"]["readable"]),
        writable=frozenset(doc["scope"]["writable"]),
        participants=frozenset(doc["participants"]),
        child_invocations={
            nd["id"]: nd["invokes"] for nd in doc["nodes"] if nd["invokes"]
        },
        region_entry=doc["region"]["entry"],
        region_exit=doc["region"]["exit"],
        region_members=frozenset(doc["region"]["members"]),
    )


def plan_to_doc(plan: TransactionPlan) -> dict:
    return {
        "selections": [
            {
                "name": name,
                "entry": region.entry,
                "exit": region.exit,
                "members": sorted(region.members),
            }
            for region, name in plan.selections
        ],
        "parent": {name: plan.parent.get(name) for name in plan.names()},
    }


def plan_from_doc(doc) -> TransactionPlan:
    selections = [
        (
            Region(
                entry=sel["entry"],
                exit=sel["exit"],
                members=frozenset(sel["members"]),
            ),
            sel["name"],
        )
        for sel in doc["selections"]
    ]
    parent = dict(doc["parent"])
    children: dict[str | None, list[str]] = {None: []}
    for _, name in selections:
        children.setdefault(name, [])
    for _, name in selections:
        children.setdefault(parent.get(name), []).append(name)
    return TransactionPlan(selections=selections, parent=parent, children=children)


def bundle_to_doc(bundle: DeploymentBundle) -> dict:
    units = []
    for name in sorted(bundle.units):
        for version in sorted(bundle.units[name]):
            units.append(unit_to_doc(bundle.units[name][version]))
    return {
        "modelHash": bundle.model_hash,
        "scenarioHash": bundle.scenario_hash,
        "model": bundle.model_xml,
        "scenario": bundle.scenario_doc,
        "plan": plan_to_doc(bundle.plan),
        "units": units,
        "router": {"entries": bundle.router.entries},
    }


def bundle_from_doc(doc) -> DeploymentBundle:
    units: dict[str, dict[int, ContractUnit]] = {}
    for udoc in doc["units"]:
        unit = unit_from_doc(udoc)
        units.setdefault(unit.logical_name, {})[unit.version] = unit
    router = Router(entries={
        name: {"active": entry["active"], "history": list(entry["history"])}
        for name, entry in doc["router"]["entries"].items()
    })
    return DeploymentBundle(
        model_xml=doc["model"],
        model_hash=doc["modelHash"],
        scenario_doc=doc["scenario"],
        scenario_hash=doc["scenarioHash"],
        plan=plan_from_doc(doc["plan"]),
        units=units,
        router=router,
    )


def bundle_to_json(bundle: DeploymentBundle) -> str:
    import json

    return json.dumps(bundle_to_doc(bundle), sort_keys=True, indent=2) + "\n"


def bundle_from_json(text: str) -> DeploymentBundle:
    import json

    return bundle_from_doc(json.loads(text))
