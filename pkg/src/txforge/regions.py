"""Flow-graph construction, SESE region enumeration, and dataflow analysis.

The graph is a DAG with one node per BPMN element and one edge per sequence
flow; node ids equal element ids and edge ids equal flow ids, so the
graph<->BPMN mapping is the identity in both directions.

Graphs are desk scale (tens of nodes), so the dataflow operations use the
exhaustive path semantics directly rather than approximating them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

from .bpmn import END, EVENT_KINDS, START, TASK, XOR, ProcessModel
from .errors import (
    CycleDetected,
    DuplicateName,
    NotLaminar,
    StructureError,
    UndeclaredBehavior,
)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    flow_id: str


@dataclass
class FlowGraph:
    nodes: list[str]
    edges: list[Edge]
    source: str
    sink: str
    kinds: dict[str, str]

    def __post_init__(self):
        self.succs: dict[str, list[Edge]] = {n: [] for n in self.nodes}
        self.preds: dict[str, list[Edge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            self.succs[e.src].append(e)
            self.preds[e.dst].append(e)

    def topo_order(self) -> list[str]:
        indeg = {n: len(self.preds[n]) for n in self.nodes}
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for e in self.succs[n]:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    ready.append(e.dst)
        return order


@dataclass(frozen=True)
class Region:
    entry: str
    exit: str
    members: frozenset[str]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class TransactionPlan:
    """Laminar selection of regions, each carrying the transaction's logical name."""

    selections: list[tuple[Region, str]]
    parent: dict[str, str | None] = field(default_factory=dict)
    children: dict[str | None, list[str]] = field(default_factory=dict)

    def region_of(self, name: str) -> Region:
        for region, n in self.selections:
            if n == name:
                return region
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for _, n in self.selections]


def _find_cycle(succs: dict[str, list[Edge]], nodes: list[str]) -> list[str] | None:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    stack_path: list[str] = []

    def dfs(n: str) -> list[str] | None:
        color[n] = GRAY
        stack_path.append(n)
        for e in succs[n]:
            if color[e.dst] == GRAY:
                i = stack_path.index(e.dst)
                return stack_path[i:] + [e.dst]
            if color[e.dst] == WHITE:
                found = dfs(e.dst)
                if found:
                    return found
        stack_path.pop()
        color[n] = BLACK
        return None

    for n in nodes:
        if color[n] == WHITE:
            found = dfs(n)
            if found:
                return found
    return None


def build_flow_graph(model: ProcessModel) -> FlowGraph:
    """One node per element, one edge per flow; rejects cycles and dangling parts."""
    nodes = [el.id for el in model.elements]
    edges = [Edge(f.source, f.target, f.id) for f in model.flows]
    kinds = model.kinds
    succs: dict[str, list[Edge]] = {n: [] for n in nodes}
    for e in edges:
        succs[e.src].append(e)
    cycle = _find_cycle(succs, nodes)
    if cycle:
        raise CycleDetected(cycle)
    source = next(el.id for el in model.elements if el.kind == START)
    sink = next(el.id for el in model.elements if el.kind == END)
    graph = FlowGraph(nodes=nodes, edges=edges, source=source, sink=sink, kinds=kinds)
    reach_fwd = _reachable(graph, source, forward=True)
    reach_bwd = _reachable(graph, sink, forward=False)
    for n in nodes:
        if n not in reach_fwd:
            raise StructureError(f"node {n} is unreachable from the start event")
        if n not in reach_bwd:
            raise StructureError(f"node {n} cannot reach the end event")
    return graph


def _reachable(graph: FlowGraph, start: str, forward: bool) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        nexts = graph.succs[n] if forward else graph.preds[n]
        for e in nexts:
            m = e.dst if forward else e.src
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


def root_region(graph: FlowGraph) -> Region:
    """The implicit outermost region: all non-event nodes."""
    members = frozenset(n for n in graph.nodes if graph.kinds[n] not in EVENT_KINDS)
    entry = graph.succs[graph.source][0].dst
    exit_ = graph.preds[graph.sink][0].src
    return Region(entry=entry, exit=exit_, members=members)


def region_boundary_ok(graph: FlowGraph, entry: str, exit_: str, members: frozenset[str]) -> bool:
    for e in graph.edges:
        if e.src not in members and e.dst in members and e.dst != entry:
            return False
        if e.src in members and e.dst not in members and e.src != exit_:
            return False
    return True


def enumerate_sese(graph: FlowGraph) -> list[Region]:
    """Enumerate SESE regions.

    For every ordered pair (u, v) of non-event nodes with v reachable from u,
    the candidate member set is every node both reachable from u and reaching
    v; the candidate is a region when all external edges enter at u and leave
    at v.  Single-node regions (u == v) are included.  Descendant/ancestor
    sets are precomputed once, which is the only liberty taken over the
    per-pair formulation.
    """
    order = graph.topo_order()
    idx = {n: i for i, n in enumerate(order)}
    n_nodes = len(order)
    desc = {n: 1 << idx[n] for n in order}
    for n in reversed(order):
        for e in graph.succs[n]:
            desc[n] |= desc[e.dst]
    anc = {n: 1 << idx[n] for n in order}
    for n in order:
        for e in graph.preds[n]:
            anc[n] |= anc[e.src]

    non_events = [n for n in order if graph.kinds[n] not in EVENT_KINDS]
    regions: list[Region] = []
    for u in non_events:
        for v in non_events:
            if not (desc[u] >> idx[v]) & 1:
                continue
            bits = desc[u] & anc[v]
            members = frozenset(order[i] for i in range(n_nodes) if (bits >> i) & 1)
            if region_boundary_ok(graph, u, v, members):
                regions.append(Region(entry=u, exit=v, members=members))
    regions.sort(key=lambda r: (-len(r.members), r.entry, r.exit))
    return regions


def validate_selection(
    regions: list[Region], picks: list[tuple[int, str]]
) -> TransactionPlan:
    """Accept a pick set iff every pair of member sets is nested or disjoint."""
    selections: list[tuple[Region, str]] = []
    seen_names: set[str] = set()
    for index, name in picks:
        if not name:
            raise DuplicateName("empty transaction name")
        if name in seen_names or name == "main":
            raise DuplicateName(name)
        seen_names.add(name)
        if index < 0 or index >= len(regions):
            raise StructureError(f"region index {index} out of range")
        selections.append((regions[index], name))

    for i, (ra, na) in enumerate(selections):
        for rb, nb in selections[i + 1:]:
            a, b = ra.members, rb.members
            if a == b:
                raise NotLaminar(na, nb)
            if not (a <= b or b <= a or not (a & b)):
                raise NotLaminar(na, nb)

    parent: dict[str, str | None] = {}
    for region, name in selections:
        best: tuple[int, str] | None = None
        for other, other_name in selections:
            if other_name == name:
                continue
            if region.members < other.members:
                if best is None or len(other.members) < best[0]:
                    best = (len(other.members), other_name)
        parent[name] = best[1] if best else None

    children: dict[str | None, list[str]] = {None: []}
    for _, name in selections:
        children.setdefault(name, [])
    for _, name in selections:
        children.setdefault(parent[name], []).append(name)
    return TransactionPlan(selections=selections, parent=parent, children=children)


# --- dataflow -----------------------------------------------------------

@dataclass
class NodeBehaviors:
    """Declared reads/writes per task node plus guard reads per flow.

    Built by the scenario binder; region analysis only consumes the sets.
    """

    tasks: frozenset[str]
    reads: dict[str, frozenset[str]]
    writes: dict[str, frozenset[str]]
    guard_reads: dict[str, frozenset[str]]
    initial_vars: frozenset[str] = frozenset()
    result_vars: frozenset[str] = frozenset()

    def reads_of(self, node: str) -> frozenset[str]:
        return self.reads.get(node, frozenset())

    def writes_of(self, node: str) -> frozenset[str]:
        return self.writes.get(node, frozenset())

    def guard_reads_of(self, flow_id: str) -> frozenset[str]:
        return self.guard_reads.get(flow_id, frozenset())


def _require_declared(behaviors: NodeBehaviors, graph: FlowGraph, nodes) -> None:
    for n in sorted(nodes):
        if graph.kinds.get(n) == TASK and (n not in behaviors.reads or n not in behaviors.writes):
            raise UndeclaredBehavior(n)


def dataflow_in(graph: FlowGraph, region: Region, behaviors: NodeBehaviors) -> frozenset[str]:
    """Variables a region may consume from outside.

    d is in In(R) when some member reads d (task read, or guard read on a
    region-internal flow) and at least one path from the region entry to the
    reading node carries no write of d at a member node executed before the
    read.  A task's own writes happen after its reads; a guard evaluates
    after its source node's writes.
    """
    _require_declared(behaviors, graph, region.members)
    members = region.members

    sites: list[tuple[str, str, bool]] = []  # (node, var, after_node_writes)
    for n in sorted(members):
        for d in behaviors.reads_of(n):
            sites.append((n, d, False))
    for e in graph.edges:
        if e.src in members and e.dst in members:
            for d in behaviors.guard_reads_of(e.flow_id):
                sites.append((e.src, d, True))

    result: set[str] = set()
    for d in sorted({d for _, d, _ in sites}):
        # pre_clean[n]: some internal entry->n path with d unwritten before n runs
        pre_clean: dict[str, bool] = {n: False for n in members}
        post_clean: dict[str, bool] = {n: False for n in members}
        pre_clean[region.entry] = True
        for n in graph.topo_order():
            if n not in members:
                continue
            if n != region.entry:
                pre_clean[n] = any(
                    post_clean[e.src] for e in graph.preds[n] if e.src in members
                )
            post_clean[n] = pre_clean[n] and d not in behaviors.writes_of(n)
        for node, var, after in sites:
            if var != d:
                continue
            if (post_clean[node] if after else pre_clean[node]):
                result.add(d)
                break
    return frozenset(result)


def required_out(graph: FlowGraph, region: Region, behaviors: NodeBehaviors) -> frozenset[str]:
    """Variables the region produces that anything downstream (or the process
    result set) consumes.  No kill analysis outside the region: any reachable
    outside read counts."""
    _require_declared(behaviors, graph, region.members)
    members = region.members
    written = set()
    for n in members:
        written |= behaviors.writes_of(n)

    downstream = _reachable(graph, region.exit, forward=True) - members
    _require_declared(behaviors, graph, downstream)
    consumed: set[str] = set()
    for n in downstream:
        consumed |= behaviors.reads_of(n)
    for e in graph.edges:
        if e.src in downstream:
            consumed |= behaviors.guard_reads_of(e.flow_id)
    return frozenset(written & (consumed | set(behaviors.result_vars)))


def external_reads(fragment_graph: FlowGraph, behaviors: NodeBehaviors) -> frozenset[str]:
    """Variables a standalone fragment needs from its surroundings: reads
    reachable from the fragment entry with no prior in-fragment write."""
    region = root_region(fragment_graph)
    return dataflow_in(fragment_graph, region, behaviors)


def guaranteed_writes(fragment_graph: FlowGraph, behaviors: NodeBehaviors) -> frozenset[str]:
    """Variables written on every execution of the fragment.

    Exclusive splits choose one branch, so a variable must be written under
    every combination of choices; parallel splits execute all branches, so a
    write on any parallel branch counts for every execution.
    """
    region = root_region(fragment_graph)
    _require_declared(behaviors, fragment_graph, region.members)
    out_deg = {n: len(fragment_graph.succs[n]) for n in fragment_graph.nodes}
    xor_splits = [
        n for n in fragment_graph.topo_order()
        if fragment_graph.kinds[n] == XOR and out_deg[n] >= 2
    ]

    def executed(choice: dict[str, str]) -> set[str]:
        seen = {fragment_graph.source}
        stack = [fragment_graph.source]
        while stack:
            n = stack.pop()
            if n in xor_splits:
                nexts = [choice[n]]
            else:
                nexts = [e.dst for e in fragment_graph.succs[n]]
            for m in nexts:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return seen

    branch_lists = [[e.dst for e in fragment_graph.succs[s]] for s in xor_splits]
    guaranteed: frozenset[str] | None = None
    for combo in product(*branch_lists) if branch_lists else [()]:
        choice = dict(zip(xor_splits, combo))
        writes: set[str] = set()
        for n in executed(choice):
            writes |= behaviors.writes_of(n)
        guaranteed = frozenset(writes) if guaranteed is None else (guaranteed & writes)
    return guaranteed if guaranteed is not None else frozenset()


# --- reporting ----------------------------------------------------------

def region_report(
    graph: FlowGraph, behaviors: NodeBehaviors | None = None
) -> list[dict]:
    """Region report used by the CLI and HTTP gateway, in enumeration order."""
    rows = []
    for k, region in enumerate(enumerate_sese(graph), start=1):
        row = {
            "regionId": f"R{k}",
            "entry": region.entry,
            "exit": region.exit,
            "members": sorted(region.members),
            "size": len(region.members),
        }
        if behaviors is not None:
            row["in"] = sorted(dataflow_in(graph, region, behaviors))
            row["requiredOut"] = sorted(required_out(graph, region, behaviors))
        rows.append(row)
    return rows
