"""Bundled fixtures: the harvester-sale process, synthetic gateway models,
and random structured model generation for fuzz testing.

The harvester process is the running example shipped with the tool: price
negotiation into escrow, transport-requirement gathering, rail insurance and
carrier contracts, the transport itself, and final acceptance/payment.
"""

from __future__ import annotations

import json
import random

from .bpmn import AND, END, START, TASK, XOR, Element, Lane, ProcessModel, SequenceFlow, serialize
from .regions import Region, TransactionPlan, enumerate_sese, validate_selection
from .scenario import BoundModel, bind, parse_scenario


def make_model(
    process_id: str,
    tasks: list[tuple[str, str]],
    flows: list[tuple[str, str, str]] | None = None,
    elements: list[Element] | None = None,
    guards: dict[str, str] | None = None,
    defaults: set[str] | None = None,
) -> ProcessModel:
    """Assemble a ProcessModel; tasks are (task id, lane actor) pairs.

    When flows is None, the tasks form a linear chain between the events.
    """
    guards = guards or {}
    defaults = defaults or set()
    els: list[Element] = [Element("start", START, "Start")]
    if elements:
        els.extend(elements)
    els.extend(Element(tid, TASK, tid) for tid, _ in tasks)
    els.append(Element("end", END, "End"))

    if flows is None:
        order = ["start"] + [tid for tid, _ in tasks] + ["end"]
        flows = [
            (f"f{i}", order[i], order[i + 1]) for i in range(len(order) - 1)
        ]
    seq = [
        SequenceFlow(fid, src, dst, guard=guards.get(fid),
                     is_default=fid in defaults)
        for fid, src, dst in flows
    ]

    lanes: dict[str, Lane] = {}
    actor_members: dict[str, list[str]] = {}
    for tid, actor in tasks:
        actor_members.setdefault(actor, []).append(tid)
    for i, (actor, members) in enumerate(actor_members.items(), start=1):
        lane_id = f"lane_{actor}"
        lanes[lane_id] = Lane(lane_id, actor, tuple(members))
    return ProcessModel(id=process_id, elements=els, flows=seq, lanes=lanes)


HARVESTER_TASKS = [
    ("PriceAndEscrow", "Buyer"),
    ("GetTrRequirements", "Seller"),
    ("GetRailInsurance", "Insurer"),
    ("GetRailTransporter", "Transporter"),
    ("DoTransport", "Transporter"),
    ("ReceiveAndFinalize", "Buyer"),
]


def harvester_model() -> ProcessModel:
    return make_model("harvester_sale", HARVESTER_TASKS)


def harvester_model_xml() -> str:
    return serialize(harvester_model())


def harvester_scenario_doc(with_flood_fault: bool = True) -> dict:
    faults = []
    if with_flood_fault:
        faults.append({
            "task": "DoTransport",
            "attempt": 1,
            "kind": "exception",
            "message": "rail line washed out",
        })
    return {
        "tasks": {
            "PriceAndEscrow": {
                "actor": "Buyer",
                "reads": ["askPrice", "budget"],
                "writes": [["price", "askPrice - 5000"], ["escrowId", '"ESC-1"']],
                "handler": None,
            },
            "GetTrRequirements": {
                "actor": "Seller",
                "reads": ["product"],
                "writes": [["trRequirements", '"wide-load"']],
                "handler": None,
            },
            "GetRailInsurance": {
                "actor": "Insurer",
                "reads": ["trRequirements", "price"],
                "writes": [["insuranceDoc", '"INS-RAIL-7"']],
                "handler": None,
            },
            "GetRailTransporter": {
                "actor": "Transporter",
                "reads": ["trRequirements"],
                "writes": [["transporterContract", '"TR-RAIL-12"']],
                "handler": None,
            },
            "DoTransport": {
                "actor": "Transporter",
                "reads": ["insuranceDoc", "transporterContract"],
                "writes": [["deliveryStatus", '"delivered"']],
                "handler": None,
            },
            "ReceiveAndFinalize": {
                "actor": "Buyer",
                "reads": ["deliveryStatus", "escrowId", "price"],
                "writes": [["paymentStatus", '"paid"']],
                "handler": None,
            },
        },
        "initial": {
            "askPrice": 185000,
            "budget": 200000,
            "product": "combine-harvester",
        },
        "results": ["deliveryStatus", "paymentStatus"],
        "faults": faults,
    }


def harvester_scenario_json(with_flood_fault: bool = True) -> str:
    return json.dumps(harvester_scenario_doc(with_flood_fault), indent=2) + "\n"


def harvester_bound(with_flood_fault: bool = True) -> BoundModel:
    return bind(harvester_model(), parse_scenario(harvester_scenario_json(with_flood_fault)))


HARVESTER_SELECTIONS = [
    ("priceAndEscrow_tx", {"PriceAndEscrow"}),
    ("transportProduct_tx", {"GetTrRequirements", "GetRailInsurance",
                             "GetRailTransporter", "DoTransport"}),
    ("getTrRequirements_tx", {"GetTrRequirements", "GetRailInsurance",
                              "GetRailTransporter"}),
    ("doTransport_tx", {"DoTransport"}),
    ("receiveAndFinalize_tx", {"ReceiveAndFinalize"}),
]


def plan_from_member_sets(bound: BoundModel,
                          selections: list[tuple[str, set[str]]]) -> TransactionPlan:
    regions = enumerate_sese(bound.graph)
    picks = []
    for name, members in selections:
        index = next(
            i for i, r in enumerate(regions) if set(r.members) == set(members)
        )
        picks.append((index, name))
    return validate_selection(regions, picks)


def harvester_plan(bound: BoundModel) -> TransactionPlan:
    return plan_from_member_sets(bound, HARVESTER_SELECTIONS)


# --- synthetic gateway fixtures ------------------------------------------

def diamond_model() -> ProcessModel:
    """start -> T0 -> xor split -> (A | B) -> xor merge -> T3 -> end."""
    return make_model(
        "diamond",
        tasks=[("T0", "Ops"), ("A", "Ops"), ("B", "Ops"), ("T3", "Ops")],
        elements=[Element("gs", XOR, "route?"), Element("gm", XOR, "merge")],
        flows=[
            ("f0", "start", "T0"),
            ("f1", "T0", "gs"),
            ("f2", "gs", "A"),
            ("f3", "gs", "B"),
            ("f4", "A", "gm"),
            ("f5", "B", "gm"),
            ("f6", "gm", "T3"),
            ("f7", "T3", "end"),
        ],
        guards={"f2": "pick == 1"},
        defaults={"f3"},
    )


def diamond_scenario_doc(pick: int = 1) -> dict:
    return {
        "tasks": {
            "T0": {"actor": "Ops", "reads": [], "writes": [["seen", "true"]], "handler": None},
            "A": {"actor": "Ops", "reads": [], "writes": [["route", '"via-a"']], "handler": None},
            "B": {"actor": "Ops", "reads": [], "writes": [["route", '"via-b"']], "handler": None},
            "T3": {"actor": "Ops", "reads": ["route"], "writes": [["outcome", "route + \"!\""]], "handler": None},
        },
        "initial": {"pick": pick},
        "results": ["outcome"],
        "faults": [],
    }


def parallel_model() -> ProcessModel:
    """start -> T0 -> and split -> (A | B) -> and join -> T3 -> end."""
    return make_model(
        "parallel",
        tasks=[("T0", "Ops"), ("A", "Ops"), ("B", "Ops"), ("T3", "Ops")],
        elements=[Element("gs", AND, "fork"), Element("gm", AND, "join")],
        flows=[
            ("f0", "start", "T0"),
            ("f1", "T0", "gs"),
            ("f2", "gs", "A"),
            ("f3", "gs", "B"),
            ("f4", "A", "gm"),
            ("f5", "B", "gm"),
            ("f6", "gm", "T3"),
            ("f7", "T3", "end"),
        ],
    )


def parallel_scenario_doc() -> dict:
    return {
        "tasks": {
            "T0": {"actor": "Ops", "reads": [], "writes": [["base", "1"]], "handler": None},
            "A": {"actor": "Ops", "reads": ["base"], "writes": [["left", "base + 1"]], "handler": None},
            "B": {"actor": "Ops", "reads": ["base"], "writes": [["right", "base + 2"]], "handler": None},
            "T3": {"actor": "Ops", "reads": ["left", "right"], "writes": [["total", "left + right"]], "handler": None},
        },
        "initial": {},
        "results": ["total"],
        "faults": [],
    }


def chain_model(n_tasks: int, one_lane_each: bool = True) -> tuple[ProcessModel, dict]:
    """Linear chain of n tasks; with one_lane_each every task has its own
    actor, which makes a single selected region cost exactly n participants."""
    tasks = []
    scenario_tasks = {}
    prev_var = None
    for i in range(n_tasks):
        actor = f"Actor{i}" if one_lane_each else "Ops"
        tid = f"T{i}"
        tasks.append((tid, actor))
        reads = [prev_var] if prev_var else []
        expr = f"{prev_var} + 1" if prev_var else "1"
        var = f"v{i}"
        scenario_tasks[tid] = {
            "actor": actor, "reads": reads, "writes": [[var, expr]], "handler": None,
        }
        prev_var = var
    model = make_model("chain", tasks)
    scenario = {
        "tasks": scenario_tasks,
        "initial": {},
        "results": [prev_var] if prev_var else [],
        "faults": [],
    }
    return model, scenario


# --- random structured models for fuzzing ---------------------------------

class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.counter = 0
        self.tasks: list[tuple[str, str]] = []
        self.elements: list[Element] = []
        self.flows: list[tuple[str, str, str]] = []
        self.guards: dict[str, str] = {}
        self.defaults: set[str] = set()
        self.scenario_tasks: dict[str, dict] = {}
        self.actors = ["Alpha", "Beta", "Gamma"]
        self.var_counter = 0

    def fresh(self, prefix: str) -> str:
        self.counter += 1
        return f"{prefix}{self.counter}"

    def flow(self, src: str, dst: str, guard: str | None = None, default: bool = False) -> str:
        fid = self.fresh("f")
        self.flows.append((fid, src, dst))
        if guard is not None:
            self.guards[fid] = guard
        if default:
            self.defaults.add(fid)
        return fid

    def task(self, available: set[str]) -> tuple[str, str, set[str]]:
        tid = self.fresh("t")
        actor = self.rng.choice(self.actors)
        self.tasks.append((tid, actor))
        reads = sorted(self.rng.sample(sorted(available), k=min(len(available), self.rng.randint(0, 2))))
        self.var_counter += 1
        var = f"x{self.var_counter}"
        expr = " + ".join(reads + ["1"]) if reads else str(self.rng.randint(1, 9))
        self.scenario_tasks[tid] = {
            "actor": actor, "reads": reads, "writes": [[var, expr]], "handler": None,
        }
        return tid, tid, {var}

    def block(self, available: set[str], depth: int) -> tuple[str, str, set[str]]:
        """Returns (first node, last node, variables guaranteed written)."""
        roll = self.rng.random()
        if depth <= 0 or roll < 0.45:
            return self.task(available)
        if roll < 0.7:  # sequence
            first, last, written = self.block(available, depth - 1)
            nxt_first, nxt_last, w2 = self.block(available | written, depth - 1)
            self.flow(last, nxt_first)
            return first, nxt_last, written | w2
        if roll < 0.85:  # exclusive choice
            gs, gm = self.fresh("xs"), self.fresh("xm")
            self.elements.append(Element(gs, XOR, gs))
            self.elements.append(Element(gm, XOR, gm))
            b1_first, b1_last, w1 = self.block(available, depth - 1)
            b2_first, b2_last, w2 = self.block(available, depth - 1)
            guard_vars = sorted(v for v in available)
            guard = f"{self.rng.choice(guard_vars)} > 0" if guard_vars else "true"
            self.flow(gs, b1_first, guard=guard)
            self.flow(gs, b2_first, default=True)
            self.flow(b1_last, gm)
            self.flow(b2_last, gm)
            return gs, gm, w1 & w2
        # parallel
        gs, gm = self.fresh("ps"), self.fresh("pm")
        self.elements.append(Element(gs, AND, gs))
        self.elements.append(Element(gm, AND, gm))
        b1_first, b1_last, w1 = self.block(available, depth - 1)
        b2_first, b2_last, w2 = self.block(available, depth - 1)
        self.flow(gs, b1_first)
        self.flow(gs, b2_first)
        self.flow(b1_last, gm)
        self.flow(b2_last, gm)
        return gs, gm, w1 | w2


def random_structured_model(seed: int) -> tuple[ProcessModel, dict]:
    """A runnable random model plus scenario: reads always resolvable, every
    exclusive split guarded with a default branch."""
    rng = random.Random(seed)
    gen = _Gen(rng)
    initial = {"x0": rng.randint(1, 5)}
    first, last, _ = gen.block({"x0"}, depth=rng.randint(1, 3))
    model = make_model(
        f"fuzz_{seed}",
        tasks=gen.tasks,
        elements=gen.elements,
        flows=[("f_start", "start", first)] + gen.flows + [("f_end", last, "end")],
        guards=gen.guards,
        defaults=gen.defaults,
    )
    scenario = {
        "tasks": gen.scenario_tasks,
        "initial": initial,
        "results": [],
        "faults": [],
    }
    return model, scenario


def random_laminar_plan(bound: BoundModel, seed: int) -> TransactionPlan:
    rng = random.Random(seed)
    regions = enumerate_sese(bound.graph)
    indices = list(range(len(regions)))
    rng.shuffle(indices)
    picked: list[tuple[int, str]] = []
    picked_regions: list[Region] = []
    for index in indices:
        region = regions[index]
        ok = True
        for other in picked_regions:
            a, b = region.members, other.members
            if a == b or not (a <= b or b <= a or not (a & b)):
                ok = False
                break
        if ok and rng.random() < 0.6:
            picked.append((index, f"tx_{len(picked)}"))
            picked_regions.append(region)
        if len(picked) >= 5:
            break
    return validate_selection(regions, picked)
