"""Contract-unit compilation, the versioned router, and bundle serialization."""

from __future__ import annotations

import pytest

from txforge.compiler import (
    Router,
    bundle_from_json,
    bundle_to_doc,
    bundle_to_json,
    compile_bundle,
    route,
)
from txforge.errors import PlanGraphMismatch, UnknownName, VersionConflict
from txforge.fixtures import (
    diamond_model,
    diamond_scenario_doc,
    harvester_bound,
    harvester_plan,
    plan_from_member_sets,
)
from txforge.regions import dataflow_in, enumerate_sese, validate_selection
from txforge.scenario import bind, scenario_from_doc


@pytest.fixture
def hb():
    return harvester_bound(False)


@pytest.fixture
def bundle(hb):
    return compile_bundle(hb, harvester_plan(hb))


class TestCompile:
    def test_six_units(self, bundle):
        assert sorted(bundle.units) == [
            "doTransport_tx", "getTrRequirements_tx", "main",
            "priceAndEscrow_tx", "receiveAndFinalize_tx", "transportProduct_tx",
        ]
        assert all(1 in versions for versions in bundle.units.values())

    def test_transport_unit_has_two_invocation_nodes(self, bundle):
        unit = bundle.unit("transportProduct_tx")
        invocations = [m for m in unit.network.machines.values() if m.invokes]
        assert sorted(m.invokes for m in invocations) == [
            "doTransport_tx", "getTrRequirements_tx",
        ]
        assert len(unit.network.machines) == 2

    def test_main_unit_drives_top_level_transactions(self, bundle):
        unit = bundle.unit("main")
        invokes = [m.invokes for m in unit.network.machines.values() if m.invokes]
        assert invokes == [
            "priceAndEscrow_tx", "transportProduct_tx", "receiveAndFinalize_tx",
        ]

    def test_empty_plan_single_main_unit(self, hb):
        plan = validate_selection(enumerate_sese(hb.graph), [])
        bundle = compile_bundle(hb, plan)
        assert sorted(bundle.units) == ["main"]
        machines = bundle.unit("main").network.machines
        assert sum(1 for m in machines.values() if m.kind == "Task") == 6

    def test_root_only_plan_collapses_main(self, hb):
        regions = enumerate_sese(hb.graph)
        root_index = next(
            i for i, r in enumerate(regions) if len(r.members) == 6
        )
        plan = validate_selection(regions, [(root_index, "whole_tx")])
        bundle = compile_bundle(hb, plan)
        machines = bundle.unit("main").network.machines
        kinds = sorted((m.kind, m.invokes) for m in machines.values())
        assert kinds == [("Entry", None), ("Exit", None), ("Task", "whole_tx")]

    def test_requirements_unit_wiring(self, bundle):
        unit = bundle.unit("getTrRequirements_tx")
        assert list(unit.network.machines) == [
            "GetTrRequirements", "GetRailInsurance", "GetRailTransporter",
        ]
        assert [(w.src, w.dst) for w in unit.network.wiring] == [
            ("GetTrRequirements", "GetRailInsurance"),
            ("GetRailInsurance", "GetRailTransporter"),
        ]

    def test_gateway_kinds_mapped(self):
        bound = bind(diamond_model(), scenario_from_doc(diamond_scenario_doc()))
        plan = plan_from_member_sets(bound, [("diamond_tx", {"gs", "A", "B", "gm"})])
        bundle = compile_bundle(bound, plan)
        unit = bundle.unit("diamond_tx")
        kinds = {m.node_id: m.kind for m in unit.network.machines.values()}
        assert kinds["gs"] == "XorSplit"
        assert kinds["gm"] == "XorMerge"

    def test_plan_name_colliding_with_element_rejected(self, hb):
        regions = enumerate_sese(hb.graph)
        index = next(i for i, r in enumerate(regions) if r.members == frozenset({"DoTransport"}))
        plan = validate_selection(regions, [(index, "DoTransport")])
        with pytest.raises(PlanGraphMismatch):
            compile_bundle(hb, plan)

    def test_deterministic_compilation(self, hb):
        a = compile_bundle(hb, harvester_plan(hb))
        b = compile_bundle(hb, harvester_plan(hb))
        assert bundle_to_json(a) == bundle_to_json(b)


class TestScopeLaws:
    def test_scope_recomputation(self, hb, bundle):
        plan = harvester_plan(hb)
        lane_of = {
            member: lane.actor
            for lane in hb.model.lanes.values()
            for member in lane.members
        }
        for region, name in plan.selections:
            unit = bundle.unit(name)
            writable = frozenset().union(
                *(hb.behaviors.writes_of(n) for n in region.members)
            )
            assert unit.writable == writable
            assert unit.readable == dataflow_in(hb.graph, region, hb.behaviors) | writable
            assert unit.readable >= dataflow_in(hb.graph, region, hb.behaviors)
            assert unit.participants == frozenset(
                lane_of[n] for n in region.members if n in lane_of
            )

    def test_structural_conservation(self, hb, bundle):
        """Task FSMs across all units equal the model's task set."""
        tasks = []
        for versions in bundle.units.values():
            for unit in versions.values():
                tasks.extend(
                    m.node_id for m in unit.network.machines.values()
                    if m.kind == "Task" and not m.invokes
                )
        assert sorted(tasks) == sorted(el.id for el in hb.model.tasks())


class TestRouter:
    def test_register_keeps_active(self):
        router = Router()
        assert router.register("doTransport_tx", 1) == 1
        assert router.register("doTransport_tx", 2) == 2
        assert router.entries["doTransport_tx"]["history"] == [1, 2]
        assert router.active_version("doTransport_tx") == 1

    def test_register_conflict(self):
        router = Router()
        router.register("a_tx", 1)
        router.register("a_tx", 2)
        with pytest.raises(VersionConflict):
            router.register("a_tx", 2)
        with pytest.raises(VersionConflict):
            router.register("b_tx", 3)

    def test_activate_requires_history(self):
        router = Router()
        router.register("a_tx", 1)
        with pytest.raises(UnknownName):
            router.activate("a_tx", 9)
        router.activate("a_tx", 1)

    def test_route_fresh_bundle(self, bundle):
        assert route(bundle, "doTransport_tx").version == 1

    def test_route_unknown(self, bundle):
        with pytest.raises(UnknownName):
            route(bundle, "nope")

    def test_history_strictly_increasing(self, bundle):
        for entry in bundle.router.entries.values():
            history = entry["history"]
            assert history == sorted(set(history))
            assert entry["active"] in history


class TestBundleSerialization:
    def test_round_trip(self, bundle):
        text = bundle_to_json(bundle)
        again = bundle_from_json(text)
        assert bundle_to_json(again) == text

    def test_doc_carries_spec_fields(self, bundle):
        doc = bundle_to_doc(bundle)
        assert set(doc) >= {"modelHash", "scenarioHash", "units", "router"}
        unit_doc = doc["units"][0]
        assert set(unit_doc) >= {
            "logicalName", "version", "nodes", "edges", "scope", "participants",
        }
        assert doc["modelHash"] == bundle.model_hash

    def test_behaviors_embedded_in_task_nodes(self, bundle):
        doc = bundle_to_doc(bundle)
        unit = next(u for u in doc["units"] if u["logicalName"] == "doTransport_tx")
        node = next(n for n in unit["nodes"] if n["id"] == "DoTransport")
        assert node["behavior"]["actor"] == "Transporter"
        assert node["behavior"]["reads"] == ["insuranceDoc", "transporterContract"]
