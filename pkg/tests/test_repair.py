"""Repair tickets, patch verdicts, escalation, version flips, and resume."""

from __future__ import annotations

import pytest

from conftest import (
    RAIL_REROUTE_FRAGMENT,
    RAIL_REROUTE_PATCH,
    ROAD_INNER_FRAGMENT,
    ROAD_INNER_PATCH,
    ROAD_PARENT_FRAGMENT,
    ROAD_PARENT_PATCH,
)
from txforge.compiler import compile_bundle, route
from txforge.errors import NoParent, NoPatchApplied, NotAwaitingRepair, ProtocolError, StaleTicket
from txforge.fixtures import harvester_bound, harvester_plan, make_model, plan_from_member_sets
from txforge.regions import enumerate_sese, validate_selection
from txforge.repair import (
    ACCEPTED,
    ESCALATED,
    REJECTED,
    FragmentPatch,
    RepairTicket,
    apply_patch,
    escalate,
    make_ticket,
    resume,
    validate_patch,
)
from txforge.runtime import Engine
from txforge.scenario import bind, scenario_from_doc


def rail_patch():
    return FragmentPatch(RAIL_REROUTE_FRAGMENT, dict(RAIL_REROUTE_PATCH))


def road_inner_patch(**kw):
    return FragmentPatch(ROAD_INNER_FRAGMENT, dict(ROAD_INNER_PATCH), **kw)


def road_parent_patch(**kw):
    return FragmentPatch(ROAD_PARENT_FRAGMENT, dict(ROAD_PARENT_PATCH), **kw)


class TestMakeTicket:
    def test_innermost_region(self, flood_engine):
        ticket = make_ticket(flood_engine)
        assert ticket.logical_name == "doTransport_tx"
        assert ticket.region.members == frozenset({"DoTransport"})
        assert ticket.cause == {
            "taskId": "DoTransport", "message": "rail line washed out", "attempt": 1,
        }
        assert ticket.escalation_depth == 0

    def test_dataflow_context(self, flood_engine):
        ticket = make_ticket(flood_engine)
        assert ticket.in_set == frozenset({"insuranceDoc", "transporterContract"})
        assert ticket.required_out >= frozenset({"deliveryStatus"})

    def test_completed_tasks_scoped_to_failure(self, flood_engine):
        ticket = make_ticket(flood_engine)
        assert ticket.completed == []  # nothing completed inside doTransport_tx

    def test_idempotent(self, flood_engine):
        t1 = make_ticket(flood_engine)
        t2 = make_ticket(flood_engine)
        assert t1.ticket_id == t2.ticket_id == "T1"

    def test_requires_awaiting_repair(self, harvester_bundle):
        engine = Engine.start_session(harvester_bundle)
        engine.run()
        with pytest.raises(NotAwaitingRepair):
            make_ticket(engine)


class TestValidatePatch:
    def test_rail_reroute_accepted(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, rail_patch())
        assert verdict.verdict == ACCEPTED
        assert verdict.reasons == []

    def test_road_switch_escalates(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, road_inner_patch())
        assert verdict.verdict == ESCALATED
        assert verdict.target == "transportProduct_tx"
        reason = verdict.reasons[0]
        assert reason["check"] == "PreRepair"
        assert reason["offendingVars"] == ["roadInsuranceDoc", "roadTransporterContract"]
        assert verdict.new_ticket.logical_name == "transportProduct_tx"

    def test_missing_required_out_escalates(self, flood_engine):
        ticket = make_ticket(flood_engine)
        patch = FragmentPatch(RAIL_REROUTE_FRAGMENT, {
            "DoTransport": {
                "actor": "Transporter",
                "reads": ["insuranceDoc", "transporterContract"],
                "writes": [["somethingElse", "1"]],  # never writes deliveryStatus
                "handler": None,
            }
        })
        verdict = validate_patch(flood_engine, ticket, patch)
        assert verdict.verdict == ESCALATED
        assert any(
            r["check"] == "PostRepair" and r["offendingVars"] == ["deliveryStatus"]
            for r in verdict.reasons
        )

    def test_malformed_fragment_rejected(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(
            flood_engine, ticket, FragmentPatch("<broken", {})
        )
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Structural"

    def test_non_sese_fragment_rejected(self, flood_engine):
        two_roots = RAIL_REROUTE_FRAGMENT.replace(
            '<bpmn:task id="DoTransport" name="DoTransport"/>',
            '<bpmn:task id="DoTransport" name="DoTransport"/><bpmn:task id="Loose"/>',
        )
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, FragmentPatch(two_roots, {}))
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Structural"

    def test_id_collision_rejected(self, flood_engine):
        stolen_id = RAIL_REROUTE_FRAGMENT.replace("DoTransport", "PriceAndEscrow")
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, FragmentPatch(stolen_id, {
            "PriceAndEscrow": RAIL_REROUTE_PATCH["DoTransport"],
        }))
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Structural"

    def test_undeclared_actor_rejected(self, flood_engine):
        ticket = make_ticket(flood_engine)
        fragment = RAIL_REROUTE_FRAGMENT.replace('name="Transporter"', 'name="Pirate"')
        patch = FragmentPatch(fragment, {
            "DoTransport": dict(RAIL_REROUTE_PATCH["DoTransport"], actor="Pirate"),
        })
        verdict = validate_patch(flood_engine, ticket, patch)
        assert verdict.verdict == REJECTED
        assert all(r["check"] == "Behavior" for r in verdict.reasons)

    def test_missing_behavior_rejected(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, FragmentPatch(ROAD_INNER_FRAGMENT, {}))
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Behavior"

    def test_reuse_of_never_completed_task_rejected(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(
            flood_engine, ticket, FragmentPatch(
                RAIL_REROUTE_FRAGMENT, dict(RAIL_REROUTE_PATCH),
                reuse_completed=["GetRailInsurance"],
            )
        )
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Reuse"

    def test_stale_ticket(self, flood_engine):
        ticket = make_ticket(flood_engine)
        wrong = RepairTicket.from_doc(dict(ticket.to_doc(), ticketId="T99"))
        with pytest.raises(StaleTicket):
            validate_patch(flood_engine, wrong, rail_patch())


class TestEscalate:
    def test_ticket_for_parent_fragment(self, flood_engine):
        ticket = make_ticket(flood_engine)
        parent = escalate(flood_engine, ticket)
        assert parent.logical_name == "transportProduct_tx"
        assert parent.escalation_depth == 1
        assert parent.fragment.xml.count("<bpmn:task") == 4
        assert {c["taskId"] for c in parent.completed} == {
            "GetTrRequirements", "GetRailInsurance", "GetRailTransporter",
        }

    def test_recovery_notices_emitted(self, flood_engine):
        ticket = make_ticket(flood_engine)
        escalate(flood_engine, ticket)
        notices = [e for e in flood_engine.journal if e["kind"] == "RecoveryNotified"]
        assert [(n["txId"], n["participant"]) for n in notices][:3] == [
            ("getTrRequirements_tx#1", "Seller"),
            ("getTrRequirements_tx#1", "Insurer"),
            ("getTrRequirements_tx#1", "Transporter"),
        ]
        assert flood_engine.tx_tree["transportProduct_tx#1"].status == "Aborted"

    def test_escalation_chain_terminates_at_root(self, flood_engine):
        ticket = make_ticket(flood_engine)
        t2 = escalate(flood_engine, ticket)
        t3 = escalate(flood_engine, t2)
        assert t3.logical_name == "main"
        with pytest.raises(NoParent):
            escalate(flood_engine, t3)

    def test_root_ticket_violation_rejected_noparent(self, flood_engine):
        ticket = make_ticket(flood_engine)
        t2 = escalate(flood_engine, ticket)
        t3 = escalate(flood_engine, t2)
        verdict = validate_patch(flood_engine, t3, road_inner_patch())
        assert verdict.verdict == REJECTED
        assert any("NoParent" in r["detail"] for r in verdict.reasons)

    def test_root_repair_replaces_whole_body_and_restarts(self, flood_engine):
        ticket = make_ticket(flood_engine)
        t2 = escalate(flood_engine, ticket)
        t3 = escalate(flood_engine, t2)
        assert t3.logical_name == "main"
        assert t3.fragment.xml.count("<bpmn:task") == 6
        assert t3.in_set <= frozenset({"askPrice", "budget", "product"})
        assert t3.required_out == frozenset({"deliveryStatus", "paymentStatus"})

        body = """<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="http://www.omg.org/spec/BPMN/20100524/MODEL" id="d">
  <bpmn:process id="p">
    <bpmn:laneSet id="ls"><bpmn:lane id="lb" name="Buyer">
      <bpmn:flowNodeRef>FullTrade</bpmn:flowNodeRef>
    </bpmn:lane></bpmn:laneSet>
    <bpmn:task id="FullTrade" name="FullTrade"/>
  </bpmn:process>
</bpmn:definitions>
"""
        patch = FragmentPatch(body, {
            "FullTrade": {
                "actor": "Buyer",
                "reads": ["askPrice"],
                "writes": [["deliveryStatus", '"hand-delivered"'],
                           ["paymentStatus", '"paid"']],
                "handler": None,
            }
        })
        verdict = validate_patch(flood_engine, t3, patch)
        assert verdict.verdict == ACCEPTED
        blocks_before = len(flood_engine.ledger.blocks)
        apply_patch(flood_engine, t3, patch)
        assert flood_engine.bundle.router.active_version("main") == 2
        assert resume(flood_engine) == "done-success"
        # Prior blocks stay (append-only); the restarted body adds its own.
        assert len(flood_engine.ledger.blocks) > blocks_before
        assert flood_engine.ledger.blocks[0].tx_id == "priceAndEscrow_tx#1"
        assert flood_engine.ledger.state["deliveryStatus"] == "hand-delivered"
        assert flood_engine.bundle.plan.selections == []


class TestApplyPatch:
    def test_router_flip(self, flood_engine):
        ticket = make_ticket(flood_engine)
        result = apply_patch(flood_engine, ticket, rail_patch())
        assert result == {"newVersion": 2, "logicalName": "doTransport_tx"}
        assert route(flood_engine.bundle, "doTransport_tx").version == 2
        assert flood_engine.bundle.router.entries["doTransport_tx"]["history"] == [1, 2]
        for name, entry in flood_engine.bundle.router.entries.items():
            if name != "doTransport_tx":
                assert entry["active"] == 1

    def test_requires_accepted_verdict(self, flood_engine):
        ticket = make_ticket(flood_engine)
        with pytest.raises(ProtocolError):
            apply_patch(flood_engine, ticket, road_inner_patch())
        assert flood_engine.bundle.router.active_version("doTransport_tx") == 1

    def test_failed_bind_leaves_router_unchanged(self, flood_engine):
        ticket = make_ticket(flood_engine)
        # Reads a variable that no path can provide: bind fails after splice.
        patch = FragmentPatch(RAIL_REROUTE_FRAGMENT, {
            "DoTransport": {
                "actor": "Transporter",
                "reads": ["insuranceDoc", "transporterContract"],
                "writes": [["deliveryStatus", '"delivered"']],
                "handler": None,
            }
        })
        # Sabotage: behavior patch also tries to change an unrelated task.
        patch.scenario_patch["GetRailInsurance"] = {
            "actor": "Insurer", "reads": [], "writes": [], "handler": None,
        }
        verdict = validate_patch(flood_engine, ticket, patch)
        assert verdict.verdict == REJECTED  # behavior outside fragment
        assert flood_engine.bundle.router.active_version("doTransport_tx") == 1

    def test_journal_records_patch(self, flood_engine):
        ticket = make_ticket(flood_engine)
        apply_patch(flood_engine, ticket, rail_patch())
        entry = next(e for e in flood_engine.journal if e["kind"] == "PatchApplied")
        assert entry["logicalName"] == "doTransport_tx"
        assert (entry["oldVersion"], entry["newVersion"]) == (1, 2)
        assert entry["ticketId"] == "T1"


class TestResume:
    def test_rail_reroute_locality(self, flood_engine):
        pre_failure_blocks = [b.content_hash for b in flood_engine.ledger.blocks]
        ticket = make_ticket(flood_engine)
        apply_patch(flood_engine, ticket, rail_patch())
        assert resume(flood_engine) == "done-success"
        assert [b.content_hash for b in flood_engine.ledger.blocks[:1]] == pre_failure_blocks
        assert len(flood_engine.ledger.blocks) == 3
        assert flood_engine.ledger.state["routeUsed"] == "alt-rail"
        assert flood_engine.attempt_counts["DoTransport"] == 2
        # The fresh instance ran against version 2.
        begun = [e for e in flood_engine.journal
                 if e["kind"] == "TxBegun" and e["logicalName"] == "doTransport_tx"]
        assert [e["version"] for e in begun] == [1, 2]

    def test_escalated_road_switch_end_to_end(self, flood_engine):
        ticket = make_ticket(flood_engine)
        verdict = validate_patch(flood_engine, ticket, road_inner_patch())
        assert verdict.verdict == ESCALATED
        parent_ticket = escalate(flood_engine, ticket)
        verdict2 = validate_patch(flood_engine, parent_ticket, road_parent_patch())
        assert verdict2.verdict == ACCEPTED
        apply_patch(flood_engine, parent_ticket, road_parent_patch())
        assert resume(flood_engine) == "done-success"
        state = flood_engine.ledger.state
        assert state["roadInsuranceDoc"] == "INS-ROAD-3"
        assert state["deliveryStatus"] == "delivered-by-road"
        assert state["paymentStatus"] == "paid"
        assert route(flood_engine.bundle, "transportProduct_tx").version == 2

    def test_resume_without_patch(self, flood_engine):
        make_ticket(flood_engine)
        with pytest.raises(NoPatchApplied):
            resume(flood_engine)

    def test_resume_when_running(self, harvester_bundle):
        engine = Engine.start_session(harvester_bundle)
        with pytest.raises(NoPatchApplied):
            resume(engine)


class TestReplay:
    def failing_pair_engine(self):
        """Region {P, Q}: P completes, then Q faults; repair replaces Q's
        behavior and replays P from the journal."""
        model = make_model("replay", [("P", "Alpha"), ("Q", "Beta")])
        doc = {
            "tasks": {
                "P": {"actor": "Alpha", "reads": [], "writes": [["prep", "7"]], "handler": None},
                "Q": {"actor": "Beta", "reads": ["prep"], "writes": [["out", "prep + 1"]], "handler": None},
            },
            "initial": {}, "results": ["out"],
            "faults": [{"task": "Q", "attempt": 1, "kind": "exception", "message": "boom"}],
        }
        bound = bind(model, scenario_from_doc(doc))
        plan = plan_from_member_sets(bound, [("pq_tx", {"P", "Q"})])
        engine = Engine.start_session(compile_bundle(bound, plan))
        assert engine.run() == "awaiting-repair"
        return engine

    def patch_xml(self):
        return """<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="http://www.omg.org/spec/BPMN/20100524/MODEL" id="d">
  <bpmn:process id="p">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="la" name="Alpha"><bpmn:flowNodeRef>P</bpmn:flowNodeRef></bpmn:lane>
      <bpmn:lane id="lb" name="Beta"><bpmn:flowNodeRef>Q</bpmn:flowNodeRef></bpmn:lane>
    </bpmn:laneSet>
    <bpmn:task id="P"/>
    <bpmn:task id="Q"/>
    <bpmn:sequenceFlow id="pq" sourceRef="P" targetRef="Q"/>
  </bpmn:process>
</bpmn:definitions>
"""

    def test_replayed_writes_match_snapshot_exactly(self):
        engine = self.failing_pair_engine()
        ticket = make_ticket(engine)
        assert [c["taskId"] for c in ticket.completed] == ["P"]
        snapshot = ticket.completed[0]["writes"]
        patch = FragmentPatch(self.patch_xml(), {
            "P": {"actor": "Alpha", "reads": [], "writes": [["prep", "7"]], "handler": None},
            "Q": {"actor": "Beta", "reads": ["prep"], "writes": [["out", "prep + 2"]], "handler": None},
        }, reuse_completed=["P"])
        verdict = validate_patch(engine, ticket, patch)
        assert verdict.verdict == ACCEPTED
        apply_patch(engine, ticket, patch)
        msgs_before = sum(engine.messages_2pc.values())
        assert resume(engine) == "done-success"

        replayed = [e for e in engine.journal
                    if e["kind"] == "TaskCompleted" and e["replayed"]]
        assert len(replayed) == 1
        assert replayed[0]["taskId"] == "P"
        assert replayed[0]["writes"] == snapshot
        # P executed once (the original attempt); replay does not re-execute.
        assert engine.attempt_counts["P"] == 1
        assert engine.ledger.state["out"] == 9
        # Replay contributes the snapshotted actor and nothing else: the new
        # transaction still has both participants, costing 8 messages.
        tx2 = engine.tx_tree["pq_tx#2"]
        assert tx2.participants == ["Alpha", "Beta"]
        assert sum(engine.messages_2pc.values()) - msgs_before == 8

    def test_changed_write_set_blocks_reuse(self):
        engine = self.failing_pair_engine()
        ticket = make_ticket(engine)
        patch = FragmentPatch(self.patch_xml(), {
            "P": {"actor": "Alpha", "reads": [], "writes": [["prepRenamed", "7"]], "handler": None},
            "Q": {"actor": "Beta", "reads": [], "writes": [["out", "1"]], "handler": None},
        }, reuse_completed=["P"])
        verdict = validate_patch(engine, ticket, patch)
        assert verdict.verdict == REJECTED
        assert verdict.reasons[0]["check"] == "Reuse"


class TestVersionMonotonicity:
    def test_two_sequential_repairs(self, flood_engine):
        ticket = make_ticket(flood_engine)
        apply_patch(flood_engine, ticket, rail_patch())
        resume(flood_engine)
        # Inject a second failure on the repaired task's next run.
        from txforge.scenario import FaultSpec

        engine2 = Engine.restore(flood_engine.checkpoint())
        assert engine2.bundle.router.active_version("doTransport_tx") == 2


class TestAcceptanceSoundness:
    def test_accepted_verdicts_satisfy_oracle_inclusions(self, flood_engine):
        """Accepted means both dataflow inclusions hold, re-checked against
        the independent path-enumeration oracles."""
        from oracles import oracle_external_reads, oracle_guaranteed_writes
        from txforge.bpmn import fragment_to_model, parse_fragment
        from txforge.regions import build_flow_graph
        from txforge.repair import _fragment_behaviors
        from txforge.scenario import _parse_task

        ticket = make_ticket(flood_engine)
        patch = rail_patch()
        assert validate_patch(flood_engine, ticket, patch).verdict == ACCEPTED

        frag = parse_fragment(patch.fragment_xml)
        behaviors = {
            tid: _parse_task(tid, doc) for tid, doc in patch.scenario_patch.items()
        }
        graph, nb = _fragment_behaviors(frag, behaviors)
        assert oracle_external_reads(graph, nb) <= ticket.in_set
        assert ticket.required_out <= oracle_guaranteed_writes(graph, nb)

    def test_escalated_parent_patch_also_sound(self, flood_engine):
        from oracles import oracle_external_reads, oracle_guaranteed_writes
        from txforge.bpmn import parse_fragment
        from txforge.repair import _fragment_behaviors
        from txforge.scenario import _parse_task

        ticket = make_ticket(flood_engine)
        parent_ticket = escalate(flood_engine, ticket)
        patch = road_parent_patch()
        assert validate_patch(flood_engine, parent_ticket, patch).verdict == ACCEPTED
        frag = parse_fragment(patch.fragment_xml)
        behaviors = {
            tid: _parse_task(tid, doc) for tid, doc in patch.scenario_patch.items()
        }
        graph, nb = _fragment_behaviors(frag, behaviors)
        assert oracle_external_reads(graph, nb) <= parent_ticket.in_set
        assert parent_ticket.required_out <= oracle_guaranteed_writes(graph, nb)


class TestCheckpointAcrossRepair:
    def test_restore_at_awaiting_repair_matches_uninterrupted_run(self):
        import json

        from txforge.canon import canonical_json

        def fresh_bundle():
            bound = harvester_bound(True)
            return compile_bundle(bound, harvester_plan(bound))

        direct = Engine.start_session(fresh_bundle())
        direct.run()
        ticket = make_ticket(direct)
        apply_patch(direct, ticket, rail_patch())
        resume(direct)

        paused = Engine.start_session(fresh_bundle())
        paused.run()
        restored = Engine.restore(json.loads(canonical_json(paused.checkpoint())))
        ticket2 = make_ticket(restored)
        apply_patch(restored, ticket2, rail_patch())
        resume(restored)

        assert restored.ledger.dump_jsonl() == direct.ledger.dump_jsonl()
        assert restored.journal_dump() == direct.journal_dump()
