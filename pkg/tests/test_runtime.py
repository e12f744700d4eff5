"""Discrete-event engine: nested commits, 2PC, recovery order, checkpoints."""

from __future__ import annotations

import json

import pytest

from txforge.canon import canonical_json
from txforge.compiler import compile_bundle
from txforge.errors import (
    CorruptCheckpoint,
    HashMismatch,
    NothingToStep,
    ProtocolError,
    ReentrancyViolation,
    VersionMismatch,
)
from txforge.fixtures import (
    chain_model,
    diamond_model,
    diamond_scenario_doc,
    harvester_bound,
    harvester_plan,
    make_model,
    parallel_model,
    parallel_scenario_doc,
    plan_from_member_sets,
)
from txforge.regions import enumerate_sese, validate_selection
from txforge.runtime import Engine
from txforge.scenario import FaultSpec, bind, scenario_from_doc


def session(model, scenario_doc, selections=None):
    bound = bind(model, scenario_from_doc(scenario_doc))
    if selections is None:
        plan = validate_selection(enumerate_sese(bound.graph), [])
    else:
        plan = plan_from_member_sets(bound, selections)
    return Engine.start_session(compile_bundle(bound, plan))


def harvester_engine(fault=False):
    bound = harvester_bound(fault)
    return Engine.start_session(compile_bundle(bound, harvester_plan(bound)))


def entries(engine, kind):
    return [e for e in engine.journal if e["kind"] == kind]


class TestStartSession:
    def test_fresh_state(self):
        engine = harvester_engine()
        assert len(engine.ledger.blocks) == 0
        assert len(engine.queue) == 1
        assert engine.journal == []
        assert engine.mode == "running"

    def test_scenario_hash_checked(self):
        bound = harvester_bound(False)
        bundle = compile_bundle(bound, harvester_plan(bound))
        with pytest.raises(HashMismatch):
            Engine(bundle, scenario_doc={"tasks": {}, "initial": {},
                                         "results": [], "faults": []})

    def test_matching_scenario_accepted(self):
        bound = harvester_bound(False)
        bundle = compile_bundle(bound, harvester_plan(bound))
        engine = Engine.start_session(bundle, scenario_doc=bundle.scenario_doc)
        assert engine.mode == "running"


class TestStep:
    def test_first_step_begins_first_transaction(self):
        engine = harvester_engine()
        engine.step()
        assert [e["kind"] for e in engine.journal] == ["TxBegun"]
        assert engine.journal[0]["logicalName"] == "priceAndEscrow_tx"

    def test_parallel_split_enqueues_in_document_order(self):
        engine = session(parallel_model(), parallel_scenario_doc())
        while engine.queue and engine.queue[0]["node"] != "gs":
            engine.step()
        engine.step()  # fire the split
        assert [e["node"] for e in engine.queue] == ["A", "B"]

    def test_nothing_to_step_when_done(self):
        engine = harvester_engine()
        engine.run()
        with pytest.raises(NothingToStep):
            engine.step()


class TestRun:
    def test_happy_path_three_blocks(self):
        engine = harvester_engine()
        assert engine.run() == "done-success"
        assert [b.tx_id for b in engine.ledger.blocks] == [
            "priceAndEscrow_tx#1", "transportProduct_tx#1", "receiveAndFinalize_tx#1",
        ]
        child_commits = [
            e for e in entries(engine, "TxCommitted") if e["parentTxId"] is not None
        ]
        assert all(e["block"] is None for e in child_commits)
        assert len(child_commits) == 2  # getTrRequirements_tx, doTransport_tx

    def test_flood_fault_awaits_repair(self):
        engine = harvester_engine(fault=True)
        assert engine.run() == "awaiting-repair"
        assert engine.pending_failure["logicalName"] == "doTransport_tx"

    def test_empty_model_no_blocks(self):
        model = make_model("empty", tasks=[], flows=[("f1", "start", "end")])
        doc = {"tasks": {}, "initial": {}, "results": [], "faults": []}
        engine = session(model, doc)
        assert engine.run() == "done-success"
        assert engine.ledger.blocks == []


class TestExecTask:
    def test_writes_buffer_before_ledger(self):
        engine = harvester_engine()
        while not any(
            e["kind"] == "TaskCompleted" and e["taskId"] == "GetTrRequirements"
            for e in engine.journal
        ):
            engine.step()
        ctx = engine.tx_tree["getTrRequirements_tx#1"]
        assert ctx.buffer == [("trRequirements", "wide-load")]
        # Only priceAndEscrow_tx has committed; the fresh write is buffered.
        assert [b.tx_id for b in engine.ledger.blocks] == ["priceAndEscrow_tx#1"]

    def test_injected_exception_leaves_no_writes(self):
        engine = harvester_engine(fault=True)
        engine.run()
        ctx = engine.tx_tree["doTransport_tx#1"]
        assert ctx.buffer == []
        assert ctx.status == "Failed"
        fault = entries(engine, "FaultInjected")[0]
        assert fault["message"] == "rail line washed out"

    def test_read_your_writes_within_transaction(self):
        model = make_model("ryw", [("T1", "Ops"), ("T2", "Ops")])
        doc = {
            "tasks": {
                "T1": {"actor": "Ops", "reads": [], "writes": [["x", "41"]], "handler": None},
                "T2": {"actor": "Ops", "reads": ["x"], "writes": [["y", "x + 1"]], "handler": None},
            },
            "initial": {}, "results": ["y"], "faults": [],
        }
        engine = session(model, doc, [("pair_tx", {"T1", "T2"})])
        engine.run()
        completed = entries(engine, "TaskCompleted")
        assert completed[1]["reads"] == {"x": 41}
        assert engine.ledger.state["y"] == 42

    def test_child_reads_ancestor_buffer(self):
        engine = harvester_engine()
        engine.run()
        do_transport = next(
            e for e in entries(engine, "TaskCompleted") if e["taskId"] == "DoTransport"
        )
        # insuranceDoc only existed in transportProduct_tx's buffer at the time.
        assert do_transport["reads"]["insuranceDoc"] == "INS-RAIL-7"
        assert do_transport["txId"] == "doTransport_tx#1"

    def test_scope_violation(self):
        model = make_model("scope", [("T1", "Ops"), ("T2", "Ops")])
        doc = {
            "tasks": {
                "T1": {"actor": "Ops", "reads": [], "writes": [["x", "1"]], "handler": None},
                "T2": {"actor": "Ops", "reads": ["x"], "writes": [["y", "x"]], "handler": None},
            },
            "initial": {}, "results": ["y"], "faults": [],
        }
        # T2 alone in a transaction whose region never sees x flow in?  x is
        # written by T1 outside, so In({T2}) = {x}: that is legal.  Force the
        # violation by shrinking the compiled unit's readable set.
        engine = session(model, doc, [("t2_tx", {"T2"})])
        unit = engine.bundle.unit("t2_tx")
        unit.readable = frozenset()
        engine.run()
        assert engine.mode == "awaiting-repair"
        fault = entries(engine, "FaultInjected")[0]
        assert fault["sort"] == "scope"

    def test_actor_joins_all_ancestors(self):
        engine = harvester_engine()
        engine.run()
        assert engine.tx_tree["getTrRequirements_tx#1"].participants == [
            "Seller", "Insurer", "Transporter",
        ]
        assert engine.tx_tree["transportProduct_tx#1"].participants == [
            "Seller", "Insurer", "Transporter",
        ]


class TestHandlers:
    def handler_doc(self, outcome):
        return {
            "tasks": {
                "T": {
                    "actor": "Ops", "reads": [], "writes": [["v", "1"]],
                    "handler": {"actions": [["retryFlag", "true"]], "outcome": outcome},
                }
            },
            "initial": {}, "results": [], "faults": [
                {"task": "T", "attempt": 1, "kind": "exception", "message": "boom"}
            ],
        }

    def test_resolve_completes_with_handler_writes(self):
        engine = session(make_model("h", [("T", "Ops")]), self.handler_doc("resolve"),
                         [("t_tx", {"T"})])
        assert engine.run() == "done-success"
        completed = entries(engine, "TaskCompleted")[0]
        assert completed["viaHandler"] is True
        assert completed["writes"] == [["retryFlag", True]]
        assert engine.ledger.state == {"retryFlag": True}
        assert "v" not in engine.ledger.state

    def test_fail_outcome(self):
        engine = session(make_model("h", [("T", "Ops")]), self.handler_doc("fail"),
                         [("t_tx", {"T"})])
        assert engine.run() == "awaiting-repair"

    def test_no_handler_fails(self):
        doc = self.handler_doc("resolve")
        doc["tasks"]["T"]["handler"] = None
        engine = session(make_model("h", [("T", "Ops")]), doc, [("t_tx", {"T"})])
        assert engine.run() == "awaiting-repair"


class TestBeginAndCommit:
    def test_child_order_and_parents(self):
        engine = harvester_engine()
        engine.run()
        assert engine.tx_tree["transportProduct_tx#1"].child_order == [
            "getTrRequirements_tx#1", "doTransport_tx#1",
        ]
        assert engine.tx_tree["priceAndEscrow_tx#1"].parent is None
        assert engine.tx_tree["getTrRequirements_tx#1"].parent == "transportProduct_tx#1"

    def test_child_commit_merges_buffer_without_block(self):
        engine = harvester_engine()
        committed = None
        while engine.mode == "running" and engine.queue:
            engine.step()
            for e in engine.journal:
                if e["kind"] == "TxCommitted" and e["txId"] == "getTrRequirements_tx#1":
                    committed = e
            if committed:
                break
        assert committed is not None and committed["block"] is None
        parent = engine.tx_tree["transportProduct_tx#1"]
        assert ("insuranceDoc", "INS-RAIL-7") in parent.buffer
        assert len(engine.ledger.blocks) == 1  # only priceAndEscrow so far

    def test_commit_after_parent_abort_is_protocol_error(self):
        engine = harvester_engine()
        engine.run()
        parent = engine.tx_tree["transportProduct_tx#1"]
        child = engine.tx_tree["getTrRequirements_tx#1"]
        parent.status = "Aborted"
        child.status = "Active"
        with pytest.raises(ProtocolError):
            engine._commit_child(child)


class TestTwoPhaseCommit:
    @pytest.mark.parametrize("n,expected", [(1, 3), (2, 8), (3, 15), (4, 24), (5, 35)])
    def test_message_law(self, n, expected):
        model, scenario = chain_model(n)
        members = {f"T{i}" for i in range(n)}
        engine = session(model, scenario, [("all_tx", members)])
        assert engine.run() == "done-success"
        tx_id = "all_tx#1"
        assert engine.messages_2pc[tx_id] == expected
        assert len([e for e in entries(engine, "MessageSent") if e["txId"] == tx_id]) == expected

    def test_message_phases(self):
        model, scenario = chain_model(2)
        engine = session(model, scenario, [("all_tx", {"T0", "T1"})])
        engine.run()
        msgs = entries(engine, "MessageSent")
        phases = [m["phase"] for m in msgs]
        assert phases == ["prepare"] * 2 + ["vote"] * 4 + ["decision"] * 2
        votes = [m for m in msgs if m["phase"] == "vote"]
        assert {(m["sender"], m["recipient"]) for m in votes} == {
            ("Actor0", "coordinator"), ("Actor0", "Actor1"),
            ("Actor1", "coordinator"), ("Actor1", "Actor0"),
        }

    def test_prepare_no_aborts_without_block(self):
        model, scenario = chain_model(2)
        scenario["faults"] = [{
            "task": "T1", "attempt": 1, "kind": "prepare-no",
            "participant": "Actor0", "message": "veto",
        }]
        engine = session(model, scenario, [("all_tx", {"T0", "T1"})])
        assert engine.run() == "awaiting-repair"
        assert engine.ledger.blocks == []
        assert engine.messages_2pc["all_tx#1"] == 8  # full exchange still happens
        decisions = [m for m in entries(engine, "MessageSent") if m["phase"] == "decision"]
        assert all(m["decision"] == "abort" for m in decisions)
        assert engine.tx_tree["all_tx#1"].status == "Failed"

    def test_no_participants_commits_empty(self):
        model = make_model("empty", tasks=[], flows=[("f1", "start", "end")])
        doc = {"tasks": {}, "initial": {}, "results": [], "faults": []}
        engine = session(model, doc)
        engine.run()
        assert entries(engine, "MessageSent") == []


class TestAbortRecovery:
    def two_children_engine(self):
        """Parent region {A,B,C} with committed children {A}, {B}; C faults."""
        model = make_model("rec", [("A", "Alpha"), ("B", "Beta"), ("C", "Gamma")])
        doc = {
            "tasks": {
                "A": {"actor": "Alpha", "reads": [], "writes": [["a", "1"]], "handler": None},
                "B": {"actor": "Beta", "reads": [], "writes": [["b", "2"]], "handler": None},
                "C": {"actor": "Gamma", "reads": [], "writes": [["c", "3"]], "handler": None},
            },
            "initial": {}, "results": ["a", "b", "c"],
            "faults": [{"task": "C", "attempt": 1, "kind": "exception", "message": "boom"}],
        }
        return session(model, doc, [
            ("parent_tx", {"A", "B", "C"}), ("a_tx", {"A"}), ("b_tx", {"B"}),
        ])

    def test_reverse_first_invocation_order(self):
        engine = self.two_children_engine()
        assert engine.run() == "awaiting-repair"
        notified = [(e["txId"], e["participant"]) for e in entries(engine, "RecoveryNotified")]
        # b_tx began after a_tx, so its notice comes first, parent's own last.
        assert notified == [
            ("b_tx#1", "Beta"), ("a_tx#1", "Alpha"),
            ("parent_tx#1", "Alpha"), ("parent_tx#1", "Beta"),
        ]
        assert engine.ledger.blocks == []
        assert engine.ledger.state == {}

    def test_notices_follow_begin_sequence(self):
        engine = self.two_children_engine()
        engine.run()
        begin_seq = {e["txId"]: e["seq"] for e in entries(engine, "TxBegun")}
        notice_order = [e["txId"] for e in entries(engine, "RecoveryNotified")
                        if e["txId"] != "parent_tx#1"]
        assert notice_order == sorted(notice_order, key=lambda t: -begin_seq[t])

    def test_nested_grandchildren_recovered_first(self):
        engine = harvester_engine(fault=True)
        engine.run()
        from txforge.repair import escalate, make_ticket

        ticket = make_ticket(engine)
        escalate(engine, ticket)
        notified = [(e["txId"], e["participant"]) for e in entries(engine, "RecoveryNotified")]
        assert notified == [
            ("getTrRequirements_tx#1", "Seller"),
            ("getTrRequirements_tx#1", "Insurer"),
            ("getTrRequirements_tx#1", "Transporter"),
            ("transportProduct_tx#1", "Seller"),
            ("transportProduct_tx#1", "Insurer"),
            ("transportProduct_tx#1", "Transporter"),
        ]

    def test_abort_with_no_children_or_participants(self):
        engine = harvester_engine(fault=True)
        engine.run()
        aborted = entries(engine, "TxAborted")
        assert [e["txId"] for e in aborted] == ["doTransport_tx#1"]
        assert entries(engine, "RecoveryNotified") == []

    def test_ledger_untouched_by_abort(self):
        engine = harvester_engine(fault=True)
        hashes = {}
        while engine.mode == "running" and engine.queue:
            before = engine.ledger.dump_hash()
            engine.step()
            for e in engine.journal:
                if e["kind"] == "TxBegun" and e["txId"] not in hashes:
                    hashes[e["txId"]] = before
        assert engine.mode == "awaiting-repair"
        assert engine.ledger.dump_hash() == hashes["doTransport_tx#1"]


class TestReentrancyGuard:
    def test_normal_run_has_no_violation(self):
        engine = harvester_engine()
        engine.run()
        assert all(e.get("sort") != "reentrancy" for e in entries(engine, "FaultInjected"))

    def test_double_acquire_raises(self):
        engine = harvester_engine()
        lock = engine.reentrancy_guard("doTransport_tx", "DoTransport")
        with pytest.raises(ReentrancyViolation):
            engine.reentrancy_guard("doTransport_tx", "DoTransport")
        engine.release_guard(lock)
        engine.reentrancy_guard("doTransport_tx", "DoTransport")

    def test_redispatch_while_active_fails_transaction(self):
        """A crafted re-dispatch: the lock is already held when the task's
        token arrives, as if a handler re-sent the task event mid-flight."""
        engine = harvester_engine()
        engine.reentrancy_guard("doTransport_tx", "DoTransport")
        engine.run()
        assert engine.mode == "awaiting-repair"
        fault = next(e for e in entries(engine, "FaultInjected") if e["sort"] == "reentrancy")
        assert fault["taskId"] == "DoTransport"

    def test_parallel_branches_use_distinct_locks(self):
        engine = session(parallel_model(), parallel_scenario_doc())
        assert engine.run() == "done-success"


class TestGuardsAtRuntime:
    def test_guard_evaluated_journal(self):
        engine = session(diamond_model(), diamond_scenario_doc(pick=1))
        engine.run()
        guard = entries(engine, "GuardEvaluated")[0]
        assert guard["flowId"] == "f2" and guard["value"] is True
        assert engine.ledger.state["route"] == "via-a"

    def test_default_taken_when_guard_false(self):
        engine = session(diamond_model(), diamond_scenario_doc(pick=2))
        engine.run()
        assert engine.ledger.state["route"] == "via-b"

    def test_unroutable_token_fails(self):
        model = diamond_model()
        # Replace the default flow by a guarded one that is also false.
        from dataclasses import replace

        flows = [
            replace(f, guard="pick == 2", is_default=False) if f.id == "f3" else f
            for f in model.flows
        ]
        model = type(model)(
            id=model.id, elements=model.elements, flows=flows, lanes=model.lanes
        )
        engine = session(model, diamond_scenario_doc(pick=3), [("dia_tx", {"gs", "A", "B", "gm"})])
        engine.run()
        assert engine.mode == "awaiting-repair"
        assert any(e["sort"] == "guard" for e in entries(engine, "FaultInjected"))


class TestNativeMainTasks:
    def test_each_main_task_commits_its_own_block(self):
        engine = harvester_engine()  # plan selected
        selected_state = None
        engine.run()
        selected_state = dict(engine.ledger.state)

        bound = harvester_bound(False)
        plan = validate_selection(enumerate_sese(bound.graph), [])
        native = Engine.start_session(compile_bundle(bound, plan))
        assert native.run() == "done-success"
        assert len(native.ledger.blocks) == 6
        assert native.ledger.state == selected_state
        assert native.messages_2pc == {}

    def test_native_fault_keeps_ledger(self):
        bound = harvester_bound(True)
        plan = validate_selection(enumerate_sese(bound.graph), [])
        engine = Engine.start_session(compile_bundle(bound, plan))
        assert engine.run() == "awaiting-repair"
        assert len(engine.ledger.blocks) == 4  # everything before DoTransport
        assert "deliveryStatus" not in engine.ledger.state


class TestTopLevelSerialization:
    def test_parallel_branch_transactions_never_interleave(self):
        """Two selected regions on parallel branches: only one top-level
        chain may hold the ledger at a time, so the second begins after the
        first commits."""
        engine = session(parallel_model(), parallel_scenario_doc(),
                         [("a_tx", {"A"}), ("b_tx", {"B"})])
        assert engine.run() == "done-success"
        begun = {e["txId"]: e["seq"] for e in entries(engine, "TxBegun")
                 if not e["txId"].startswith("main.")}
        committed = {e["txId"]: e["seq"] for e in entries(engine, "TxCommitted")
                     if e["txId"] in begun}
        spans = sorted((begun[tx], committed[tx]) for tx in begun)
        for (b1, c1), (b2, c2) in zip(spans, spans[1:]):
            assert c1 < b2, "top-level transaction windows overlap"
        assert engine.ledger.state["total"] == 5


class TestVisibility:
    def test_no_variable_leaks_before_top_commit(self):
        engine = harvester_engine()
        heights = {}
        while engine.mode == "running" and engine.queue:
            before = len(engine.ledger.blocks)
            engine.step()
            for e in engine.journal:
                if e["kind"] == "TaskCompleted" and e["taskId"] not in heights:
                    heights[e["taskId"]] = before
        # Every block write happened at a strictly lower ledger height.
        for block in engine.ledger.blocks:
            for var, _ in block.writes:
                writer = next(
                    e for e in entries(engine, "TaskCompleted")
                    if var in [w[0] for w in e["writes"]]
                )
                assert heights[writer["taskId"]] < block.height


class TestCheckpoint:
    def test_fresh_checkpoint_restores_to_zero(self):
        engine = harvester_engine()
        doc = engine.checkpoint()
        again = Engine.restore(doc)
        assert again.step_count == 0
        assert again.journal == []
        assert len(again.queue) == 1

    def test_restore_requires_format_version(self):
        engine = harvester_engine()
        doc = engine.checkpoint()
        doc["formatVersion"] = 2
        with pytest.raises(VersionMismatch):
            Engine.restore(doc)

    def test_truncation_detected(self):
        engine = harvester_engine()
        doc = engine.checkpoint()
        doc["journal"] = [{"seq": 1, "kind": "Forged"}]
        with pytest.raises(CorruptCheckpoint):
            Engine.restore(doc)

    def test_self_hash_round_trips_through_json(self):
        engine = harvester_engine()
        engine.run(max_steps=4)
        text = canonical_json(engine.checkpoint())
        again = Engine.restore(json.loads(text))
        assert again.step_count == engine.step_count

    def test_checkpoint_transparency_every_step(self):
        reference = harvester_engine(fault=False)
        reference.run()
        engine = harvester_engine(fault=False)
        while engine.mode == "running" and engine.queue:
            engine.step()
            engine = Engine.restore(json.loads(canonical_json(engine.checkpoint())))
        assert engine.journal_dump() == reference.journal_dump()
        assert engine.ledger.dump_jsonl() == reference.ledger.dump_jsonl()


class TestDeterminism:
    def test_byte_identical_runs(self):
        a, b = harvester_engine(True), harvester_engine(True)
        a.run()
        b.run()
        assert a.journal_dump() == b.journal_dump()
        assert a.ledger.dump_jsonl() == b.ledger.dump_jsonl()

    def test_parallel_model_deterministic(self):
        a = session(parallel_model(), parallel_scenario_doc())
        b = session(parallel_model(), parallel_scenario_doc())
        a.run()
        b.run()
        assert a.journal_dump() == b.journal_dump()


class TestMetrics:
    def test_fresh_session_zero(self):
        engine = harvester_engine()
        m = engine.metrics()
        assert m["messages2pc"] == {}
        assert m["taskAttempts"] == {}
        assert m["steps"] == 0

    def test_totals_match_journal_recount(self):
        engine = harvester_engine()
        engine.run()
        recount = engine.recount_from_journal()
        assert recount["messages2pc"] == engine.metrics()["messages2pc"]
        assert recount["taskAttempts"] == engine.metrics()["taskAttempts"]
        total = sum(engine.messages_2pc.values())
        assert total == 3 + 15 + 3  # n=1, n=3, n=1 over the three top commits

    def test_injected_fault_registration_journaled(self):
        engine = harvester_engine()
        engine.inject_fault(FaultSpec("DoTransport", 1, "exception", "late fault"))
        registered = [e for e in entries(engine, "FaultInjected") if e["stage"] == "registered"]
        assert len(registered) == 1
        engine.run()
        assert engine.mode == "awaiting-repair"
