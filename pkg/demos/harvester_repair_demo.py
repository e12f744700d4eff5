#!/usr/bin/env python3
"""Walkthrough: the harvester sale, a washed-out rail line, and two repairs.

Runs entirely in process. The same flow is available through the CLI
(compile / select / run / ticket / repair / resume) and the HTTP console.
"""

from txforge.bpmn import BPMN_NS
from txforge.compiler import compile_bundle
from txforge.fixtures import harvester_bound, harvester_plan
from txforge.repair import (
    FragmentPatch,
    apply_patch,
    escalate,
    make_ticket,
    resume,
    validate_patch,
)
from txforge.runtime import Engine


def banner(text: str) -> None:
    print(f"\n=== {text} " + "=" * max(0, 60 - len(text)))


def show_ledger(engine: Engine) -> None:
    for block in engine.ledger.blocks:
        writes = ", ".join(f"{var}={value!r}" for var, value in block.writes)
        print(f"  block {block.height} [{block.tx_id}]  {writes}")
    if not engine.ledger.blocks:
        print("  (empty)")


RAIL_REROUTE_FRAGMENT = f"""<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="defs_rail_reroute">
  <bpmn:process id="rail_reroute" isExecutable="false">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="lane_Transporter" name="Transporter">
        <bpmn:flowNodeRef>DoTransport</bpmn:flowNodeRef>
      </bpmn:lane>
    </bpmn:laneSet>
    <bpmn:task id="DoTransport" name="DoTransport"/>
  </bpmn:process>
</bpmn:definitions>
"""


def fresh_session() -> Engine:
    bound = harvester_bound(with_flood_fault=True)
    return Engine.start_session(compile_bundle(bound, harvester_plan(bound)))


def main() -> None:
    banner("1. Run into the flood")
    engine = fresh_session()
    status = engine.run()
    print(f"terminal status: {status}")
    print(f"failure: {engine.pending_failure}")
    show_ledger(engine)

    banner("2. Export the repair ticket (innermost transaction)")
    ticket = make_ticket(engine)
    print(f"ticket {ticket.ticket_id} for {ticket.logical_name}")
    print(f"  flows in : {sorted(ticket.in_set)}")
    print(f"  must out : {sorted(ticket.required_out)}")

    banner("3. Try switching to road transport")
    road_patch = FragmentPatch(
        RAIL_REROUTE_FRAGMENT.replace("DoTransport", "DoRoadTransport"),
        {
            "DoRoadTransport": {
                "actor": "Transporter",
                "reads": ["roadInsuranceDoc", "roadTransporterContract"],
                "writes": [["deliveryStatus", '"delivered-by-road"']],
                "handler": None,
            }
        },
    )
    verdict = validate_patch(engine, ticket, road_patch)
    print(f"verdict: {verdict.verdict} -> {verdict.target}")
    for reason in verdict.reasons:
        print(f"  {reason['check']}: offending vars {reason['offendingVars']}")
    print("road transport needs documents this transaction never received,")
    print("so the repair would escalate; take the alternative rail route instead.")

    banner("4. Re-route on rail with the same insurance and transporter")
    rail_patch = FragmentPatch(RAIL_REROUTE_FRAGMENT, {
        "DoTransport": {
            "actor": "Transporter",
            "reads": ["insuranceDoc", "transporterContract"],
            "writes": [["deliveryStatus", '"delivered"'], ["routeUsed", '"alt-rail"']],
            "handler": None,
        }
    })
    verdict = validate_patch(engine, ticket, rail_patch)
    print(f"verdict: {verdict.verdict}")
    result = apply_patch(engine, ticket, rail_patch)
    print(f"deployed {result['logicalName']} v{result['newVersion']}; router: "
          + ", ".join(f"{name}@v{entry['active']}"
                      for name, entry in engine.bundle.router.entries.items()))

    banner("5. Resume against the repaired version")
    status = resume(engine)
    print(f"terminal status: {status}")
    show_ledger(engine)
    print(f"task attempts: {engine.metrics()['taskAttempts']}")

    banner("6. The escalation path, end to end")
    engine2 = fresh_session()
    engine2.run()
    ticket2 = make_ticket(engine2)
    v = validate_patch(engine2, ticket2, road_patch)
    print(f"road patch on {ticket2.logical_name}: {v.verdict} -> {v.target}")
    parent_ticket = escalate(engine2, ticket2)
    notices = [e for e in engine2.journal if e["kind"] == "RecoveryNotified"]
    print(f"escalated to {parent_ticket.logical_name}; recovery notices:")
    for notice in notices:
        print(f"  {notice['txId']} -> {notice['participant']}")
    parent_patch = FragmentPatch(
        """<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="http://www.omg.org/spec/BPMN/20100524/MODEL" id="d">
  <bpmn:process id="p">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="l1" name="Seller"><bpmn:flowNodeRef>GetRoadRequirements</bpmn:flowNodeRef></bpmn:lane>
      <bpmn:lane id="l2" name="Insurer"><bpmn:flowNodeRef>GetRoadInsurance</bpmn:flowNodeRef></bpmn:lane>
      <bpmn:lane id="l3" name="Transporter">
        <bpmn:flowNodeRef>GetRoadTransporter</bpmn:flowNodeRef>
        <bpmn:flowNodeRef>DoRoadTransport</bpmn:flowNodeRef>
      </bpmn:lane>
    </bpmn:laneSet>
    <bpmn:task id="GetRoadRequirements"/>
    <bpmn:task id="GetRoadInsurance"/>
    <bpmn:task id="GetRoadTransporter"/>
    <bpmn:task id="DoRoadTransport"/>
    <bpmn:sequenceFlow id="rf1" sourceRef="GetRoadRequirements" targetRef="GetRoadInsurance"/>
    <bpmn:sequenceFlow id="rf2" sourceRef="GetRoadInsurance" targetRef="GetRoadTransporter"/>
    <bpmn:sequenceFlow id="rf3" sourceRef="GetRoadTransporter" targetRef="DoRoadTransport"/>
  </bpmn:process>
</bpmn:definitions>
""",
        {
            "GetRoadRequirements": {"actor": "Seller", "reads": ["product"],
                                    "writes": [["roadRequirements", '"oversize-permit"']], "handler": None},
            "GetRoadInsurance": {"actor": "Insurer", "reads": ["roadRequirements", "price"],
                                 "writes": [["roadInsuranceDoc", '"INS-ROAD-3"']], "handler": None},
            "GetRoadTransporter": {"actor": "Transporter", "reads": ["roadRequirements"],
                                   "writes": [["roadTransporterContract", '"TR-ROAD-9"']], "handler": None},
            "DoRoadTransport": {"actor": "Transporter",
                                "reads": ["roadInsuranceDoc", "roadTransporterContract"],
                                "writes": [["deliveryStatus", '"delivered-by-road"']], "handler": None},
        },
    )
    print(f"parent patch verdict: {validate_patch(engine2, parent_ticket, parent_patch).verdict}")
    apply_patch(engine2, parent_ticket, parent_patch)
    print(f"resumed: {resume(engine2)}")
    show_ledger(engine2)


if __name__ == "__main__":
    main()
