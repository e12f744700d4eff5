from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from txforge.bpmn import BPMN_NS
from txforge.compiler import compile_bundle
from txforge.fixtures import harvester_bound, harvester_plan
from txforge.runtime import Engine


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None) if acceptance else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, outcome in sorted(results):
        terminalreporter.write_line(f"ACCEPTANCE {number} {label}: {outcome}")


@pytest.fixture
def harvester():
    bound = harvester_bound(with_flood_fault=False)
    return bound


@pytest.fixture
def harvester_flood():
    return harvester_bound(with_flood_fault=True)


@pytest.fixture
def harvester_bundle(harvester):
    return compile_bundle(harvester, harvester_plan(harvester))


@pytest.fixture
def flood_bundle(harvester_flood):
    return compile_bundle(harvester_flood, harvester_plan(harvester_flood))


@pytest.fixture
def flood_engine(flood_bundle):
    engine = Engine.start_session(flood_bundle)
    engine.run()
    assert engine.mode == "awaiting-repair"
    return engine


MINIMAL_XML = f"""<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="defs_min">
  <bpmn:process id="minimal" isExecutable="true">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="lane_ops" name="Ops">
        <bpmn:flowNodeRef>TaskA</bpmn:flowNodeRef>
      </bpmn:lane>
    </bpmn:laneSet>
    <bpmn:startEvent id="start" name="Start"/>
    <bpmn:task id="TaskA" name="Task A"/>
    <bpmn:endEvent id="end" name="End"/>
    <bpmn:sequenceFlow id="f1" sourceRef="start" targetRef="TaskA"/>
    <bpmn:sequenceFlow id="f2" sourceRef="TaskA" targetRef="end"/>
  </bpmn:process>
</bpmn:definitions>
"""


@pytest.fixture
def minimal_xml():
    return MINIMAL_XML


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

RAIL_REROUTE_PATCH = {
    "DoTransport": {
        "actor": "Transporter",
        "reads": ["insuranceDoc", "transporterContract"],
        "writes": [["deliveryStatus", '"delivered"'], ["routeUsed", '"alt-rail"']],
        "handler": None,
    }
}

ROAD_INNER_FRAGMENT = f"""<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="defs_road_inner">
  <bpmn:process id="road_inner" isExecutable="false">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="lane_Transporter" name="Transporter">
        <bpmn:flowNodeRef>DoRoadTransport</bpmn:flowNodeRef>
      </bpmn:lane>
    </bpmn:laneSet>
    <bpmn:task id="DoRoadTransport" name="DoRoadTransport"/>
  </bpmn:process>
</bpmn:definitions>
"""

ROAD_INNER_PATCH = {
    "DoRoadTransport": {
        "actor": "Transporter",
        "reads": ["roadInsuranceDoc", "roadTransporterContract"],
        "writes": [["deliveryStatus", '"delivered-by-road"']],
        "handler": None,
    }
}

ROAD_PARENT_FRAGMENT = f"""<?xml version="1.0" encoding="UTF-8"?>
<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="defs_road_parent">
  <bpmn:process id="road_parent" isExecutable="false">
    <bpmn:laneSet id="ls">
      <bpmn:lane id="lane_Seller" name="Seller">
        <bpmn:flowNodeRef>GetRoadRequirements</bpmn:flowNodeRef>
      </bpmn:lane>
      <bpmn:lane id="lane_Insurer" name="Insurer">
        <bpmn:flowNodeRef>GetRoadInsurance</bpmn:flowNodeRef>
      </bpmn:lane>
      <bpmn:lane id="lane_Transporter" name="Transporter">
        <bpmn:flowNodeRef>GetRoadTransporter</bpmn:flowNodeRef>
        <bpmn:flowNodeRef>DoRoadTransport</bpmn:flowNodeRef>
      </bpmn:lane>
    </bpmn:laneSet>
    <bpmn:task id="GetRoadRequirements" name="GetRoadRequirements"/>
    <bpmn:task id="GetRoadInsurance" name="GetRoadInsurance"/>
    <bpmn:task id="GetRoadTransporter" name="GetRoadTransporter"/>
    <bpmn:task id="DoRoadTransport" name="DoRoadTransport"/>
    <bpmn:sequenceFlow id="rf1" sourceRef="GetRoadRequirements" targetRef="GetRoadInsurance"/>
    <bpmn:sequenceFlow id="rf2" sourceRef="GetRoadInsurance" targetRef="GetRoadTransporter"/>
    <bpmn:sequenceFlow id="rf3" sourceRef="GetRoadTransporter" targetRef="DoRoadTransport"/>
  </bpmn:process>
</bpmn:definitions>
"""

ROAD_PARENT_PATCH = {
    "GetRoadRequirements": {
        "actor": "Seller", "reads": ["product"],
        "writes": [["roadRequirements", '"oversize-permit"']], "handler": None,
    },
    "GetRoadInsurance": {
        "actor": "Insurer", "reads": ["roadRequirements", "price"],
        "writes": [["roadInsuranceDoc", '"INS-ROAD-3"']], "handler": None,
    },
    "GetRoadTransporter": {
        "actor": "Transporter", "reads": ["roadRequirements"],
        "writes": [["roadTransporterContract", '"TR-ROAD-9"']], "handler": None,
    },
    "DoRoadTransport": {
        "actor": "Transporter", "reads": ["roadInsuranceDoc", "roadTransporterContract"],
        "writes": [["deliveryStatus", '"delivered-by-road"']], "handler": None,
    },
}
