"""BPMN 2.0 subset: parse, validate, serialize, and fragment slice/splice.

Supported flow elements: startEvent, endEvent, task/serviceTask/userTask,
exclusiveGateway, parallelGateway, sequenceFlow, laneSet/lane. Diagram
interchange and documentation are skipped on read and omitted on write.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

from .errors import (
    IdCollision,
    MalformedXml,
    NotSese,
    RegionNotInModel,
    StructureError,
    UnsupportedElement,
)

if TYPE_CHECKING:  # pragma: no cover
    from .regions import Region

BPMN_NS = "http://www.omg.org/spec/BPMN/20100524/MODEL"

START = "StartEvent"
END = "EndEvent"
TASK = "Task"
XOR = "ExclusiveGateway"
AND = "ParallelGateway"
EVENT_KINDS = frozenset({START, END})
GATEWAY_KINDS = frozenset({XOR, AND})

_TAG_TO_KIND = {
    "startEvent": START,
    "endEvent": END,
    "task": TASK,
    "serviceTask": TASK,
    "userTask": TASK,
    "exclusiveGateway": XOR,
    "parallelGateway": AND,
}

# Flow-node tags we recognise but do not support.  Anything listed here is a
# hard error; harmless non-flow content is skipped instead.
_UNSUPPORTED_TAGS = frozenset({
    "subProcess", "adHocSubProcess", "transaction", "callActivity",
    "scriptTask", "sendTask", "receiveTask", "manualTask", "businessRuleTask",
    "intermediateCatchEvent", "intermediateThrowEvent", "boundaryEvent",
    "eventBasedGateway", "inclusiveGateway", "complexGateway",
})

_SKIP_TAGS = frozenset({
    "documentation", "extensionElements", "ioSpecification", "property",
    "dataObject", "dataObjectReference", "dataStoreReference",
    "dataInputAssociation", "dataOutputAssociation",
    "textAnnotation", "association", "incoming", "outgoing",
    "monitoring", "auditing", "category", "categoryValue",
})

# Reserved ids used when a fragment is completed with synthetic events.
FRAG_START = "__frag_start__"
FRAG_END = "__frag_end__"
FRAG_IN_FLOW = "__frag_in__"
FRAG_OUT_FLOW = "__frag_out__"


@dataclass(frozen=True)
class Element:
    id: str
    kind: str
    name: str = ""


@dataclass(frozen=True)
class SequenceFlow:
    id: str
    source: str
    target: str
    guard: str | None = None
    is_default: bool = False


@dataclass(frozen=True)
class Lane:
    id: str
    actor: str
    members: tuple[str, ...]


@dataclass
class ProcessModel:
    id: str
    elements: list[Element]
    flows: list[SequenceFlow]
    lanes: dict[str, Lane]
    initial_vars: frozenset[str] = frozenset()
    result_vars: frozenset[str] = frozenset()

    def element(self, element_id: str) -> Element:
        for el in self.elements:
            if el.id == element_id:
                return el
        raise KeyError(element_id)

    @property
    def kinds(self) -> dict[str, str]:
        return {el.id: el.kind for el in self.elements}

    def tasks(self) -> list[Element]:
        return [el for el in self.elements if el.kind == TASK]

    def lane_of(self, element_id: str) -> Lane | None:
        for lane in self.lanes.values():
            if element_id in lane.members:
                return lane
        return None

    def outgoing(self, element_id: str) -> list[SequenceFlow]:
        return [f for f in self.flows if f.source == element_id]

    def incoming(self, element_id: str) -> list[SequenceFlow]:
        return [f for f in self.flows if f.target == element_id]


@dataclass
class FragmentDoc:
    """A region's elements and internal flows, exportable as standalone XML.

    ``xml`` holds only the member elements, their internal flows, and the
    lanes of member tasks; it validates once synthetic start/end events are
    attached at entry/exit (see fragment_to_model).
    """

    xml: str
    entry_id: str
    exit_id: str
    boundary_in: tuple[str, ...]
    boundary_out: tuple[str, ...]


def _local(tag: str) -> tuple[str, str]:
    m = re.match(r"\{(.*)\}(.*)", tag)
    if m:
        return m.group(1), m.group(2)
    return "", tag


def _parse_parts(xml_text: str):
    """Parse the raw pieces of a process; full validation happens separately."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc))

    ns, local = _local(root.tag)
    if ns != BPMN_NS:
        raise MalformedXml(f"root element {root.tag!r} is not in the BPMN 2.0 namespace")
    if local == "process":
        process = root
    else:
        process = None
        for child in root:
            cns, clocal = _local(child.tag)
            if cns == BPMN_NS and clocal == "process":
                if process is not None:
                    raise StructureError("more than one process element")
                process = child
        if process is None:
            raise MalformedXml("no process element found")

    elements: list[Element] = []
    flows: list[SequenceFlow] = []
    lanes: dict[str, Lane] = {}
    defaults: dict[str, str] = {}  # gateway id -> default flow id

    def handle(node):
        cns, tag = _local(node.tag)
        if cns != BPMN_NS:
            return
        if tag in _SKIP_TAGS:
            return
        if tag in _UNSUPPORTED_TAGS:
            raise UnsupportedElement(tag)
        if tag == "laneSet":
            for lane_el in node:
                lns, ltag = _local(lane_el.tag)
                if lns != BPMN_NS or ltag != "lane":
                    continue
                lane_id = lane_el.get("id") or ""
                actor = lane_el.get("name") or lane_id
                members = tuple(
                    (ref.text or "").strip()
                    for ref in lane_el
                    if _local(ref.tag) == (BPMN_NS, "flowNodeRef")
                )
                if not lane_id:
                    raise StructureError("lane without id")
                if lane_id in lanes:
                    raise StructureError(f"duplicate lane id {lane_id}")
                lanes[lane_id] = Lane(lane_id, actor, members)
            return
        if tag == "sequenceFlow":
            fid = node.get("id") or ""
            src = node.get("sourceRef") or ""
            dst = node.get("targetRef") or ""
            guard = None
            for child in node:
                if _local(child.tag) == (BPMN_NS, "conditionExpression"):
                    guard = (child.text or "").strip()
            if not fid or not src or not dst:
                raise StructureError(f"sequenceFlow missing id/sourceRef/targetRef: {fid!r}")
            flows.append(SequenceFlow(fid, src, dst, guard=guard))
            return
        if tag in _TAG_TO_KIND:
            eid = node.get("id") or ""
            if not eid:
                raise StructureError(f"{tag} element without id")
            elements.append(Element(eid, _TAG_TO_KIND[tag], node.get("name") or ""))
            default = node.get("default")
            if default:
                defaults[eid] = default
            return
        raise UnsupportedElement(tag)

    for node in process:
        handle(node)

    if defaults:
        flows = [
            replace(f, is_default=True) if defaults.get(f.source) == f.id else f
            for f in flows
        ]
    model = ProcessModel(
        id=process.get("id") or "process",
        elements=elements,
        flows=flows,
        lanes=lanes,
    )
    return model


def validate_model(model: ProcessModel) -> None:
    """Check every ProcessModel invariant; raise StructureError on the first hit."""
    ids = [el.id for el in model.elements]
    if len(set(ids)) != len(ids):
        dup = sorted(i for i in set(ids) if ids.count(i) > 1)[0]
        raise StructureError(f"duplicate element id {dup}")
    flow_ids = [f.id for f in model.flows]
    if len(set(flow_ids)) != len(flow_ids):
        dup = sorted(i for i in set(flow_ids) if flow_ids.count(i) > 1)[0]
        raise StructureError(f"duplicate flow id {dup}")
    if set(flow_ids) & set(ids):
        shared = sorted(set(flow_ids) & set(ids))[0]
        raise StructureError(f"id {shared} used for both an element and a flow")

    id_set = set(ids)
    for f in model.flows:
        if f.source not in id_set or f.target not in id_set:
            raise StructureError(f"flow {f.id} references missing element")

    starts = [el for el in model.elements if el.kind == START]
    ends = [el for el in model.elements if el.kind == END]
    if len(starts) != 1:
        raise StructureError(f"expected exactly one start event, found {len(starts)}")
    if len(ends) != 1:
        raise StructureError(f"expected exactly one end event, found {len(ends)}")

    out_deg = {eid: 0 for eid in ids}
    in_deg = {eid: 0 for eid in ids}
    for f in model.flows:
        out_deg[f.source] += 1
        in_deg[f.target] += 1

    for el in model.elements:
        i, o = in_deg[el.id], out_deg[el.id]
        if el.kind == START and (i, o) != (0, 1):
            raise StructureError(f"start event {el.id} must have 0 in / 1 out, has {i}/{o}")
        if el.kind == END and (i, o) != (1, 0):
            raise StructureError(f"end event {el.id} must have 1 in / 0 out, has {i}/{o}")
        if el.kind == TASK and (i, o) != (1, 1):
            raise StructureError(f"task {el.id} must have 1 in / 1 out, has {i}/{o}")
        if el.kind in GATEWAY_KINDS:
            split = i == 1 and o >= 2
            merge = i >= 2 and o == 1
            if not (split or merge):
                raise StructureError(
                    f"gateway {el.id} must be a split (1 in, >=2 out) or a join (>=2 in, 1 out), has {i}/{o}"
                )

    xor_splits = {
        el.id for el in model.elements
        if el.kind == XOR and out_deg[el.id] >= 2
    }
    for f in model.flows:
        if (f.guard is not None or f.is_default) and f.source not in xor_splits:
            raise StructureError(
                f"flow {f.id} carries a guard/default but does not leave an exclusive split"
            )
    for gid in sorted(xor_splits):
        outs = model.outgoing(gid)
        n_default = sum(1 for f in outs if f.is_default)
        if n_default > 1:
            raise StructureError(f"exclusive split {gid} has more than one default flow")
        unguarded = [f for f in outs if f.guard is None and not f.is_default]
        if unguarded:
            raise StructureError(
                f"exclusive split {gid} has unguarded non-default flow {unguarded[0].id}"
            )

    for lane in model.lanes.values():
        for member in lane.members:
            if member not in id_set:
                raise StructureError(f"lane {lane.id} references missing element {member}")
    for el in model.elements:
        if el.kind != TASK:
            continue
        owners = [lane.id for lane in model.lanes.values() if el.id in lane.members]
        if len(owners) != 1:
            raise StructureError(
                f"task {el.id} must belong to exactly one lane, found {len(owners)}"
            )


def parse_bpmn(xml_text: str) -> ProcessModel:
    """Parse BPMN XML into a validated ProcessModel, preserving document order."""
    model = _parse_parts(xml_text)
    validate_model(model)
    return model


# --- serialization ------------------------------------------------------

def _xml_escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _emit_process(model: ProcessModel, lines: list[str]) -> None:
    if model.lanes:
        lines.append('    <bpmn:laneSet id="laneSet_1">')
        for lane in model.lanes.values():
            lines.append(f'      <bpmn:lane id="{_xml_escape(lane.id)}" name="{_xml_escape(lane.actor)}">')
            for member in lane.members:
                lines.append(f"        <bpmn:flowNodeRef>{_xml_escape(member)}</bpmn:flowNodeRef>")
            lines.append("      </bpmn:lane>")
        lines.append("    </bpmn:laneSet>")

    kind_to_tag = {START: "startEvent", END: "endEvent", TASK: "task",
                   XOR: "exclusiveGateway", AND: "parallelGateway"}
    defaults = {f.source: f.id for f in model.flows if f.is_default}
    for el in model.elements:
        tag = kind_to_tag[el.kind]
        attrs = f'id="{_xml_escape(el.id)}"'
        if el.name:
            attrs += f' name="{_xml_escape(el.name)}"'
        if el.id in defaults:
            attrs += f' default="{_xml_escape(defaults[el.id])}"'
        lines.append(f"    <bpmn:{tag} {attrs}/>")
    for f in model.flows:
        attrs = (
            f'id="{_xml_escape(f.id)}" sourceRef="{_xml_escape(f.source)}" '
            f'targetRef="{_xml_escape(f.target)}"'
        )
        if f.guard is None:
            lines.append(f"    <bpmn:sequenceFlow {attrs}/>")
        else:
            lines.append(f"    <bpmn:sequenceFlow {attrs}>")
            lines.append(f"      <bpmn:conditionExpression>{_xml_escape(f.guard)}</bpmn:conditionExpression>")
            lines.append("    </bpmn:sequenceFlow>")


def serialize(model: ProcessModel) -> str:
    """Emit BPMN XML that parse_bpmn maps back to a structurally equal model."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="definitions_{_xml_escape(model.id)}">',
        f'  <bpmn:process id="{_xml_escape(model.id)}" isExecutable="true">',
    ]
    _emit_process(model, lines)
    lines.append("  </bpmn:process>")
    lines.append("</bpmn:definitions>")
    return "\n".join(lines) + "\n"


def structurally_equal(a: ProcessModel, b: ProcessModel) -> bool:
    """Equality over the XML-carried structure: ids, kinds, names, flows, guards, lanes."""
    if [(e.id, e.kind, e.name) for e in a.elements] != [(e.id, e.kind, e.name) for e in b.elements]:
        return False
    if a.flows != b.flows:
        return False
    lanes_a = {l.id: (l.actor, tuple(l.members)) for l in a.lanes.values()}
    lanes_b = {l.id: (l.actor, tuple(l.members)) for l in b.lanes.values()}
    return lanes_a == lanes_b


# --- fragments ----------------------------------------------------------

def _check_region_in_model(model: ProcessModel, region) -> None:
    ids = {el.id for el in model.elements}
    members = set(region.members)
    if not members <= ids or region.entry not in members or region.exit not in members:
        raise RegionNotInModel(f"region {region.entry}->{region.exit} not part of model")
    for f in model.flows:
        if f.source not in members and f.target in members and f.target != region.entry:
            raise RegionNotInModel(f"edge {f.id} enters the region away from its entry")
        if f.source in members and f.target not in members and f.source != region.exit:
            raise RegionNotInModel(f"edge {f.id} leaves the region away from its exit")


def slice_fragment(model: ProcessModel, region) -> FragmentDoc:
    """Cut a SESE region out of the model as a standalone fragment document."""
    _check_region_in_model(model, region)
    members = set(region.members)
    elements = [el for el in model.elements if el.id in members]
    internal = [f for f in model.flows if f.source in members and f.target in members]
    boundary_in = tuple(
        f.id for f in model.flows if f.source not in members and f.target in members
    )
    boundary_out = tuple(
        f.id for f in model.flows if f.source in members and f.target not in members
    )
    lanes = {}
    for lane in model.lanes.values():
        kept = tuple(m for m in lane.members if m in members)
        if kept:
            lanes[lane.id] = Lane(lane.id, lane.actor, kept)
    frag_model = ProcessModel(
        id=f"{model.id}_fragment", elements=elements, flows=internal, lanes=lanes
    )
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<bpmn:definitions xmlns:bpmn="{BPMN_NS}" id="definitions_{_xml_escape(frag_model.id)}">',
        f'  <bpmn:process id="{_xml_escape(frag_model.id)}" isExecutable="false">',
    ]
    _emit_process(frag_model, lines)
    lines.append("  </bpmn:process>")
    lines.append("</bpmn:definitions>")
    return FragmentDoc(
        xml="\n".join(lines) + "\n",
        entry_id=region.entry,
        exit_id=region.exit,
        boundary_in=boundary_in,
        boundary_out=boundary_out,
    )


def parse_fragment(xml_text: str) -> FragmentDoc:
    """Parse fragment XML; entry/exit are derived from the unique boundary elements."""
    parts = _parse_parts(xml_text)
    if any(el.kind in EVENT_KINDS for el in parts.elements):
        raise NotSese("fragment must not contain start/end events")
    if not parts.elements:
        raise NotSese("fragment is empty")
    targets = {f.target for f in parts.flows}
    sources = {f.source for f in parts.flows}
    entries = [el.id for el in parts.elements if el.id not in targets]
    exits = [el.id for el in parts.elements if el.id not in sources]
    if len(entries) != 1:
        raise NotSese(f"fragment must have exactly one entry element, found {len(entries)}")
    if len(exits) != 1:
        raise NotSese(f"fragment must have exactly one exit element, found {len(exits)}")
    frag = FragmentDoc(
        xml=xml_text,
        entry_id=entries[0],
        exit_id=exits[0],
        boundary_in=(),
        boundary_out=(),
    )
    # Completing the fragment with synthetic events must produce a valid model.
    fragment_to_model(frag)
    return frag


def fragment_parts(frag: FragmentDoc) -> ProcessModel:
    """The fragment's raw members/flows/lanes, without synthetic events."""
    return _parse_parts(frag.xml)


def fragment_to_model(frag: FragmentDoc) -> ProcessModel:
    """Attach synthetic start/end events at entry/exit and validate fully."""
    parts = _parse_parts(frag.xml)
    reserved = {FRAG_START, FRAG_END, FRAG_IN_FLOW, FRAG_OUT_FLOW}
    used = {el.id for el in parts.elements} | {f.id for f in parts.flows}
    if used & reserved:
        raise StructureError(f"fragment uses reserved id {sorted(used & reserved)[0]}")
    elements = [Element(FRAG_START, START)] + parts.elements + [Element(FRAG_END, END)]
    flows = (
        [SequenceFlow(FRAG_IN_FLOW, FRAG_START, frag.entry_id)]
        + parts.flows
        + [SequenceFlow(FRAG_OUT_FLOW, frag.exit_id, FRAG_END)]
    )
    model = ProcessModel(
        id=parts.id, elements=elements, flows=flows, lanes=dict(parts.lanes)
    )
    validate_model(model)
    return model


def splice_fragment(model: ProcessModel, region, patch: FragmentDoc) -> ProcessModel:
    """Replace a region's members with the patch fragment, reattaching boundary flows."""
    _check_region_in_model(model, region)
    patch_parts = _parse_parts(patch.xml)
    patch_ids = {el.id for el in patch_parts.elements} | {f.id for f in patch_parts.flows}

    members = set(region.members)
    internal_flow_ids = {
        f.id for f in model.flows if f.source in members and f.target in members
    }
    outside_ids = (
        {el.id for el in model.elements if el.id not in members}
        | {f.id for f in model.flows if f.id not in internal_flow_ids}
    )
    collisions = patch_ids & outside_ids
    if collisions:
        raise IdCollision(f"patch reuses ids outside the replaced region: {sorted(collisions)}")

    # Where the old region sat in document order, the patch elements go.
    insert_at = next(
        i for i, el in enumerate(model.elements) if el.id in members
    )
    kept = [el for el in model.elements if el.id not in members]
    elements = kept[:insert_at] + list(patch_parts.elements) + kept[insert_at:]

    flows: list[SequenceFlow] = []
    for f in model.flows:
        if f.id in internal_flow_ids:
            continue
        if f.target in members:
            if f.target != region.entry:
                raise RegionNotInModel(f"edge {f.id} enters the region away from its entry")
            f = replace(f, target=patch.entry_id)
        if f.source in members:
            if f.source != region.exit:
                raise RegionNotInModel(f"edge {f.id} leaves the region away from its exit")
            f = replace(f, source=patch.exit_id)
        flows.append(f)
    # Surviving flows keep their order; patch-internal flows follow.  Order
    # only affects serialization, not semantics.
    flows = flows + list(patch_parts.flows)

    lanes: dict[str, Lane] = {}
    for lane in model.lanes.values():
        lanes[lane.id] = Lane(
            lane.id, lane.actor, tuple(m for m in lane.members if m not in members)
        )
    actor_to_lane = {lane.actor: lane.id for lane in lanes.values()}
    for patch_lane in patch_parts.lanes.values():
        target = actor_to_lane.get(patch_lane.actor)
        if target is None:
            raise StructureError(
                f"patch lane actor {patch_lane.actor!r} is not a declared lane of the model"
            )
        lane = lanes[target]
        lanes[target] = Lane(lane.id, lane.actor, lane.members + tuple(patch_lane.members))

    spliced = ProcessModel(
        id=model.id,
        elements=elements,
        flows=flows,
        lanes=lanes,
        initial_vars=model.initial_vars,
        result_vars=model.result_vars,
    )
    validate_model(spliced)
    return spliced
