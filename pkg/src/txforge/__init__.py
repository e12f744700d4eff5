"""txforge: BPMN process models compiled into versioned networks of
discrete-event state machines with nested trade-transaction semantics,
a deterministic simulated ledger, and interactive repair of failed
(sub)transactions by fragment replacement."""

__version__ = "0.1.0"

from .bpmn import FragmentDoc, ProcessModel, parse_bpmn, serialize, slice_fragment, splice_fragment
from .compiler import DeploymentBundle, Router, compile_bundle, route
from .ledger import Ledger
from .regions import (
    FlowGraph,
    Region,
    TransactionPlan,
    build_flow_graph,
    dataflow_in,
    enumerate_sese,
    external_reads,
    guaranteed_writes,
    required_out,
    validate_selection,
)
from .repair import FragmentPatch, RepairTicket, Verdict, apply_patch, escalate, make_ticket, resume, validate_patch
from .runtime import Engine
from .scenario import bind, eval_expr, parse_expr, parse_scenario

__all__ = [
    "DeploymentBundle",
    "Engine",
    "FlowGraph",
    "FragmentDoc",
    "FragmentPatch",
    "Ledger",
    "ProcessModel",
    "Region",
    "RepairTicket",
    "Router",
    "TransactionPlan",
    "Verdict",
    "apply_patch",
    "bind",
    "build_flow_graph",
    "compile_bundle",
    "dataflow_in",
    "enumerate_sese",
    "escalate",
    "eval_expr",
    "external_reads",
    "guaranteed_writes",
    "make_ticket",
    "parse_bpmn",
    "parse_expr",
    "parse_scenario",
    "required_out",
    "resume",
    "route",
    "serialize",
    "slice_fragment",
    "splice_fragment",
    "validate_patch",
    "validate_selection",
]
