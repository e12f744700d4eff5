"""txforge command line: compile, inspect, select, run, fault, repair, serve.

Exit codes: 0 success, 1 domain error (structured JSON on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bpmn import parse_bpmn
from .canon import canonical_json
from .compiler import (
    DeploymentBundle,
    bundle_from_json,
    bundle_to_json,
    compile_bundle,
    rebind,
)
from .errors import FileNotFound, NothingToStep, StaleTicket, TxForgeError, UnknownTask
from .regions import enumerate_sese, region_report, validate_selection
from .repair import (
    ACCEPTED,
    ESCALATED,
    FragmentPatch,
    RepairTicket,
    apply_patch,
    escalate,
    make_ticket,
    resume,
    validate_patch,
)
from .runtime import Engine
from .scenario import PREPARE_NO, FaultSpec, bind, parse_scenario


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise FileNotFound(path)
    return p.read_text(encoding="utf-8")


def _load_bundle(path: str) -> DeploymentBundle:
    return bundle_from_json(_read_text(path))


def _load_engine(path: str) -> Engine:
    return Engine.restore(json.loads(_read_text(path)))


def _save_engine(engine: Engine, path: str) -> None:
    doc = engine.checkpoint()
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def session_report(engine: Engine) -> dict:
    return {
        "mode": engine.mode,
        "modelHash": engine.bundle.model_hash,
        "scenarioHash": engine.bundle.scenario_hash,
        "ledger": {
            "height": len(engine.ledger.blocks),
            "blocks": [
                {"height": b.height, "txId": b.tx_id, "hash": b.content_hash}
                for b in engine.ledger.blocks
            ],
            "dumpHash": engine.ledger.dump_hash(),
        },
        "router": {
            name: {"active": entry["active"], "history": list(entry["history"])}
            for name, entry in engine.bundle.router.entries.items()
        },
        "metrics": engine.metrics(),
        "journalEntries": len(engine.journal),
        "failure": engine.pending_failure,
        "ticketId": (engine.current_ticket or {}).get("ticketId"),
        "state": dict(sorted(engine.ledger.state.items())),
    }


def cmd_compile(args) -> int:
    model = parse_bpmn(_read_text(args.model))
    spec = parse_scenario(_read_text(args.scenario))
    bound = bind(model, spec)
    plan = validate_selection(enumerate_sese(bound.graph), [])
    bundle = compile_bundle(bound, plan)
    Path(args.out).write_text(bundle_to_json(bundle), encoding="utf-8")
    _print({
        "modelHash": bundle.model_hash,
        "scenarioHash": bundle.scenario_hash,
        "units": sorted(bundle.units),
        "out": args.out,
    })
    return 0


def cmd_regions(args) -> int:
    bundle = _load_bundle(args.bundle)
    bound = rebind(bundle)
    report = region_report(bound.graph, bound.behaviors)
    if args.format == "table":
        header = f"{'id':<6} {'size':>4}  {'entry':<22} {'exit':<22} members"
        print(header)
        print("-" * len(header))
        for row in report:
            print(
                f"{row['regionId']:<6} {row['size']:>4}  {row['entry']:<22} "
                f"{row['exit']:<22} {','.join(row['members'])}"
            )
    else:
        _print(report)
    return 0


def _parse_picks(text: str, n_regions: int) -> list[tuple[int, str]]:
    picks = []
    for pair in text.split(","):
        pair = pair.strip()
        if not pair:
            continue
        if "=" not in pair:
            raise TxForgeError(f"--tx entries must look like name=R<k>: {pair!r}")
        name, region_id = pair.split("=", 1)
        if not region_id.startswith("R") or not region_id[1:].isdigit():
            raise TxForgeError(f"bad region id {region_id!r}")
        index = int(region_id[1:]) - 1
        if index < 0 or index >= n_regions:
            raise TxForgeError(f"region {region_id} out of range (1..{n_regions})")
        picks.append((index, name.strip()))
    return picks


def cmd_select(args) -> int:
    bundle = _load_bundle(args.bundle)
    bound = rebind(bundle)
    regions = enumerate_sese(bound.graph)
    picks = _parse_picks(args.tx, len(regions))
    plan = validate_selection(regions, picks)
    new_bundle = compile_bundle(bound, plan)
    Path(args.out).write_text(bundle_to_json(new_bundle), encoding="utf-8")
    _print({
        "selected": [{"name": name, "members": sorted(r.members)} for r, name in plan.selections],
        "units": sorted(new_bundle.units),
        "out": args.out,
    })
    return 0


def cmd_run(args) -> int:
    bundle = _load_bundle(args.bundle)
    engine = Engine.start_session(bundle)
    engine.run(max_steps=args.max_steps)
    if args.checkpoint:
        _save_engine(engine, args.checkpoint)
    _print(session_report(engine))
    return 0


def cmd_step(args) -> int:
    engine = _load_engine(args.checkpoint)
    if engine.mode != "running":
        raise NothingToStep(f"engine mode is {engine.mode}")
    fired = []
    for _ in range(args.n):
        if engine.mode != "running" or not engine.queue:
            break
        report = engine.step()
        fired.append(report.fired)
    _save_engine(engine, args.checkpoint)
    _print({"stepped": len(fired), "fired": fired, "mode": engine.mode})
    return 0


def cmd_fault(args) -> int:
    engine = _load_engine(args.checkpoint)
    bound = rebind(engine.bundle)
    task_ids = {el.id for el in bound.model.elements if el.kind == "Task"}
    if args.task not in task_ids:
        raise UnknownTask(args.task)
    if args.kind == PREPARE_NO:
        actors = {lane.actor for lane in bound.model.lanes.values()}
        if not args.participant or args.participant not in actors:
            raise TxForgeError(
                f"prepare-no fault needs --participant naming a declared actor, "
                f"got {args.participant!r}"
            )
    fault = FaultSpec(
        task=args.task,
        attempt=args.attempt,
        kind=args.kind,
        message=args.message,
        participant=args.participant if args.kind == PREPARE_NO else None,
    )
    engine.inject_fault(fault)
    _save_engine(engine, args.checkpoint)
    _print({"registered": {
        "task": fault.task, "attempt": fault.attempt, "kind": fault.kind,
        "message": fault.message, "participant": fault.participant,
    }})
    return 0


def cmd_ticket(args) -> int:
    engine = _load_engine(args.checkpoint)
    ticket = make_ticket(engine)
    Path(args.fragment_out).write_text(ticket.fragment.xml, encoding="utf-8")
    Path(args.sidecar_out).write_text(
        json.dumps(ticket.sidecar_doc(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _save_engine(engine, args.checkpoint)
    _print({
        "ticketId": ticket.ticket_id,
        "logicalName": ticket.logical_name,
        "cause": ticket.cause,
        "in": sorted(ticket.in_set),
        "requiredOut": sorted(ticket.required_out),
        "fragment": args.fragment_out,
        "sidecar": args.sidecar_out,
    })
    return 0


def cmd_repair(args) -> int:
    engine = _load_engine(args.checkpoint)
    fragment_xml = _read_text(args.fragment)
    sidecar = json.loads(_read_text(args.sidecar))
    patch = FragmentPatch.from_docs(fragment_xml, sidecar)
    if engine.current_ticket is None:
        make_ticket(engine)
    ticket = RepairTicket.from_doc(engine.current_ticket)
    if sidecar.get("ticketId") not in (None, ticket.ticket_id):
        raise StaleTicket(
            f"patch targets ticket {sidecar.get('ticketId')}, current is {ticket.ticket_id}"
        )
    verdict = validate_patch(engine, ticket, patch)
    out = verdict.to_doc()
    out.pop("newTicket", None)
    if verdict.verdict == ACCEPTED:
        out.update(apply_patch(engine, ticket, patch))
    elif verdict.verdict == ESCALATED:
        new_ticket = escalate(engine, ticket)
        out["newTicketId"] = new_ticket.ticket_id
    _save_engine(engine, args.checkpoint)
    _print(out)
    return 0


def cmd_resume(args) -> int:
    engine = _load_engine(args.checkpoint)
    resume(engine)
    _save_engine(engine, args.checkpoint)
    _print(session_report(engine))
    return 0


def cmd_report(args) -> int:
    engine = _load_engine(args.checkpoint)
    _print(session_report(engine))
    return 0


def cmd_serve(args) -> int:
    from .server import serve_forever

    engine = _load_engine(args.checkpoint)
    serve_forever(engine, args.port, checkpoint_path=args.checkpoint)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="txforge",
        description="BPMN process models as versioned state-machine contract "
                    "units over a simulated ledger, with interactive repair.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile model + scenario into a bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("regions", help="print the SESE region report")
    p.add_argument("--bundle", required=True)
    p.add_argument("--format", choices=["json", "table"], default="json")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("select", help="select regions as transactions")
    p.add_argument("--bundle", required=True)
    p.add_argument("--tx", required=True, help="name=RegionId[,name=RegionId...]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("run", help="start a session from a bundle and run it")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("step", help="advance a checkpointed session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=1)
    p.set_defaults(func=cmd_step)

    p = sub.add_parser("fault", help="register a fault for a task attempt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--attempt", type=int, required=True)
    p.add_argument("--kind", choices=["exception", "prepare-no"], default="exception")
    p.add_argument("--participant")
    p.add_argument("--message", required=True)
    p.set_defaults(func=cmd_fault)

    p = sub.add_parser("ticket", help="export the repair ticket for a failure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fragment-out", required=True)
    p.add_argument("--sidecar-out", required=True)
    p.set_defaults(func=cmd_ticket)

    p = sub.add_parser("repair", help="submit an amended fragment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fragment", required=True)
    p.add_argument("--sidecar", required=True)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("resume", help="resume after an accepted repair")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="print the session report")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="serve the HTTP/SSE gateway for a session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, required=True)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TxForgeError as exc:
        sys.stderr.write(canonical_json(exc.as_dict()) + "\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(canonical_json({"error": "FileNotFound", "detail": str(exc)}) + "\n")
        return 1
    except json.JSONDecodeError as exc:
        sys.stderr.write(canonical_json({"error": "ParseError", "detail": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
