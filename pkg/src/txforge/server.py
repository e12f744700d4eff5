"""HTTP/SSE gateway over a single engine session.

Every mutating endpoint funnels through one lock, giving the serialized
command stream the engine requires; reads serve snapshots under the same
lock.  /api/events streams journal entries as server-sent events the moment
they are appended.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .canon import canonical_json
from .cli import session_report
from .compiler import compile_bundle, rebind
from .errors import (
    FileNotFound,
    HashMismatch,
    NoParent,
    NoPatchApplied,
    NotAwaitingRepair,
    NothingToStep,
    ProtocolError,
    StaleTicket,
    TxForgeError,
    UnknownName,
    UnknownTask,
)
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
from .runtime import AWAITING_REPAIR, RUNNING, Engine
from .scenario import PREPARE_NO, FaultSpec

_CONFLICT_ERRORS = (
    NothingToStep, NotAwaitingRepair, NoPatchApplied, StaleTicket,
    ProtocolError, HashMismatch, NoParent,
)
_NOT_FOUND_ERRORS = (UnknownName, UnknownTask, FileNotFound)


class GatewayService:
    """Engine plus the serialized command stream and the journal fan-out."""

    def __init__(self, engine: Engine, checkpoint_path: str | None = None):
        self.lock = threading.RLock()
        self.engine = engine
        self.checkpoint_path = checkpoint_path
        self.subscribers: list[tuple[threading.Condition, list[dict]]] = []
        self._wire_engine()

    def _wire_engine(self) -> None:
        self.engine._on_journal = self._publish

    def _publish(self, entry: dict) -> None:
        for cond, queue in list(self.subscribers):
            with cond:
                queue.append(entry)
                cond.notify_all()

    def subscribe(self) -> tuple[threading.Condition, list[dict]]:
        sub = (threading.Condition(), [])
        self.subscribers.append(sub)
        return sub

    def unsubscribe(self, sub) -> None:
        if sub in self.subscribers:
            self.subscribers.remove(sub)

    def _persist(self) -> None:
        if self.checkpoint_path:
            doc = self.engine.checkpoint()
            Path(self.checkpoint_path).write_text(
                json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )

    # --- queries ---------------------------------------------------------

    def get_session(self) -> dict:
        with self.lock:
            e = self.engine
            return {
                "modelHash": e.bundle.model_hash,
                "scenarioHash": e.bundle.scenario_hash,
                "mode": e.mode,
                "steps": e.step_count,
                "journalEntries": len(e.journal),
            }

    def get_model(self) -> dict:
        with self.lock:
            bound = rebind(self.engine.bundle)
            lane_of = {
                member: lane.actor
                for lane in bound.model.lanes.values()
                for member in lane.members
            }
            return {
                "id": bound.model.id,
                "elements": [
                    {"id": el.id, "kind": el.kind, "name": el.name,
                     "lane": lane_of.get(el.id)}
                    for el in bound.model.elements
                ],
                "flows": [
                    {"id": f.id, "source": f.source, "target": f.target,
                     "guard": f.guard, "default": f.is_default}
                    for f in bound.model.flows
                ],
                "lanes": {
                    lane.id: {"actor": lane.actor, "members": list(lane.members)}
                    for lane in bound.model.lanes.values()
                },
            }

    def get_regions(self) -> list:
        with self.lock:
            bound = rebind(self.engine.bundle)
            return region_report(bound.graph, bound.behaviors)

    def get_state(self) -> dict:
        with self.lock:
            e = self.engine
            nodes: dict[str, str] = {}
            for act_id in e.act_order:
                act = e.activations[act_id]
                for node, state in act.node_states.items():
                    if state != "Idle" or node not in nodes:
                        nodes[node] = state
            return {
                "mode": e.mode,
                "nodes": nodes,
                "txs": [
                    {
                        "txId": ctx.tx_id,
                        "logicalName": ctx.logical_name,
                        "version": ctx.version,
                        "status": ctx.status,
                        "parent": ctx.parent,
                        "participants": list(ctx.participants),
                    }
                    for ctx in (e.tx_tree[t] for t in e.tx_order)
                ],
                "router": {
                    name: dict(entry) for name, entry in e.bundle.router.entries.items()
                },
                "selections": [
                    {"name": name, "members": sorted(r.members)}
                    for r, name in e.bundle.plan.selections
                ],
                "failure": e.pending_failure,
                "ticketId": (e.current_ticket or {}).get("ticketId"),
                "ledgerHeight": len(e.ledger.blocks),
            }

    def get_journal(self, start: int = 0) -> list:
        with self.lock:
            return [e for e in self.engine.journal if e["seq"] > start]

    def get_report(self) -> dict:
        with self.lock:
            return session_report(self.engine)

    def get_ticket(self) -> dict:
        with self.lock:
            ticket = make_ticket(self.engine)
            self._persist()
            doc = ticket.to_doc()
            doc["sidecar"] = ticket.sidecar_doc()
            return doc

    # --- commands ----------------------------------------------------------

    def post_select(self, body: dict) -> dict:
        with self.lock:
            e = self.engine
            if e.step_count > 0 or e.journal:
                raise ProtocolError("selection is only allowed before execution starts")
            bound = rebind(e.bundle)
            regions = enumerate_sese(bound.graph)
            picks = []
            for item in body.get("picks", []):
                region_id = item["region"]
                index = int(region_id[1:]) - 1
                picks.append((index, item["name"]))
            plan = validate_selection(regions, picks)
            bundle = compile_bundle(bound, plan)
            self.engine = Engine.start_session(bundle)
            self._wire_engine()
            self._persist()
            return {"selected": [name for _, name in plan.selections]}

    def post_run(self, body: dict) -> dict:
        with self.lock:
            if self.engine.mode != RUNNING:
                raise ProtocolError(f"cannot run: mode is {self.engine.mode}")
            self.engine.run(max_steps=body.get("maxSteps"))
            self._persist()
            return session_report(self.engine)

    def post_step(self, body: dict) -> dict:
        with self.lock:
            n = int(body.get("n", 1))
            fired = []
            for _ in range(n):
                if self.engine.mode != RUNNING or not self.engine.queue:
                    break
                fired.append(self.engine.step().fired)
            if not fired:
                raise NothingToStep(f"mode is {self.engine.mode}")
            self._persist()
            return {"stepped": len(fired), "fired": fired, "mode": self.engine.mode}

    def post_fault(self, body: dict) -> dict:
        with self.lock:
            e = self.engine
            if e.mode not in (RUNNING,):
                raise ProtocolError(f"cannot inject fault: mode is {e.mode}")
            bound = rebind(e.bundle)
            task_ids = {el.id for el in bound.model.elements if el.kind == "Task"}
            if body.get("task") not in task_ids:
                raise UnknownTask(str(body.get("task")))
            kind = body.get("kind", "exception")
            participant = body.get("participant")
            if kind == PREPARE_NO:
                actors = {lane.actor for lane in bound.model.lanes.values()}
                if participant not in actors:
                    raise UnknownTask(f"unknown participant {participant!r}")
            fault = FaultSpec(
                task=body["task"],
                attempt=int(body.get("attempt", 1)),
                kind=kind,
                message=str(body.get("message", "")),
                participant=participant if kind == PREPARE_NO else None,
            )
            e.inject_fault(fault)
            self._persist()
            return {"registered": body}

    def post_patch(self, body: dict) -> dict:
        with self.lock:
            e = self.engine
            if e.mode != AWAITING_REPAIR:
                raise NotAwaitingRepair(f"mode is {e.mode}")
            if e.current_ticket is None:
                make_ticket(e)
            ticket = RepairTicket.from_doc(e.current_ticket)
            claimed = body.get("ticketId")
            if claimed not in (None, ticket.ticket_id):
                raise StaleTicket(f"patch targets {claimed}, current is {ticket.ticket_id}")
            patch = FragmentPatch.from_docs(
                body.get("fragmentXml", ""),
                {
                    "ticketId": ticket.ticket_id,
                    "scenarioPatch": body.get("scenarioPatch") or {},
                    "reuseCompleted": body.get("reuseCompleted") or [],
                },
            )
            verdict = validate_patch(e, ticket, patch)
            out = verdict.to_doc()
            out.pop("newTicket", None)
            if verdict.verdict == ACCEPTED:
                out.update(apply_patch(e, ticket, patch))
            elif verdict.verdict == ESCALATED:
                new_ticket = escalate(e, ticket)
                out["newTicketId"] = new_ticket.ticket_id
            self._persist()
            return out

    def post_resume(self, body: dict) -> dict:
        with self.lock:
            resume(self.engine)
            self._persist()
            return session_report(self.engine)


def _route(service: GatewayService, method: str, path: str, query: dict, body: dict):
    if method == "GET":
        if path == "/api/session":
            return service.get_session()
        if path == "/api/model":
            return service.get_model()
        if path == "/api/regions":
            return service.get_regions()
        if path == "/api/state":
            return service.get_state()
        if path == "/api/journal":
            start = int(query.get("from", ["0"])[0])
            return service.get_journal(start)
        if path == "/api/report":
            return service.get_report()
        if path == "/api/repair/ticket":
            return service.get_ticket()
    if method == "POST":
        if path == "/api/select":
            return service.post_select(body)
        if path == "/api/run":
            return service.post_run(body)
        if path == "/api/step":
            return service.post_step(body)
        if path == "/api/fault":
            return service.post_fault(body)
        if path == "/api/repair/patch":
            return service.post_patch(body)
        if path == "/api/resume":
            return service.post_resume(body)
    return None


class GatewayHandler(BaseHTTPRequestHandler):
    service: GatewayService = None  # type: ignore[assignment]
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, status: int, doc) -> None:
        data = (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)

    def _handle(self, method: str) -> None:
        parsed = urlparse(self.path)
        query = parse_qs(parsed.query)
        if method == "GET" and parsed.path == "/api/events":
            self._stream_events(query)
            return
        body = {}
        if method == "POST":
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw or b"{}")
            except json.JSONDecodeError as exc:
                self._send_json(400, {"error": "ParseError", "detail": str(exc)})
                return
            if not isinstance(body, dict):
                self._send_json(400, {"error": "ParseError", "detail": "body must be a JSON object"})
                return
        try:
            result = _route(self.service, method, parsed.path, query, body)
        except _NOT_FOUND_ERRORS as exc:
            self._send_json(404, exc.as_dict())
            return
        except _CONFLICT_ERRORS as exc:
            self._send_json(409, exc.as_dict())
            return
        except TxForgeError as exc:
            self._send_json(400, exc.as_dict())
            return
        except Exception as exc:  # pragma: no cover - defensive
            self._send_json(500, {"error": "Internal", "detail": str(exc)})
            return
        if result is None:
            self._send_json(404, {"error": "UnknownPath", "detail": parsed.path})
            return
        self._send_json(200, result)

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def _stream_events(self, query: dict) -> None:
        start = int(query.get("from", ["0"])[0])
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream; charset=utf-8")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        sub = self.service.subscribe()
        cond, pending = sub
        try:
            with self.service.lock:
                backlog = [e for e in self.service.engine.journal if e["seq"] > start]
            for entry in backlog:
                self._write_event(entry)
            last_seen = backlog[-1]["seq"] if backlog else start
            while True:
                with cond:
                    if not pending:
                        cond.wait(timeout=1.0)
                    batch, pending[:] = list(pending), []
                if not batch:
                    self.wfile.write(b": ping\n\n")
                    self.wfile.flush()
                    continue
                for entry in batch:
                    if entry["seq"] > last_seen:
                        self._write_event(entry)
                        last_seen = entry["seq"]
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            self.service.unsubscribe(sub)

    def _write_event(self, entry: dict) -> None:
        payload = canonical_json(entry)
        self.wfile.write(f"id: {entry['seq']}\ndata: {payload}\n\n".encode("utf-8"))
        self.wfile.flush()


def make_server(engine: Engine, port: int, checkpoint_path: str | None = None):
    service = GatewayService(engine, checkpoint_path)
    handler = type("BoundHandler", (GatewayHandler,), {"service": service})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.daemon_threads = True
    return server, service


def serve_forever(engine: Engine, port: int, checkpoint_path: str | None = None) -> None:
    server, _service = make_server(engine, port, checkpoint_path)
    host, bound_port = server.server_address
    print(f"txforge gateway listening on http://{host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
