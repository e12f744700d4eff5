"""Exception hierarchy shared by every txforge module.

Each error carries a stable machine-readable ``code`` (used by the CLI and
HTTP gateway when reporting domain errors) plus a human-readable detail.
"""

from __future__ import annotations


class TxForgeError(Exception):
    code = "Error"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail

    def as_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail}


# --- bpmn-model ---------------------------------------------------------

class MalformedXml(TxForgeError):
    code = "MalformedXml"


class UnsupportedElement(TxForgeError):
    code = "UnsupportedElement"

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(detail or kind)
        self.kind = kind


class StructureError(TxForgeError):
    code = "StructureError"


class RegionNotInModel(TxForgeError):
    code = "RegionNotInModel"


class IdCollision(TxForgeError):
    code = "IdCollision"


class NotSese(TxForgeError):
    code = "NotSese"


# --- region-analysis ----------------------------------------------------

class CycleDetected(TxForgeError):
    code = "CycleDetected"

    def __init__(self, cycle: list[str]):
        super().__init__(" -> ".join(cycle))
        self.cycle = list(cycle)


class NotLaminar(TxForgeError):
    code = "NotLaminar"

    def __init__(self, name_a: str, name_b: str):
        super().__init__(f"{name_a} overlaps {name_b}")
        self.pair = (name_a, name_b)


class DuplicateName(TxForgeError):
    code = "DuplicateName"


class UndeclaredBehavior(TxForgeError):
    code = "UndeclaredBehavior"

    def __init__(self, task_id: str):
        super().__init__(task_id)
        self.task_id = task_id


# --- scenario-dsl -------------------------------------------------------

class ParseError(TxForgeError):
    code = "ParseError"

    def __init__(self, detail: str, location: object = None):
        super().__init__(detail if location is None else f"{detail} (at {location})")
        self.location = location


class UnknownField(TxForgeError):
    code = "UnknownField"


class UndefinedVariable(TxForgeError):
    code = "UndefinedVariable"

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class TypeMismatch(TxForgeError):
    code = "TypeMismatch"


class DivisionByZero(TxForgeError):
    code = "DivisionByZero"


class Overflow(TxForgeError):
    code = "Overflow"


class MissingBehavior(TxForgeError):
    code = "MissingBehavior"

    def __init__(self, task_id: str):
        super().__init__(task_id)
        self.task_id = task_id


class UnknownTask(TxForgeError):
    code = "UnknownTask"


class ActorMismatch(TxForgeError):
    code = "ActorMismatch"


class UnresolvableRead(TxForgeError):
    code = "UnresolvableRead"

    def __init__(self, variable: str, task_id: str):
        super().__init__(f"{variable} at {task_id}")
        self.variable = variable
        self.task_id = task_id


# --- contract-compiler --------------------------------------------------

class PlanGraphMismatch(TxForgeError):
    code = "PlanGraphMismatch"


class VersionConflict(TxForgeError):
    code = "VersionConflict"


class UnknownName(TxForgeError):
    code = "UnknownName"


# --- tx-runtime ---------------------------------------------------------

class HashMismatch(TxForgeError):
    code = "HashMismatch"


class NothingToStep(TxForgeError):
    code = "NothingToStep"


class ProtocolError(TxForgeError):
    code = "ProtocolError"


class ScopeViolation(TxForgeError):
    code = "ScopeViolation"


class ReentrancyViolation(TxForgeError):
    code = "ReentrancyViolation"


class VersionMismatch(TxForgeError):
    code = "VersionMismatch"


class CorruptCheckpoint(TxForgeError):
    code = "CorruptCheckpoint"


# --- repair-orchestrator ------------------------------------------------

class NotAwaitingRepair(TxForgeError):
    code = "NotAwaitingRepair"


class StaleTicket(TxForgeError):
    code = "StaleTicket"


class NoParent(TxForgeError):
    code = "NoParent"


class NoPatchApplied(TxForgeError):
    code = "NoPatchApplied"


# --- gateway ------------------------------------------------------------

class FileNotFound(TxForgeError):
    code = "FileNotFound"
