"""Deterministic in-process ledger: hash-chained blocks of committed writes.

State is always the fold of block writes in order; recovery notices are
events only and never touch state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .canon import canonical_json, sha256_hex

GENESIS_HASH = "0" * 64

COMMITTED = "Committed"
RECOVERY_NOTICE = "RecoveryNotice"
CUSTOM = "Custom"


class Absent:
    """Marker for a variable never written to the ledger."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Absent"


ABSENT = Absent()


@dataclass(frozen=True)
class LedgerEvent:
    kind: str
    tx_id: str
    participant: str | None = None
    payload: str = ""

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "txId": self.tx_id,
            "participant": self.participant,
            "payload": self.payload,
        }

    @staticmethod
    def from_doc(doc) -> "LedgerEvent":
        return LedgerEvent(doc["kind"], doc["txId"], doc["participant"], doc["payload"])


@dataclass(frozen=True)
class BlockRef:
    height: int
    content_hash: str


@dataclass(frozen=True)
class Block:
    height: int
    tx_id: str
    writes: tuple[tuple[str, object], ...]
    events: tuple[LedgerEvent, ...]
    prev_hash: str
    content_hash: str

    def to_doc(self) -> dict:
        return {
            "height": self.height,
            "txId": self.tx_id,
            "writes": [[var, value] for var, value in self.writes],
            "events": [e.to_doc() for e in self.events],
            "prevHash": self.prev_hash,
            "contentHash": self.content_hash,
        }

    @staticmethod
    def from_doc(doc) -> "Block":
        return Block(
            height=doc["height"],
            tx_id=doc["txId"],
            writes=tuple((var, value) for var, value in doc["writes"]),
            events=tuple(LedgerEvent.from_doc(e) for e in doc["events"]),
            prev_hash=doc["prevHash"],
            content_hash=doc["contentHash"],
        )


def block_content_hash(height: int, tx_id: str, writes, events, prev_hash: str) -> str:
    return sha256_hex(canonical_json({
        "height": height,
        "txId": tx_id,
        "writes": [[var, value] for var, value in writes],
        "events": [e.to_doc() for e in events],
        "prevHash": prev_hash,
    }))


@dataclass
class Ledger:
    blocks: list[Block] = field(default_factory=list)
    state: dict[str, object] = field(default_factory=dict)
    event_log: list[LedgerEvent] = field(default_factory=list)

    def apply_block(self, tx_id: str, writes, events) -> BlockRef:
        """Append one block; state advances by exactly these writes, in order."""
        height = len(self.blocks) + 1
        prev = self.blocks[-1].content_hash if self.blocks else GENESIS_HASH
        writes = tuple((var, value) for var, value in writes)
        events = tuple(events)
        content_hash = block_content_hash(height, tx_id, writes, events, prev)
        block = Block(height, tx_id, writes, events, prev, content_hash)
        self.blocks.append(block)
        for var, value in writes:
            self.state[var] = value
        self.event_log.extend(events)
        return BlockRef(height, content_hash)

    def read(self, variable: str):
        return self.state.get(variable, ABSENT)

    def emit_notice(self, tx_id: str, participant: str, payload: str) -> None:
        """Recovery notices are events, not blocks: state stays untouched."""
        self.event_log.append(
            LedgerEvent(RECOVERY_NOTICE, tx_id, participant, payload)
        )

    def refold_state(self) -> dict[str, object]:
        state: dict[str, object] = {}
        for block in self.blocks:
            for var, value in block.writes:
                state[var] = value
        return state

    def verify_chain(self) -> bool:
        prev = GENESIS_HASH
        for i, block in enumerate(self.blocks, start=1):
            if block.height != i or block.prev_hash != prev:
                return False
            if block.content_hash != block_content_hash(
                block.height, block.tx_id, block.writes, block.events, block.prev_hash
            ):
                return False
            prev = block.content_hash
        return True

    def dump_jsonl(self) -> str:
        """One canonical block per line; acceptance tests hash this text."""
        return "".join(canonical_json(b.to_doc()) + "\n" for b in self.blocks)

    def dump_hash(self) -> str:
        return sha256_hex(self.dump_jsonl())

    def to_doc(self) -> list:
        return [b.to_doc() for b in self.blocks]

    @staticmethod
    def from_doc(doc, event_log_doc=None) -> "Ledger":
        ledger = Ledger()
        for bdoc in doc:
            block = Block.from_doc(bdoc)
            ledger.blocks.append(block)
            for var, value in block.writes:
                ledger.state[var] = value
            ledger.event_log.extend(block.events)
        if event_log_doc is not None:
            ledger.event_log = [LedgerEvent.from_doc(e) for e in event_log_doc]
        return ledger
