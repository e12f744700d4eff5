"""Append-only ledger: blocks, state fold, hash chain, notices."""

from __future__ import annotations

from txforge.ledger import ABSENT, Ledger, LedgerEvent, block_content_hash


def test_first_block():
    ledger = Ledger()
    ref = ledger.apply_block("tx1", [("x", 1)], [])
    assert ref.height == 1
    assert ledger.state == {"x": 1}


def test_last_write_wins():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1)], [])
    ledger.apply_block("tx2", [("x", 2)], [])
    assert ledger.state == {"x": 2}
    assert len(ledger.blocks) == 2
    assert ledger.read("x") == 2


def test_read_of_never_written_is_absent():
    assert Ledger().read("ghost") is ABSENT


def test_write_order_within_block():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1), ("x", 5), ("y", 2)], [])
    assert ledger.state == {"x": 5, "y": 2}


def test_hash_chain_is_reproducible():
    def build():
        ledger = Ledger()
        ledger.apply_block("tx1", [("x", 1)], [LedgerEvent("Committed", "tx1")])
        ledger.apply_block("tx2", [("y", "two")], [])
        ledger.apply_block("tx3", [("x", 3)], [])
        return ledger

    a, b = build(), build()
    assert [blk.content_hash for blk in a.blocks] == [blk.content_hash for blk in b.blocks]
    assert a.verify_chain()
    for blk in a.blocks:
        assert blk.content_hash == block_content_hash(
            blk.height, blk.tx_id, blk.writes, blk.events, blk.prev_hash
        )


def test_chain_links_previous_hash():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1)], [])
    ledger.apply_block("tx2", [("y", 2)], [])
    assert ledger.blocks[1].prev_hash == ledger.blocks[0].content_hash
    assert ledger.blocks[0].prev_hash == "0" * 64


def test_notices_are_events_not_blocks():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1)], [])
    state_hash = ledger.dump_hash()
    ledger.emit_notice("tx1", "Seller", "release")
    ledger.emit_notice("tx1", "Buyer", "release")
    assert len(ledger.blocks) == 1
    assert ledger.dump_hash() == state_hash
    notices = [e for e in ledger.event_log if e.kind == "RecoveryNotice"]
    assert [n.participant for n in notices] == ["Seller", "Buyer"]


def test_fold_law():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1), ("y", 2)], [])
    ledger.apply_block("tx2", [("x", 9)], [])
    assert ledger.refold_state() == ledger.state


def test_dump_round_trip():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1)], [LedgerEvent("Committed", "tx1")])
    doc = ledger.to_doc()
    again = Ledger.from_doc(doc)
    assert again.dump_jsonl() == ledger.dump_jsonl()
    assert again.state == ledger.state
    assert again.verify_chain()


def test_append_only_between_blocks():
    ledger = Ledger()
    ledger.apply_block("tx1", [("x", 1)], [])
    before = [blk.to_doc() for blk in ledger.blocks]
    ledger.apply_block("tx2", [("y", 2)], [])
    assert [blk.to_doc() for blk in ledger.blocks[:1]] == before
