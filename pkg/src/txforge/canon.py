"""Canonical JSON serialization and hashing.

Every hash in the system (blocks, bundles, checkpoints, dumps) is SHA-256
over this one canonical form: sorted keys, compact separators, ASCII-escaped.
"""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def hash_obj(obj) -> str:
    return sha256_hex(canonical_json(obj))
