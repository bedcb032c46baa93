"""Deterministic seed derivation.

A single master seed fans out into per-module and per-operation seeds via
SHA-256 over ``"<master>:<label>"``, truncated to 31 bits. The scheme is
stable across platforms and Python versions, so every consumer of a label
sees the same stream on every run.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF
