"""Deterministic seed derivation: every stochastic component draws from a
child seed derived from one root, so equal config+seed runs are replayable."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63 - 1)
