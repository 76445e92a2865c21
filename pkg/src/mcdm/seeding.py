"""Deterministic seed derivation.

One global seed fans out into per-stage / per-item seeds through a stable
hash, so reruns with the same config reproduce every random draw without
any two stages sharing a stream.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a 64-bit child seed from ``seed`` and a label path.

    Stable across platforms and Python versions (sha256-based, no reliance
    on ``hash()``).
    """
    h = hashlib.sha256()
    h.update(str(int(seed) & _MASK64).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
