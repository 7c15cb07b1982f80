"""Deterministic seed derivation.

Python's ``hash`` is salted per process, so sub-seeds are derived from a
stable sha256 digest instead.  Every randomised component (episode
sampling, dropout, bottleneck noise, attacks) takes an explicit seed
derived from the run seed and a string path, which makes reruns
byte-identical.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1  # keep seeds positive and within torch's int64 range


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a child seed from ``seed`` and a label path.

    ``parts`` may be strings or ints; they are joined into a canonical
    byte string so ``derive_seed(s, "a", 1)`` differs from
    ``derive_seed(s, "a1")``.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("ascii"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") & _MASK
