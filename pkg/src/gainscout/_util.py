"""Seed-stream derivation, atomic file writes and config hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile


def substream(seed: int, *tags) -> int:
    """Derive a named child seed from a master seed.

    Components can be re-run in isolation: the same (seed, tags) pair
    always yields the same child seed.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


def atomic_write_text(path, text: str):
    """Write via a temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(obj) -> str:
    """Stable identity hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
