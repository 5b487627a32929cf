"""Small shared helpers."""

from __future__ import annotations

import hashlib
import json


def stable_hash(obj) -> str:
    """Deterministic short hex digest of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
