"""Canonical JSON encoding for metadata documents.

Every metadata document in a checkpoint is serialized the same way (UTF-8,
sorted keys, no insignificant whitespace) so that byte-level comparisons of
checkpoints are meaningful.
"""

from __future__ import annotations

import json
from typing import Any

from .errors import CorruptionError


def dumps_canonical(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def loads(data: bytes, *, what: str = "document") -> Any:
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptionError(f"malformed {what}: {e}") from e
