"""Canonical serialization, digests, clocks, and small shared helpers."""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .errors import IoFailure

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

# Fixed clock value used for fully-deterministic replay runs.
REPLAY_EPOCH = datetime(2025, 1, 1, 0, 0, 0, tzinfo=timezone.utc)


def estimate_tokens(text: str) -> int:
    """Conservative token estimate: 1 token per 4 characters, rounded up."""
    return (len(text) + 3) // 4


def canonical_json(obj: Any) -> str:
    """Compact, key-sorted JSON used for digests and equality comparisons."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def pretty_json(obj: Any) -> str:
    """Key-sorted, indented JSON used for persisted artifacts (LF, trailing newline)."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    """Digest of an object's canonical JSON form; insensitive to key order."""
    return sha256_hex(canonical_json(obj))


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


class SystemClock:
    """Wall clock."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class FixedClock:
    """Constant clock; makes replay runs byte-reproducible."""

    def __init__(self, at: datetime = REPLAY_EPOCH):
        self._at = at

    def now(self) -> datetime:
        return self._at


def write_text_atomic(path: Path, text: str) -> Path:
    """Write UTF-8 text via temp file + rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(text, encoding="utf-8", newline="\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"failed to write {path}: {exc}") from exc
    return path


def write_canonical_json(path: Path, obj: Any) -> Path:
    return write_text_atomic(path, pretty_json(obj))


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"failed to read {path}: {exc}") from exc
