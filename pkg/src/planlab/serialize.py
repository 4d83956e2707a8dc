"""Versioned JSON persistence helpers.

Every file planlab writes is a JSON object with a top-level ``format_version``
and ``kind`` field so that readers can reject foreign or future files with a
precise error instead of a stack trace.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

from .errors import FormatError, VersionError

FORMAT_VERSION = 1


def canonical_json(payload: Any) -> str:
    """Deterministic JSON encoding (sorted keys, compact separators)."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def digest(payload: Any) -> str:
    """sha256 hex digest of the canonical encoding of ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def dump_versioned(path: str, kind: str, payload: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": kind}
    doc.update(payload)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_versioned(path: str, kind: str) -> dict:
    """Load a versioned JSON file, checking kind and format version.

    Raises FileNotFoundError for missing files, FormatError for malformed
    content and VersionError for unsupported versions.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {version!r} not supported "
                           f"(expected {FORMAT_VERSION})")
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: kind {doc.get('kind')!r}, expected {kind!r}")
    return doc
