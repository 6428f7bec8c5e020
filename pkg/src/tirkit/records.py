"""Canonical line-oriented record IO.

Every dataset file in this toolkit is a sequence of JSON objects, one per
line.  Serialization is canonical (sorted keys, compact separators, raw
UTF-8) so that identical inputs produce byte-identical files across runs
and machines.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator


def dumps_canonical(obj: Any) -> str:
    """Serialize one record to its canonical single-line form."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    """Yield records from a JSONL file, skipping blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid record: {exc}") from exc


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    """Write records canonically, one per line.  Returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_canonical(rec))
            fh.write("\n")
            count += 1
    return count
