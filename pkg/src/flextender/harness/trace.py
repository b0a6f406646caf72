"""Trace and metrics serialization. Stable key order keeps files diffable."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Union


class TraceCorrupt(ValueError):
    pass


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def dumps_trace(records: Iterable[dict]) -> str:
    return "".join(dumps_record(r) + "\n" for r in records)


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def write_atomic(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def loads_trace(text: str) -> List[dict]:
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceCorrupt(f"line {i}: {e.msg}") from None
        if not isinstance(rec, dict) or "kind" not in rec:
            raise TraceCorrupt(f"line {i}: record without 'kind'")
        out.append(rec)
    if not out or out[0]["kind"] != "HEADER":
        raise TraceCorrupt("trace must start with a HEADER record")
    return out


def read_trace(path: Union[str, Path]) -> List[dict]:
    return loads_trace(Path(path).read_text())
