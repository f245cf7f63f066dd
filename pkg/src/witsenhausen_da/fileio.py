"""Atomic text output and the CSV dialect shared by every export."""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

CSV_DIGITS = 12


def format_number(v) -> str:
    """Shortest round-trip text for integers, 12 significant digits otherwise."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.{CSV_DIGITS}g}"


def csv_text(header: Sequence[str], columns: Sequence) -> str:
    """Comma-separated text with a header row and LF line endings."""
    cols = [np.asarray(c) for c in columns]
    if len(cols) != len(header):
        raise ValueError("one column per header field is required")
    n = {c.size for c in cols}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*(c.tolist() for c in cols)):
        buf.write(",".join(format_number(v) for v in row) + "\n")
    return buf.getvalue()


def atomic_write_text(path, text: str):
    """Write via a temporary file in the target directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, columns):
    atomic_write_text(path, csv_text(header, columns))


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
