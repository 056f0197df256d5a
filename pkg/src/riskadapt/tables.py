"""Delimited-table formatting and versioned file writing.

Tables are comma-separated with '#'-prefixed header lines echoing run
metadata. Floats are written with repr so rereads are exact and reruns
byte-identical. Existing files are never silently overwritten: a rewrite
with different content archives the old bytes under a .vN suffix first.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return str(int(value))
    return str(value)


def format_table(meta: Sequence[str], columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [f"# {line}" for line in meta]
    lines.append(",".join(columns))
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_versioned(path: str | Path, content: str | bytes) -> Path:
    """Write content at path; archive differing previous content as .vN."""
    path = Path(path)
    data = content.encode("utf-8") if isinstance(content, str) else content
    if path.exists():
        old = path.read_bytes()
        if old == data:
            return path
        n = 1
        while (archive := path.with_name(f"{path.name}.v{n}")).exists():
            n += 1
        archive.write_bytes(old)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path
