"""Small shared helpers: atomic file writes and deterministic CSV output."""

from __future__ import annotations

import os
import tempfile


def atomic_write_text(path, text: str) -> None:
    """Write text to `path` via a temp file + rename so readers never see
    a partial file and failed writes leave the old contents intact."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_csv_row(values) -> str:
    """Deterministic CSV row: floats at 9 significant digits, no padding."""
    out = []
    for v in values:
        if isinstance(v, float):
            out.append(f"{v:.9g}")
        else:
            out.append(str(v))
    return ",".join(out)


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(format_csv_row(r) for r in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")
