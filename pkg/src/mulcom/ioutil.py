"""Atomic file writes and canonical JSON for reproducible artifacts."""

from __future__ import annotations

import json
import os
import tempfile


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace drift.

    Floats go through repr, so float64 values survive a round trip
    bit-exactly and equal inputs always produce equal bytes.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_text(path: str, text: str) -> None:
    """Write via a same-directory temp file and rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
