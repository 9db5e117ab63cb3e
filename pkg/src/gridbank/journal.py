"""Append-only journal of committed state changes.

One line per commit. A line is the canonical encoding of
``{"seq": n, "entries": [{"kind": ..., "args": {...}}, ...]}``; all entries
in one line were committed atomically. A final line without its newline is
a torn write from a crash and is ignored on replay; any other undecodable
line is corruption.
"""

from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Iterator

from .errors import CorruptJournal, SchemaViolation
from .security import canonical_decode, canonical_encode


class Journal:
    def __init__(self, path: str | Path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._seq = 0
        self._fh = None

    def read(self) -> Iterator[list[dict]]:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        lines = data.split(b"\n")
        torn = lines.pop()  # empty when the file ends with a newline
        if torn:
            # an incomplete trailing write never committed; drop it
            with self.path.open("r+b") as fh:
                fh.truncate(len(data) - len(torn))
        for lineno, raw in enumerate(lines, 1):
            if not raw:
                continue
            try:
                rec = canonical_decode(raw)
                seq, entries = rec["seq"], rec["entries"]
            except (SchemaViolation, KeyError, TypeError):
                raise CorruptJournal(f"{self.path}:{lineno}: undecodable journal line") from None
            if seq != self._seq + 1:
                raise CorruptJournal(f"{self.path}:{lineno}: sequence gap ({seq} after {self._seq})")
            self._seq = seq
            yield entries

    def append(self, entries: list[dict]) -> None:
        if not entries:
            return
        with self._lock:
            if self._fh is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = self.path.open("ab")
            self._seq += 1
            self._fh.write(canonical_encode({"seq": self._seq, "entries": entries}) + b"\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
