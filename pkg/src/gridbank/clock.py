"""Injectable UTC clocks with second precision."""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone

from .errors import BadParameters

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def format_ts(dt: datetime) -> str:
    return utc(dt).strftime(TIMESTAMP_FORMAT)


def parse_ts(text: str) -> datetime:
    try:
        return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)
    except (TypeError, ValueError):
        raise BadParameters(f"bad timestamp {text!r}") from None


class SystemClock:
    def now(self) -> datetime:
        return utc(datetime.now(timezone.utc))


class ManualClock:
    """A clock that only moves when told to. Used by tests and the simulator."""

    def __init__(self, start: datetime | str = "2026-01-01T00:00:00Z"):
        if isinstance(start, str):
            start = parse_ts(start)
        self._now = utc(start)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float = 0, **kwargs) -> datetime:
        with self._lock:
            self._now = utc(self._now + timedelta(seconds=seconds, **kwargs))
            return self._now

    def set(self, when: datetime) -> None:
        with self._lock:
            self._now = utc(when)
