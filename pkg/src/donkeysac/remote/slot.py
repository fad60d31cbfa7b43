"""Latest-wins mailbox shared between a receiver and a periodic consumer."""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass
from typing import Any

from .protocol import Frame


@dataclass(frozen=True)
class SlotEntry:
    frame: Frame
    value: Any  # decoded payload
    checksum: int  # crc32 of frame.payload taken at write time
    received_at: int  # microseconds


class LatestSlot:
    """Holds the delivered message with the highest sequence number.

    Writes replace the whole entry under a lock, so a reader can never see a
    payload from one message paired with the header of another.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entry: SlotEntry | None = None
        self.writes = 0
        self.dropped_out_of_order = 0

    def write(self, frame: Frame, value: Any, received_at: int = 0) -> bool:
        entry = SlotEntry(frame, value, zlib.crc32(frame.payload), received_at)
        with self._lock:
            if self._entry is not None and frame.sequence <= self._entry.frame.sequence:
                self.dropped_out_of_order += 1
                return False
            self._entry = entry
            self.writes += 1
            return True

    def read(self) -> SlotEntry | None:
        with self._lock:
            return self._entry

    def clear(self) -> None:
        with self._lock:
            self._entry = None
