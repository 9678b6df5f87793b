"""Per-tier resident-page index with a clock hand for replacement sweeps.

Open-addressing hash table over a flat int64 array, so membership and the
sweep order live in one cache-friendly structure.  Slots hold a page id,
EMPTY, or TOMB (deleted).  The clock hand walks slot order, which is a
hash-scattered but stable ordering of the resident pages.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

EMPTY = -1
TOMB = -2

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class ResidentSet:
    """Thread-safe set of page ids with clock-sweep iteration.

    `capacity_hint` sizes the table so the load factor stays below one half
    at the tier's frame capacity; the table grows (and drops tombstones) if
    an insert would push the live+tombstone load above one half.
    """

    def __init__(self, capacity_hint: int):
        size = 8
        while size < 2 * max(1, capacity_hint) + 1:
            size *= 2
        self._slots = np.full(size, EMPTY, dtype=np.int64)
        self._mask = size - 1
        self._count = 0       # live entries
        self._used = 0        # live + tombstones
        self._hand = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._count

    # -- membership ------------------------------------------------------

    def insert(self, pid: int) -> bool:
        if pid < 0:
            raise ValueError("page ids must be non-negative")
        with self._lock:
            if (self._used + 1) * 2 > len(self._slots):
                self._rebuild()
            slots = self._slots
            i = _splitmix64(pid) & self._mask
            first_tomb = -1
            while True:
                v = int(slots[i])
                if v == pid:
                    return False
                if v == TOMB and first_tomb < 0:
                    first_tomb = i
                if v == EMPTY:
                    j = first_tomb if first_tomb >= 0 else i
                    if int(slots[j]) == EMPTY:
                        self._used += 1
                    slots[j] = pid
                    self._count += 1
                    return True
                i = (i + 1) & self._mask

    def remove(self, pid: int) -> bool:
        with self._lock:
            i = self._probe(pid)
            if i < 0:
                return False
            self._slots[i] = TOMB
            self._count -= 1
            return True

    def __contains__(self, pid: int) -> bool:
        with self._lock:
            return self._probe(pid) >= 0

    def _probe(self, pid: int) -> int:
        slots = self._slots
        i = _splitmix64(pid) & self._mask
        while True:
            v = int(slots[i])
            if v == pid:
                return i
            if v == EMPTY:
                return -1
            i = (i + 1) & self._mask

    def _rebuild(self) -> None:
        # Grow only when live entries need it; otherwise just shed tombstones.
        old = self._slots[self._slots >= 0]
        size = len(self._slots)
        while (len(old) + 1) * 2 > size:
            size *= 2
        self._slots = np.full(size, EMPTY, dtype=np.int64)
        self._mask = size - 1
        self._used = 0
        self._count = 0
        self._hand = 0
        for pid in old.tolist():
            i = _splitmix64(pid) & self._mask
            while int(self._slots[i]) != EMPTY:
                i = (i + 1) & self._mask
            self._slots[i] = pid
            self._used += 1
            self._count += 1

    # -- clock sweep -----------------------------------------------------

    def sweep(self, visit: Callable[[int], bool], max_take: int) -> list[int]:
        """Advance the clock hand, calling `visit(pid)` per resident page.

        Collects pids for which visit returned True, stopping after
        `max_take` takes or one full lap.  The hand position persists
        across calls.  `visit` runs under the set's lock and must not
        call back into this set.
        """
        taken: list[int] = []
        with self._lock:
            if self._count == 0 or max_take <= 0:
                return taken
            slots = self._slots
            n = len(slots)
            hand = self._hand
            for _ in range(n):
                v = int(slots[hand])
                hand = (hand + 1) & self._mask
                if v >= 0 and visit(v):
                    taken.append(v)
                    if len(taken) >= max_take:
                        break
            self._hand = hand
            return taken

    def snapshot(self) -> list[int]:
        with self._lock:
            return self._slots[self._slots >= 0].tolist()
