"""Simulated n-tier physical substrate: frame pools, page table, and disk.

The backend owns the truth about where every page physically lives.  Memory
tiers are byte arenas carved into page frames; the disk is a flat page store
(in-memory by default, file-backed on request, page i at byte offset
i * page_size).  The page-slot space is sized by the disk tier, and a page's
slot index never changes; only the frame backing it moves.

Callers must hold a page's exclusive state-word lock before calling any
operation that moves or drops its frame; accessors are plain reads.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .cost_model import CostModel
from .errors import ConfigError, IllegalState, TierFull
from .stats import StatsRegistry

# Destination marker for "the disk tier" in pool/backend APIs.
DISK = -1

_FRAME_SHIFT = 40
_FRAME_MASK = (1 << _FRAME_SHIFT) - 1


@dataclass(frozen=True)
class TierSpec:
    capacity_pages: int
    read_latency_ns: int = 0
    write_latency_ns: int = 0


@dataclass(frozen=True)
class TierTopology:
    """Shape of the hierarchy: tier 0 is local DRAM, the last entry is disk."""

    memory_tiers: tuple[TierSpec, ...]
    disk: TierSpec
    page_size_bytes: int = 4096

    def __post_init__(self):
        if not self.memory_tiers:
            raise ConfigError("at least one memory tier is required")
        for i, t in enumerate(self.memory_tiers):
            if t.capacity_pages <= 0:
                raise ConfigError(f"memory tier {i} has zero capacity")
        if self.disk.capacity_pages <= 0:
            raise ConfigError("disk tier has zero capacity")
        ps = self.page_size_bytes
        if ps < 512 or ps & (ps - 1):
            raise ConfigError(f"page size must be a power of two >= 512, got {ps}")

    @property
    def n_memory_tiers(self) -> int:
        return len(self.memory_tiers)

    @property
    def slots(self) -> int:
        return self.disk.capacity_pages


@dataclass(frozen=True)
class Placement:
    """Physical location of a page: a (tier, frame) pair or the disk."""

    tier: int
    frame: int

    @property
    def on_disk(self) -> bool:
        return self.tier == DISK


ON_DISK = Placement(DISK, -1)


@dataclass
class BackendStats:
    disk_reads: int
    disk_writes: int
    bytes_copied: int
    occupancy: list[int]
    free_frames: list[int]


class FramePool:
    """Free-list of frames over one tier's byte arena.

    Each frame carries a generation counter bumped on allocation; optimistic
    readers use it to detect that a frame was recycled under them.
    """

    def __init__(self, capacity_pages: int, page_size: int):
        self.capacity = capacity_pages
        self.arena = np.zeros((capacity_pages, page_size), dtype=np.uint8)
        self.gen = np.zeros(capacity_pages, dtype=np.int64)
        self._free = list(range(capacity_pages - 1, -1, -1))
        self._lock = threading.Lock()

    def alloc(self) -> int | None:
        with self._lock:
            if not self._free:
                return None
            frame = self._free.pop()
            self.gen[frame] += 1
            return frame

    def free(self, frame: int) -> None:
        with self._lock:
            self._free.append(frame)

    @property
    def n_free(self) -> int:
        return len(self._free)


class SimDisk:
    """Flat page store; in-memory by default, file-backed when given a path."""

    def __init__(self, capacity_pages: int, page_size: int, path: str | None = None):
        self.capacity = capacity_pages
        self.page_size = page_size
        self.path = path
        if path is None:
            self.store = np.zeros((capacity_pages, page_size), dtype=np.uint8)
        else:
            nbytes = capacity_pages * page_size
            mode = "r+" if os.path.exists(path) and os.path.getsize(path) == nbytes else "w+"
            self.store = np.memmap(path, dtype=np.uint8, mode=mode,
                                   shape=(capacity_pages, page_size))

    def flush(self) -> None:
        if self.path is not None:
            self.store.flush()


class TierBackend:
    """Page table plus per-tier frame pools plus the simulated disk."""

    def __init__(self, topology: TierTopology, cost_model: CostModel | None = None,
                 disk_path: str | None = None, registry: StatsRegistry | None = None):
        self.topology = topology
        self.cost = cost_model or CostModel()
        self.registry = registry or StatsRegistry()
        self.page_size = topology.page_size_bytes
        self.pools = [FramePool(t.capacity_pages, self.page_size)
                      for t in topology.memory_tiers]
        self.disk = SimDisk(topology.slots, self.page_size, disk_path)
        # Packed placement per slot: -1 on disk, else (tier << 40) | frame.
        # One word so optimistic readers get an atomic snapshot.
        self.place = np.full(topology.slots, -1, dtype=np.int64)

    # -- placement primitives (caller holds the page exclusively) --------

    def bind_and_read(self, pid: int, target: int) -> Placement:
        """Fault a disk-resident page into `target`: allocate, copy, publish."""
        self._check_memory_tier(target)
        if int(self.place[pid]) != -1:
            raise IllegalState(f"page {pid} is already memory-resident")
        pool = self.pools[target]
        frame = pool.alloc()
        if frame is None:
            raise TierFull(f"tier {target} has no free frame")
        sheet = self.registry.sheet()
        with self.registry.timed("t_disk_ns"):
            pool.arena[frame] = self.disk.store[pid]
            sheet["disk_reads"] = sheet.get("disk_reads", 0) + 1
            sheet["bytes_copied"] = sheet.get("bytes_copied", 0) + self.page_size
            self.cost.charge(self.topology.disk.read_latency_ns)
        self.place[pid] = (target << _FRAME_SHIFT) | frame
        return Placement(target, frame)

    def write_back(self, pid: int) -> None:
        """Copy the page's frame to disk, free the frame, mark it disk-resident."""
        tier, frame = self._resolve(pid)
        sheet = self.registry.sheet()
        with self.registry.timed("t_disk_ns"):
            self.disk.store[pid] = self.pools[tier].arena[frame]
            sheet["disk_writes"] = sheet.get("disk_writes", 0) + 1
            sheet["bytes_copied"] = sheet.get("bytes_copied", 0) + self.page_size
            self.cost.charge(self.topology.disk.write_latency_ns)
        self.place[pid] = -1
        self.pools[tier].free(frame)

    def release_frame(self, pid: int) -> None:
        """Drop a clean page's frame without writing; disk already has the bytes."""
        tier, frame = self._resolve(pid)
        self.place[pid] = -1
        self.pools[tier].free(frame)

    def flush_page(self, pid: int) -> None:
        """Copy a dirty page to disk but keep it cached (shutdown/flush path)."""
        tier, frame = self._resolve(pid)
        sheet = self.registry.sheet()
        with self.registry.timed("t_disk_ns"):
            self.disk.store[pid] = self.pools[tier].arena[frame]
            sheet["disk_writes"] = sheet.get("disk_writes", 0) + 1
            sheet["bytes_copied"] = sheet.get("bytes_copied", 0) + self.page_size
            self.cost.charge(self.topology.disk.write_latency_ns)

    def retarget_frame(self, pid: int, target: int) -> Placement:
        """Move a memory-resident page to a frame in `target`, slot unchanged.

        This is the single-page primitive the migration engine batches.  A
        retarget to the page's current tier is a successful no-op.
        """
        self._check_memory_tier(target)
        src_tier, src_frame = self._resolve(pid)
        if src_tier == target:
            return Placement(src_tier, src_frame)
        dst_pool = self.pools[target]
        dst_frame = dst_pool.alloc()
        if dst_frame is None:
            raise TierFull(f"tier {target} has no free frame")
        dst_pool.arena[dst_frame] = self.pools[src_tier].arena[src_frame]
        sheet = self.registry.sheet()
        sheet["bytes_copied"] = sheet.get("bytes_copied", 0) + self.page_size
        self.place[pid] = (target << _FRAME_SHIFT) | dst_frame
        self.pools[src_tier].free(src_frame)
        return Placement(target, dst_frame)

    # -- accessors -------------------------------------------------------

    def placement_of(self, pid: int) -> Placement:
        packed = int(self.place[pid])
        if packed < 0:
            return ON_DISK
        return Placement(packed >> _FRAME_SHIFT, packed & _FRAME_MASK)

    def page_view(self, pid: int) -> np.ndarray:
        """View of the page's current frame bytes; caller must hold the page."""
        tier, frame = self._resolve(pid)
        return self.pools[tier].arena[frame]

    def read_token(self, pid: int) -> tuple[int, int]:
        """(packed placement, frame generation) snapshot for optimistic reads."""
        packed = int(self.place[pid])
        if packed < 0:
            return packed, -1
        tier, frame = packed >> _FRAME_SHIFT, packed & _FRAME_MASK
        return packed, int(self.pools[tier].gen[frame])

    def free_frames(self, tier: int) -> int:
        return self.pools[tier].n_free

    def occupancy(self, tier: int) -> int:
        return self.pools[tier].capacity - self.pools[tier].n_free

    def utilization(self, tier: int) -> float:
        pool = self.pools[tier]
        return (pool.capacity - pool.n_free) / pool.capacity

    def counters(self) -> BackendStats:
        t = self.registry.total()
        return BackendStats(
            disk_reads=t.get("disk_reads", 0),
            disk_writes=t.get("disk_writes", 0),
            bytes_copied=t.get("bytes_copied", 0),
            occupancy=[self.occupancy(i) for i in range(len(self.pools))],
            free_frames=[self.free_frames(i) for i in range(len(self.pools))],
        )

    def close(self) -> None:
        self.disk.flush()

    # -- internals -------------------------------------------------------

    def _resolve(self, pid: int) -> tuple[int, int]:
        packed = int(self.place[pid])
        if packed < 0:
            raise IllegalState(f"page {pid} is on disk")
        return packed >> _FRAME_SHIFT, packed & _FRAME_MASK

    def _check_memory_tier(self, tier: int) -> None:
        if not 0 <= tier < len(self.pools):
            raise IllegalState(f"tier {tier} is not a memory tier")


def reserve(topology: TierTopology, cost_model: CostModel | None = None,
            disk_path: str | None = None) -> TierBackend:
    """Build a backend with every slot on disk and every frame free."""
    return TierBackend(topology, cost_model=cost_model, disk_path=disk_path)
