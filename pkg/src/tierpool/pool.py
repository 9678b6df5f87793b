"""The n-tier buffer pool: fix/unfix, optimistic reads, clock eviction,
probabilistic tier policy, and batched demotion/promotion.

Concurrency design, in one place:

* Page safety is the state-word CAS protocol; there is no per-page mutex.
* Each tier's ResidentSet has its own short-lived internal lock.
* One pool-wide reentrant migration lock serializes evict_batch and
  promote_batch.  Holders of that lock only ever *try* CAS edges on pages
  (never spin on them), so a thread stuck waiting for a page lock can never
  be holding the migration lock that its owner needs.
* fix() takes no locks besides CAS retries; its fault path may run evictions,
  which acquire the migration lock.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import state_word as sw
from .backend import DISK, TierBackend, TierTopology
from .cost_model import CostModel
from .errors import ConfigError, IllegalState, PoolTimeout, TierFull
from .migration import (MigrationEngine, MigrationMode, MigrationRequest)
from .resident_set import ResidentSet
from .state_word import Edge, StateLayout, StateTable
from .stats import StatsRegistry

DRAM = 0

_ENGINES = ("mp2", "legacy", "mbind")


@dataclass
class MigrationPolicy:
    """Probabilistic tier-policy flags plus replacement batch sizes.

    dr: fault-in lands in DRAM with this probability, else in the next tier.
    rw: DRAM demotion targets the next memory tier with this probability,
        else goes straight to disk (rolled once per eviction batch).
    rr: a fix that finds its page in a remote tier promotes a batch toward
        DRAM with this probability.
    dw: a dirty page evicted from the last memory tier is written back with
        this probability, else the victim is skipped for another clock lap.
    """

    dr: float = 1.0
    dw: float = 1.0
    rr: float = 1.0
    rw: float = 1.0
    utilization_threshold: float = 0.95
    evict_batch: int = 512
    promote_batch: int | None = None
    nr_max_batched_migration: int | None = None
    engine: str = "mp2"
    mode: MigrationMode = MigrationMode.SYNC

    def __post_init__(self):
        for name in ("dr", "dw", "rr", "rw"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if not 0.0 < self.utilization_threshold <= 1.0:
            raise ConfigError("utilization_threshold must be in (0, 1]")
        if self.evict_batch < 1:
            raise ConfigError("evict_batch must be >= 1")
        if self.promote_batch is None:
            self.promote_batch = self.evict_batch
        if self.promote_batch < 1:
            raise ConfigError("promote_batch must be >= 1")
        if self.nr_max_batched_migration is None:
            self.nr_max_batched_migration = 2 * self.evict_batch
        if self.nr_max_batched_migration < 1:
            raise ConfigError("nr_max_batched_migration must be >= 1")
        if self.engine not in _ENGINES:
            raise ConfigError(f"engine must be one of {_ENGINES}")
        if not isinstance(self.mode, MigrationMode):
            raise ConfigError("mode must be a MigrationMode")


@dataclass
class PoolStats:
    fixes: int
    hits: list[int]
    faults: int
    promotions: int
    demotions: int
    evictions_to_disk: int
    disk_reads: int
    disk_writes: int
    migration_calls: int
    mbind_calls: int
    migrated_pages: int
    shootdowns: int
    t_disk_ns: int
    t_migration_ns: int
    occupancy: list[int]


class PageHandle:
    """A held page lock.  Usable as a context manager; exiting unfixes."""

    __slots__ = ("pool", "pid", "exclusive", "_dirty", "_released")

    def __init__(self, pool: "BufferPool", pid: int, exclusive: bool):
        self.pool = pool
        self.pid = pid
        self.exclusive = exclusive
        self._dirty = False
        self._released = False

    @property
    def data(self) -> np.ndarray:
        """The page's frame bytes; valid only while the handle is held."""
        return self.pool.backend.page_view(self.pid)

    def mark_dirty(self) -> None:
        if not self.exclusive:
            raise IllegalState("cannot dirty a shared-locked page")
        self._dirty = True

    def __enter__(self) -> "PageHandle":
        return self

    def __exit__(self, *exc) -> None:
        if not self._released:
            self.pool.unfix(self)


class BufferPool:
    def __init__(self, topology: TierTopology, policy: MigrationPolicy | None = None,
                 seed: int = 0, cost_model: CostModel | None = None,
                 disk_path: str | None = None, trace: bool = False,
                 fix_timeout_s: float = 30.0):
        self.topology = topology
        self.policy = policy or MigrationPolicy()
        self.layout = StateLayout(topology.n_memory_tiers)
        self.registry = StatsRegistry()
        self.backend = TierBackend(topology, cost_model=cost_model,
                                   disk_path=disk_path, registry=self.registry)
        self.engine = MigrationEngine(self.backend, registry=self.registry)
        self.state = StateTable(topology.slots, self.layout, trace=trace)
        self.resident = [ResidentSet(t.capacity_pages) for t in topology.memory_tiers]
        self.dirty = np.zeros(topology.slots, dtype=bool)
        self.seed = seed
        self.fix_timeout_s = fix_timeout_s
        self._mig_lock = threading.RLock()
        self._tls = threading.local()
        self._thread_seq = 0
        self._seq_lock = threading.Lock()
        # Every slot starts life evicted (on disk, version 0).
        evicted = self.layout.pack(sw.EVICTED, 0, 0)
        self.state.words[:] = np.uint64(evicted)

    # -- rng plumbing ----------------------------------------------------

    def rng(self) -> random.Random:
        """This thread's policy RNG, seeded from (pool seed, thread ordinal)."""
        r = getattr(self._tls, "rng", None)
        if r is None:
            with self._seq_lock:
                ordinal = self._thread_seq
                self._thread_seq += 1
            r = random.Random(self.seed * 0x9E3779B97F4A7C15 + ordinal)
            self._tls.rng = r
        return r

    # -- fix / unfix -----------------------------------------------------

    def fix(self, pid: int, exclusive: bool = True,
            rng: random.Random | None = None) -> PageHandle:
        if not 0 <= pid < self.topology.slots:
            raise ConfigError(f"pid {pid} out of range")
        rng = rng or self.rng()
        deadline = time.monotonic() + self.fix_timeout_s
        self.registry.bump("fixes")
        first = self.state.load(pid)
        if self.layout.lock_byte(first) == sw.EVICTED:
            self.registry.bump("faults")
        else:
            self.registry.bump(f"hits_t{self.layout.tier(first)}")
        rolled_rr = False
        spins = 0
        while True:
            word = self.state.load(pid)
            byte = self.layout.lock_byte(word)
            if byte == sw.EVICTED:
                if self._fault_in(pid, exclusive, rng, deadline):
                    return PageHandle(self, pid, exclusive)
                continue  # lost the fault race; someone else is reading it in
            tier = self.layout.tier(word)
            if tier != DRAM and not rolled_rr:
                # Remote hit: at most one promotion roll per fix call.
                rolled_rr = True
                if rng.random() < self.policy.rr:
                    self.promote_batch(pid, tier, rng=rng)
                continue
            if exclusive:
                if byte in (sw.UNLOCKED, sw.MARKED):
                    applied, _, _ = self.state.try_edge(pid, Edge.lock_exclusive())
                    if applied:
                        self._charge_access(tier)
                        return PageHandle(self, pid, True)
            else:
                if byte == sw.UNLOCKED or sw.SHARED_MIN <= byte < sw.SHARED_MAX:
                    applied, _, _ = self.state.try_edge(pid, Edge.lock_shared())
                    if applied:
                        self._charge_access(tier)
                        return PageHandle(self, pid, False)
                elif byte == sw.MARKED:
                    # No Marked->Shared edge exists; clear the mark by taking
                    # and dropping the exclusive lock, then retry shared.
                    applied, _, _ = self.state.try_edge(pid, Edge.lock_exclusive())
                    if applied:
                        a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
                        assert a
                    continue
            spins = self._backoff(spins, deadline, pid)

    def unfix(self, handle: PageHandle, dirty: bool | None = None) -> None:
        assert not handle._released, "handle unfixed twice"
        handle._released = True
        pid = handle.pid
        if handle.exclusive:
            is_dirty = handle._dirty if dirty is None else (dirty or handle._dirty)
            if is_dirty:
                self.dirty[pid] = True
            applied, old, _ = self.state.try_edge(pid, Edge.unlock_exclusive(is_dirty))
            if not applied:
                raise IllegalState(f"exclusive unfix of page {pid} in state "
                                   f"{sw.describe_lock(self.layout.lock_byte(old))}")
        else:
            while True:
                applied, old, _ = self.state.try_edge(pid, Edge.unlock_shared())
                if applied:
                    return
                byte = self.layout.lock_byte(old)
                if not sw.SHARED_MIN <= byte <= sw.SHARED_MAX:
                    raise IllegalState(f"shared unfix of page {pid} in state "
                                       f"{sw.describe_lock(byte)}")
                # lost a CAS race against another shared locker; retry

    def _fault_in(self, pid: int, exclusive: bool, rng: random.Random,
                  deadline: float) -> bool:
        """Winner path for an Evicted page; returns False if the CAS lost."""
        pol = self.policy
        m = self.topology.n_memory_tiers
        target = DRAM
        if m > 1 and rng.random() >= pol.dr:
            target = 1
        applied, _, _ = self.state.try_edge(pid, Edge.fault_in(target))
        if not applied:
            return False
        try:
            while True:
                self._make_room(target, rng, deadline, need=1)
                try:
                    self.backend.bind_and_read(pid, target)
                    break
                except TierFull:
                    continue  # a concurrent fault took the frame; evict again
        except BaseException:
            # Roll the word back so the page is not left locked forever.
            a, _, _ = self.state.try_edge(pid, Edge.evict())
            assert a
            raise
        self.resident[target].insert(pid)
        if not exclusive:
            # Downgrade: release exclusive, then take shared (racy but safe).
            a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
            assert a
            spins = 0
            while True:
                applied, old, _ = self.state.try_edge(pid, Edge.lock_shared())
                if applied:
                    return True
                if self.layout.lock_byte(old) == sw.EVICTED:
                    return False  # evicted in the gap; take the outer loop again
                spins = self._backoff(spins, deadline, pid)
        return True

    def _charge_access(self, tier: int) -> None:
        # Simulated access latency of a memory-tier hit (zero for DRAM by
        # default, nonzero for remote tiers when the cost model is on).
        self.backend.cost.charge(self.topology.memory_tiers[tier].read_latency_ns)

    def _backoff(self, spins: int, deadline: float, pid: int) -> int:
        if time.monotonic() > deadline:
            raise PoolTimeout(f"could not acquire page {pid}")
        if spins > 64:
            time.sleep(0.0001)
        else:
            time.sleep(0)
        return spins + 1

    # -- optimistic reads ------------------------------------------------

    def optimistic_read(self, pid: int, reader_fn,
                        rng: random.Random | None = None):
        """Run `reader_fn(bytes_view)` without locking, validate, retry.

        The view is live memory: reader_fn must be side-effect-free and must
        tolerate torn bytes, because a result is discarded (and retried)
        whenever the page's word, placement, or frame generation moved while
        it ran.  Locked and Evicted pages fall back to a shared fix.  A
        validated read of a remote-tier page counts as a hit there and rolls
        the rr promotion policy, just like a pessimistic fix would.
        """
        attempts = 0
        while True:
            word = self.state.load(pid)
            byte = self.layout.lock_byte(word)
            if byte == sw.LOCKED or byte == sw.EVICTED or attempts >= 64:
                h = self.fix(pid, exclusive=False, rng=rng)
                try:
                    return reader_fn(h.data)
                finally:
                    self.unfix(h)
            packed0, gen0 = self.backend.read_token(pid)
            if packed0 >= 0:
                view = self.backend.pools[packed0 >> 40].arena[packed0 & ((1 << 40) - 1)]
                value = reader_fn(view)
                packed1, gen1 = self.backend.read_token(pid)
                if (self.state.load(pid) == word
                        and packed1 == packed0 and gen1 == gen0):
                    tier = packed0 >> 40
                    self.registry.bump("optimistic_reads")
                    self.registry.bump(f"hits_t{tier}")
                    self._charge_access(tier)
                    if tier != DRAM:
                        rng = rng or self.rng()
                        if rng.random() < self.policy.rr:
                            self.promote_batch(pid, tier, rng=rng)
                    return value
            attempts += 1
            self.registry.bump("optimistic_retries")
            time.sleep(0)

    # -- eviction --------------------------------------------------------

    def evict_batch(self, src_tier: int, dst: int,
                    rng: random.Random | None = None) -> int:
        """One clock pass over src: mark unlocked pages, take marked ones,
        and move the taken set to `dst` (a memory tier or DISK).  Returns
        the number of pages that actually moved."""
        rng = rng or self.rng()
        if dst != DISK and not 0 <= dst < self.topology.n_memory_tiers:
            raise ConfigError(f"bad eviction destination {dst}")
        layout = self.layout
        state = self.state

        def visit(pid: int) -> bool:
            word = state.load(pid)
            byte = layout.lock_byte(word)
            if byte == sw.UNLOCKED:
                state.try_edge(pid, Edge.mark())
                return False
            if byte == sw.MARKED:
                new = sw.transition(layout, word, Edge.lock_exclusive())
                return state.compare_and_swap(pid, word, new)
            return False

        with self._mig_lock:
            taken = self.resident[src_tier].sweep(visit, self.policy.evict_batch)
            if not taken:
                return 0
            if dst == DISK:
                return self._evict_to_disk(src_tier, taken, rng)
            return self._demote(src_tier, taken, dst, rng)

    def _evict_to_disk(self, src_tier: int, taken: list[int],
                       rng: random.Random) -> int:
        last = src_tier == self.topology.n_memory_tiers - 1
        moved = 0
        for pid in taken:
            if self.dirty[pid]:
                if last and rng.random() >= self.policy.dw:
                    # Policy skip: leave the page cached for another lap.
                    a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
                    assert a
                    continue
                self.backend.write_back(pid)
                self.dirty[pid] = False
            else:
                self.backend.release_frame(pid)
            self.resident[src_tier].remove(pid)
            a, _, _ = self.state.try_edge(pid, Edge.evict())
            assert a
            self.registry.bump("evicted_to_disk")
            moved += 1
        return moved

    def _demote(self, src_tier: int, taken: list[int], dst: int,
                rng: random.Random) -> int:
        # Make room at the destination first; otherwise a full next tier
        # turns every demotion into a TierFull no-op and nothing drains.
        self._room_for_batch(dst, len(taken), rng)
        codes = self._migrate(taken, dst)
        moved = 0
        for pid, code in zip(taken, codes):
            if code >= 0:
                self.resident[src_tier].remove(pid)
                self.resident[dst].insert(pid)
                a, _, _ = self.state.try_edge(pid, Edge.set_tier(dst))
                assert a
                self.registry.bump("demoted_pages")
                moved += 1
            a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
            assert a
        return moved

    def _migrate(self, pids: list[int], dst: int) -> list[int]:
        pol = self.policy
        if pol.engine == "mbind":
            return [self.engine.mbind_single(pid, dst) for pid in pids]
        req = MigrationRequest(pids, [dst] * len(pids), mode=pol.mode,
                               nr_max_batched_migration=pol.nr_max_batched_migration)
        if pol.engine == "mp2":
            return self.engine.move_pages2(req).status
        return self.engine.move_pages_legacy(req).status

    def _evict_round(self, tier: int, rng: random.Random) -> int:
        """One threshold-driven eviction batch out of `tier`, with the
        DRAM destination drawn per batch from rw."""
        m = self.topology.n_memory_tiers
        if tier < m - 1:
            dst = tier + 1 if (tier != DRAM or rng.random() < self.policy.rw) else DISK
        else:
            dst = DISK
        return self.evict_batch(tier, dst, rng=rng)

    def maybe_evict(self, tier: int, rng: random.Random | None = None) -> int:
        """Run eviction rounds while `tier` sits at or above the threshold."""
        rng = rng or self.rng()
        deadline = time.monotonic() + self.fix_timeout_s
        return self._make_room(tier, rng, deadline, need=0)

    def _make_room(self, tier: int, rng: random.Random, deadline: float,
                   need: int) -> int:
        pol = self.policy
        pool = self.backend.pools[tier]
        zero_rounds = 0
        total = 0
        while True:
            util = (pool.capacity - pool.n_free) / pool.capacity
            if util < pol.utilization_threshold and pool.n_free >= need:
                return total
            moved = self._evict_round(tier, rng)
            total += moved
            if moved:
                zero_rounds = 0
                continue
            zero_rounds += 1
            if zero_rounds >= 64:
                raise ConfigError(
                    f"tier {tier} cannot make room: capacity "
                    f"{pool.capacity} too small for the locked working set")
            if time.monotonic() > deadline:
                raise PoolTimeout(f"eviction on tier {tier} made no progress")
            time.sleep(0.0001 if zero_rounds > 8 else 0)

    def _room_for_batch(self, tier: int, need: int, rng: random.Random) -> None:
        """Best-effort: try to free `need` frames on `tier`; leftover
        shortfall surfaces as per-page TierFull in the migration call."""
        pool = self.backend.pools[tier]
        zero_rounds = 0
        while pool.n_free < need and zero_rounds < 16:
            if self._evict_round(tier, rng) == 0:
                zero_rounds += 1
            else:
                zero_rounds = 0

    # -- promotion -------------------------------------------------------

    def promote_batch(self, trigger_pid: int, src_tier: int,
                      rng: random.Random | None = None) -> int:
        """Pull `trigger_pid` plus up to promote_batch-1 unlocked neighbors
        from `src_tier` into DRAM with one migration call."""
        rng = rng or self.rng()
        if not 0 < src_tier < self.topology.n_memory_tiers:
            raise ConfigError(f"bad promotion source {src_tier}")
        layout = self.layout
        state = self.state

        with self._mig_lock:
            if not self._try_lock_in_tier(trigger_pid, src_tier):
                return 0
            locked = [trigger_pid]

            def visit(pid: int) -> bool:
                if pid == trigger_pid:
                    return False
                word = state.load(pid)
                if layout.lock_byte(word) != sw.UNLOCKED:
                    return False
                new = sw.transition(layout, word, Edge.lock_exclusive())
                return state.compare_and_swap(pid, word, new)

            extra = self.policy.promote_batch - 1
            if extra > 0:
                locked += self.resident[src_tier].sweep(visit, extra)
            self._room_for_batch(DRAM, len(locked), rng)
            codes = self._migrate(locked, DRAM)
            moved = 0
            for pid, code in zip(locked, codes):
                if code >= 0:
                    self.resident[src_tier].remove(pid)
                    self.resident[DRAM].insert(pid)
                    a, _, _ = self.state.try_edge(pid, Edge.set_tier(DRAM))
                    assert a
                    self.registry.bump("promoted_pages")
                    moved += 1
                a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
                assert a
            return moved

    def _try_lock_in_tier(self, pid: int, tier: int) -> bool:
        word = self.state.load(pid)
        byte = self.layout.lock_byte(word)
        if byte not in (sw.UNLOCKED, sw.MARKED):
            return False
        if self.layout.tier(word) != tier:
            return False
        new = sw.transition(self.layout, word, Edge.lock_exclusive())
        return self.state.compare_and_swap(pid, word, new)

    # -- maintenance -----------------------------------------------------

    def flush_all(self) -> int:
        """Write every dirty cached page to disk; pages stay resident."""
        flushed = 0
        deadline = time.monotonic() + self.fix_timeout_s
        for tier in range(self.topology.n_memory_tiers):
            for pid in self.resident[tier].snapshot():
                if not self.dirty[pid]:
                    continue
                if not self._lock_blocking(pid, deadline):
                    continue  # page got evicted while we waited
                if self.dirty[pid]:
                    self.backend.flush_page(pid)
                    self.dirty[pid] = False
                    flushed += 1
                a, _, _ = self.state.try_edge(pid, Edge.unlock_exclusive(False))
                assert a
        return flushed

    def evict_all(self) -> int:
        """Force every cached page out to disk (cold-start helper)."""
        deadline = time.monotonic() + self.fix_timeout_s
        evicted = 0
        with self._mig_lock:
            for tier in range(self.topology.n_memory_tiers):
                rset = self.resident[tier]
                for pid in rset.snapshot():
                    if not self._lock_blocking(pid, deadline):
                        continue
                    if self.dirty[pid]:
                        self.backend.write_back(pid)
                        self.dirty[pid] = False
                    else:
                        self.backend.release_frame(pid)
                    rset.remove(pid)
                    a, _, _ = self.state.try_edge(pid, Edge.evict())
                    assert a
                    self.registry.bump("evicted_to_disk")
                    evicted += 1
        return evicted

    def _lock_blocking(self, pid: int, deadline: float) -> bool:
        spins = 0
        while True:
            word = self.state.load(pid)
            byte = self.layout.lock_byte(word)
            if byte == sw.EVICTED:
                return False
            if byte in (sw.UNLOCKED, sw.MARKED):
                applied, _, _ = self.state.try_edge(pid, Edge.lock_exclusive())
                if applied:
                    return True
            spins = self._backoff(spins, deadline, pid)

    def close(self) -> None:
        self.flush_all()
        self.backend.close()

    # -- introspection ---------------------------------------------------

    def is_dirty(self, pid: int) -> bool:
        return bool(self.dirty[pid])

    def page_state(self, pid: int) -> tuple[int, int, int]:
        return self.layout.unpack(self.state.load(pid))

    def stats(self) -> PoolStats:
        t = self.registry.total()
        m = self.topology.n_memory_tiers
        return PoolStats(
            fixes=t.get("fixes", 0),
            hits=[t.get(f"hits_t{i}", 0) for i in range(m)],
            faults=t.get("faults", 0),
            promotions=t.get("promoted_pages", 0),
            demotions=t.get("demoted_pages", 0),
            evictions_to_disk=t.get("evicted_to_disk", 0),
            disk_reads=t.get("disk_reads", 0),
            disk_writes=t.get("disk_writes", 0),
            migration_calls=t.get("migration_calls", 0),
            mbind_calls=t.get("mbind_calls", 0),
            migrated_pages=t.get("migrated_pages", 0),
            shootdowns=t.get("shootdowns", 0),
            t_disk_ns=t.get("t_disk_ns", 0),
            t_migration_ns=t.get("t_migration_ns", 0),
            occupancy=[self.backend.occupancy(i) for i in range(m)],
        )
