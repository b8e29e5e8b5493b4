"""Driver-model allocator: lazy allocation, page-size selection, splinter
and merge, LRU eviction to host in 64 KiB chunks, zero-on-reuse, FIFO frame
recycling, and table-region bookkeeping.

Table-region accounting rules (these carry the observable timing behaviour,
so they are spelled out):

* every 2 MiB window of an allocation costs one 16 B directory entry,
  charged when the allocation is first materialized; entries pack into
  4 KiB directory pages carved from the current region, and a new region
  always starts a fresh directory page;
* the first small page materialized in a window carves that window's
  last-level table (4 KiB for 4 KiB pages, 256 B for 64 KiB pages);
  rewriting entries inside an already-carved table costs nothing;
* a fully-evicted window releases its table (the bytes are dead, the fill
  cursor never rewinds), so re-materializing carves a fresh one;
* when a carve lands exactly at the region boundary the next region is
  created eagerly as part of the same touch.
"""

from __future__ import annotations

import bisect
import json
from collections import OrderedDict
from dataclasses import dataclass, field

from .device_memory import FRAME_BYTES, FRAME_2M
from . import page_table as pt

PAGE_4K = 4096
PAGE_64K = 65536
PAGE_2M = FRAME_2M
WINDOW_BYTES = PAGE_2M
FRAMES_64K = 16
FRAMES_2M = 512
SLICES_PER_WINDOW = 32
REGION_BYTES = PAGE_2M
PD0_ENTRY = 16
PD0_PAGE = 4096
PT_BYTES = {pt.PT_KIND_4K: 4096, pt.PT_KIND_64K: 256}
MERGE_THRESHOLD_64K = 16   # more than this many valid slices coalesce
MERGE_THRESHOLD_4K = 16    # more than this many contiguous small entries coalesce

VA_BASE = 1 << 32


class AllocationError(Exception):
    pass


class DeviceCapacityError(Exception):
    pass


class TouchFault(Exception):
    """Touch outside any allocation of the context."""


class DoubleFree(Exception):
    pass


def allocations_to_next_pt_region(current_fill: int) -> int:
    """Allocations of the 2 MiB + 4 KiB pattern left before a region rolls.

    Each such allocation carves one 4 KiB leaf table and 32 B of directory
    entries, with directory pages carved 4 KiB at a time, so the region is
    exhausted at the minimal A with
    current_fill + 4 KiB * (A + ceil(A/128)) >= 2 MiB.
    """
    if current_fill >= REGION_BYTES:
        return 0
    need = REGION_BYTES - current_fill
    a = 0
    while 4096 * (a + -(-a // 128)) < need:
        a += 1
    return a


class RegionCursor:
    """Pure carve arithmetic for one rolling sequence of 2 MiB regions.

    The allocator drives its real regions through one of these; the attack
    engine replays an identical instance to predict carve offsets without
    touching simulator state (the arithmetic is what an attacker recovers
    by reverse engineering).
    """

    def __init__(self, fill: int = 0):
        self.cursor = fill
        self.pd0_room = 0
        self.regions_rolled = 0

    def carve(self, nbytes: int) -> list[tuple]:
        """-> events, each ("roll",) or ("carve", offset)."""
        events = []
        if self.cursor + nbytes > REGION_BYTES:
            events.append(("roll",))
            self._roll()
        events.append(("carve", self.cursor))
        self.cursor += nbytes
        if self.cursor >= REGION_BYTES:
            events.append(("roll",))
            self._roll()
        return events

    def pd0_slot(self) -> list[tuple]:
        """-> events as for carve(), final event is ("slot", offset)."""
        events = []
        if self.pd0_room < PD0_ENTRY:
            for ev in self.carve(PD0_PAGE):
                if ev[0] == "carve":
                    self._pd0_page = ev[1]
                    self.pd0_room = PD0_PAGE
                events.append(ev)
        off = self._pd0_page + (PD0_PAGE - self.pd0_room)
        self.pd0_room -= PD0_ENTRY
        events.append(("slot", off))
        return events

    def _roll(self):
        self.cursor = 0
        self.pd0_room = 0
        self.regions_rolled += 1

    # attacker-side planning helpers ------------------------------------

    def tail_alloc(self) -> list[tuple]:
        """One 2 MiB + 4 KiB allocation touched on its tail."""
        return self.pd0_slot() + self.pd0_slot() + self.carve(PT_BYTES[pt.PT_KIND_4K])

    def splinter_alloc(self) -> list[tuple]:
        """One fresh 2 MiB allocation splintered by a single host touch."""
        return self.pd0_slot() + self.carve(PT_BYTES[pt.PT_KIND_64K])


@dataclass
class PtRegion:
    rid: int
    base_frame: int
    cursor: int = 0
    sealed: bool = False

    @property
    def base(self) -> int:
        return self.base_frame * FRAME_BYTES


class FreeList:
    """Free frame runs in eviction (FIFO) order with coalescing.

    Adjacent free runs merge into the piece with the earliest queue
    position, so a 2 MiB slot fragmented by an old splinter is still found
    at the old fragment's place once the rest of the slot frees up.  Dead
    entries are skipped lazily and compacted in bulk.
    """

    def __init__(self):
        self._runs: list[list] = []      # [seq, start, end, alive], sorted by seq
        self._by_start: dict[int, list] = {}
        self._by_end: dict[int, list] = {}
        self._seq = 0
        self._dead = 0
        self.total = 0

    def push(self, start: int, n: int) -> None:
        if n <= 0:
            return
        end = start + n
        self.total += n
        left = self._by_end.pop(start, None)
        right = self._by_start.pop(end, None)
        if left is not None and right is not None:
            survivor, other = (left, right) if left[0] <= right[0] else (right, left)
            self._by_start.pop(left[1], None)
            self._by_end.pop(right[2], None)
            survivor[1], survivor[2] = left[1], right[2]
            other[3] = False
            self._dead += 1
        elif left is not None:
            self._by_start.pop(left[1], None)
            survivor = left
            survivor[2] = end
        elif right is not None:
            self._by_end.pop(right[2], None)
            survivor = right
            survivor[1] = start
        else:
            survivor = [self._seq, start, end, True]
            self._seq += 1
            self._runs.append(survivor)
        self._by_start[survivor[1]] = survivor
        self._by_end[survivor[2]] = survivor
        self._maybe_compact()

    def _kill(self, run):
        self._by_start.pop(run[1], None)
        self._by_end.pop(run[2], None)
        run[3] = False
        self._dead += 1

    def _resize(self, run, new_start, new_end):
        self._by_start.pop(run[1], None)
        self._by_end.pop(run[2], None)
        if new_start >= new_end:
            run[3] = False
            self._dead += 1
            return
        run[1], run[2] = new_start, new_end
        self._by_start[new_start] = run
        self._by_end[new_end] = run

    def _maybe_compact(self):
        if self._dead > 64 and self._dead * 2 > len(self._runs):
            self._runs = [r for r in self._runs if r[3]]
            self._dead = 0

    def take(self, n: int, align: int) -> int | None:
        """First fit in FIFO order: earliest run holding an aligned n-run."""
        for run in self._runs:
            if not run[3]:
                continue
            s, e = run[1], run[2]
            a0 = -(-s // align) * align
            if a0 + n <= e:
                if a0 == s:
                    self._resize(run, a0 + n, e)
                elif a0 + n == e:
                    self._resize(run, s, a0)
                else:
                    tail = [run[0], a0 + n, e, True]
                    self._resize(run, s, a0)
                    idx = bisect.bisect_right(self._runs, tail)
                    self._runs.insert(idx, tail)
                    self._by_start[tail[1]] = tail
                    self._by_end[tail[2]] = tail
                self.total -= n
                return a0
        return None

    def runs(self) -> list[tuple[int, int]]:
        return [(r[1], r[2]) for r in self._runs if r[3]]


@dataclass
class TouchReport:
    evicted: bool = False
    pt_region_created: bool = False
    evictions: int = 0
    materialized: int = 0


@dataclass
class Window:
    index: int                      # global window number (va >> 21)
    alloc_id: int
    plan_kind: str                  # "2m" | "64k" | "4k"
    plan_units: int
    cur_kind: str = ""
    pd0_addr: int | None = None
    pt_addr: int | None = None
    resident: dict = field(default_factory=dict)   # unit -> start frame
    host: dict = field(default_factory=dict)       # unit -> extracted words

    def __post_init__(self):
        if not self.cur_kind:
            self.cur_kind = self.plan_kind


@dataclass
class Allocation:
    aid: int
    ctx: int
    va: int
    size: int
    windows: list[Window]
    first_touched: bool = False
    freed: bool = False


class CtxState:
    def __init__(self, ctx: int):
        self.ctx = ctx
        self.ptspace = pt.PageTableSpace(ctx)
        self.va_next = VA_BASE
        self.allocs: dict[int, Allocation] = {}
        self.window_map: dict[int, tuple[Allocation, Window]] = {}
        self.va_index: dict[int, Allocation] = {}   # base va -> alloc, survives free


def plan_allocation(size: int) -> list[tuple[str, int]]:
    """Window plans for an allocation: list of (kind, units) per window.

    Sizes up to 1 MiB use 64 KiB frames, up to 2 MiB a single 2 MiB frame;
    beyond that, whole windows use 2 MiB frames and the tail uses 4 KiB
    frames when it fits in 64 KiB, else 64 KiB frames.
    """
    if size <= 0:
        raise AllocationError("allocation size must be positive")
    if size <= PAGE_64K * 16:
        return [("64k", -(-size // PAGE_64K))]
    if size <= PAGE_2M:
        return [("2m", 1)]
    plans = [("2m", 1)] * (size // PAGE_2M)
    tail = size % PAGE_2M
    if tail == 0:
        return plans
    if tail <= PAGE_64K:
        plans.append(("4k", -(-tail // PAGE_4K)))
    else:
        plans.append(("64k", -(-tail // PAGE_64K)))
    return plans


class UvmAllocator:
    """Global allocator over one device; contexts share the frame pool and
    the rolling table regions (the cross-context signal the timing channel
    rides on)."""

    REGION_EVENTS = frozenset({"pt_region_created"})

    def __init__(self, device, clock=None, region0_offset: int = 96 * (1 << 20),
                 initial_pt_fill: int = 352 * 1024, journal_level: str = "full"):
        self.device = device
        self.clock = clock or (lambda: 0)
        self.journal: list[dict] = []
        self.journal_level = journal_level
        self.contexts: dict[int, CtxState] = {}
        self.free_list = FreeList()
        cap_frames = device.capacity // FRAME_BYTES
        self._cap_frames = cap_frames
        if region0_offset % FRAME_2M or region0_offset + FRAME_2M > device.capacity:
            raise ValueError("region0 offset must be 2 MiB aligned and inside capacity")
        r0_frame = region0_offset // FRAME_BYTES
        self._reserved = (r0_frame, r0_frame + FRAMES_2M)
        self._fresh_next = 0
        self._free_frames = cap_frames - FRAMES_2M
        self._aid = 0
        self.cursor = RegionCursor(fill=initial_pt_fill)
        self.regions: list[PtRegion] = [PtRegion(0, r0_frame, cursor=initial_pt_fill)]
        self.resident: OrderedDict[tuple, None] = OrderedDict()
        self._allocs_by_id: dict[int, Allocation] = {}
        self._report: TouchReport | None = None
        self._active_ctx = None
        self._evict_keepout: set[tuple] = set()

    # -- journal ----------------------------------------------------------

    def _jlog(self, event: str, ctx=None, frame=None, **detail) -> None:
        if self.journal_level != "full" and event not in self.REGION_EVENTS:
            return
        self.journal.append({"tick": self.clock(), "event": event, "ctx": ctx,
                             "frame": frame, "detail": detail})

    def log_always(self, event: str, ctx=None, frame=None, **detail) -> None:
        self.journal.append({"tick": self.clock(), "event": event, "ctx": ctx,
                             "frame": frame, "detail": detail})

    def export_journal(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.journal:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    # -- frame pool ---------------------------------------------------------

    def mem_get_info(self) -> int:
        """Free device bytes; visible to every context."""
        return self._free_frames * FRAME_BYTES

    def _fresh_take(self, n: int, align: int) -> int | None:
        start = -(-self._fresh_next // align) * align
        r0, r1 = self._reserved
        if start < r1 and start + n > r0:
            start = max(start, -(-r1 // align) * align)
        if start + n > self._cap_frames:
            return None
        # alignment gaps (minus the reserved band) drain into the free list
        gap_lo = self._fresh_next
        if gap_lo < start:
            lo, hi = gap_lo, min(start, r0)
            if hi > lo:
                self.free_list.push(lo, hi - lo)
            lo, hi = max(gap_lo, r1), start
            if hi > lo:
                self.free_list.push(lo, hi - lo)
        self._fresh_next = start + n
        return start

    def _acquire(self, n: int, align: int, ctx=None) -> int:
        got = self.free_list.take(n, align)
        if got is None:
            got = self._fresh_take(n, align)
        guard = len(self.resident) + 64
        while got is None:
            if guard <= 0 or not self.resident:
                raise DeviceCapacityError(f"cannot assemble {n} frames")
            self._evict_chunks(n)
            guard -= 1
            got = self.free_list.take(n, align)
            if got is None:
                got = self._fresh_take(n, align)
        self._free_frames -= n
        self.device.zero_frames(got, n)
        return got

    def _release(self, start: int, n: int) -> None:
        self.free_list.push(start, n)
        self._free_frames += n

    # -- LRU eviction -------------------------------------------------------

    def _lru_pick(self):
        for key in self.resident:
            if key not in self._evict_keepout:
                return key
        return None

    def _evict_chunks(self, need_frames: int) -> None:
        """Evict 64 KiB chunks from the least-recently-used group."""
        key = self._lru_pick()
        if key is None:
            raise DeviceCapacityError("nothing evictable")
        aid, widx, unit = key
        ctx = self._alloc_by_id(aid).ctx
        alloc, win = self.contexts[ctx].window_map[widx]
        if unit == -1:  # whole 2 MiB group
            if need_frames >= FRAMES_2M:
                self._evict_whole_2m(alloc, win)
            else:
                chunks = -(-need_frames // FRAMES_64K)
                self._splinter(alloc, win, list(range(chunks)), touched=False)
        elif unit == -2:  # 4 KiB tail group (one covering chunk)
            self._evict_tail(alloc, win)
        else:
            self._evict_slice(alloc, win, unit)

    def _alloc_by_id(self, aid: int) -> Allocation:
        return self._allocs_by_id[aid]

    # -- allocation ----------------------------------------------------------

    def ensure_ctx(self, ctx: int) -> CtxState:
        st = self.contexts.get(ctx)
        if st is None:
            st = CtxState(ctx)
            self.contexts[ctx] = st
        return st

    def uvm_alloc(self, ctx: int, size: int) -> int:
        """Reserve virtual space only; nothing is materialized until touched."""
        st = self.ensure_ctx(ctx)
        plans = plan_allocation(size)
        if st.va_next + len(plans) * WINDOW_BYTES >= 1 << 57:
            raise AllocationError("va space exhausted")
        va = st.va_next
        st.va_next += len(plans) * WINDOW_BYTES
        self._aid += 1
        windows = []
        for i, (kind, units) in enumerate(plans):
            windows.append(Window(index=(va >> 21) + i, alloc_id=self._aid,
                                  plan_kind=kind, plan_units=units))
        alloc = Allocation(self._aid, ctx, va, size, windows)
        st.allocs[self._aid] = alloc
        st.va_index[va] = alloc
        for w in windows:
            st.window_map[w.index] = (alloc, w)
        self._allocs_by_id[self._aid] = alloc
        self._jlog("uvm_alloc", ctx=ctx, va=va, size=size)
        return va

    def _locate(self, ctx: int, va: int, length: int) -> Allocation:
        st = self.contexts.get(ctx)
        if st is None:
            raise TouchFault(f"unknown context {ctx}")
        hit = st.window_map.get(va >> 21)
        if hit is None:
            raise TouchFault(f"va {va:#x} not allocated")
        alloc = hit[0]
        if alloc.freed or not (alloc.va <= va and va + length <= alloc.va + alloc.size):
            raise TouchFault(f"range [{va:#x}, +{length}) outside allocation")
        return alloc

    # -- region carving --------------------------------------------------------

    def _apply_cursor_events(self, events) -> int | None:
        """Realize RegionCursor events against actual regions; -> carved addr."""
        addr = None
        for ev in events:
            if ev[0] == "roll":
                self._new_region()
            elif ev[0] in ("carve", "slot"):
                addr = self.regions[-1].base + ev[1]
                self.regions[-1].cursor = self.cursor.cursor
        return addr

    def _new_region(self) -> None:
        self.regions[-1].sealed = True
        self.regions[-1].cursor = REGION_BYTES
        run = self.free_list.take(FRAMES_2M, FRAMES_2M)
        if run is None:
            run = self._fresh_take(FRAMES_2M, FRAMES_2M)
        guard = len(self.resident) + 64
        while run is None:
            if guard <= 0:
                raise DeviceCapacityError("cannot place a table region")
            self._evict_chunks(FRAMES_2M)
            guard -= 1
            run = self.free_list.take(FRAMES_2M, FRAMES_2M)
            if run is None:
                run = self._fresh_take(FRAMES_2M, FRAMES_2M)
        self._free_frames -= FRAMES_2M
        self.device.zero_frames(run, FRAMES_2M)
        region = PtRegion(len(self.regions), run)
        self.regions.append(region)
        if self._report is not None:
            self._report.pt_region_created = True
        self.log_always("pt_region_created", frame=run,
                        rid=region.rid, trigger_ctx=self._active_ctx)

    def _carve_pt(self, kind: int) -> int:
        addr = self._apply_cursor_events(self.cursor.carve(PT_BYTES[kind]))
        self._jlog("pt_page", frame=addr // FRAME_BYTES, addr=addr, kind=kind)
        return addr

    def _charge_pd0(self, st: CtxState, alloc: Allocation) -> None:
        for w in alloc.windows:
            events = self.cursor.pd0_slot()
            addr = self._apply_cursor_events(events)
            w.pd0_addr = addr
            st.ptspace.pd0_entry_addr[w.index] = addr

    def set_region_fill(self, fill: int) -> None:
        """Harness-only: pin the current region's fill (models unknown
        pre-existing directory overhead at a reproducible value)."""
        if not 0 <= fill <= REGION_BYTES:
            raise ValueError(fill)
        self.cursor.cursor = fill
        self.cursor.pd0_room = 0
        self.regions[-1].cursor = fill

    # -- materialization ---------------------------------------------------------

    def gpu_touch(self, ctx: int, va: int, length: int) -> TouchReport:
        """Fault pages of [va, va+len) onto the device, per the size plan."""
        alloc = self._locate(ctx, va, length)
        st = self.contexts[ctx]
        report = TouchReport()
        outer = self._report is None
        if outer:
            self._report = report
            self._active_ctx = ctx
        try:
            if not alloc.first_touched:
                alloc.first_touched = True
                self._charge_pd0(st, alloc)
            for win, lo, hi in self._windows_overlapped(alloc, va, length):
                self._touch_window(ctx, alloc, win, lo, hi)
                if win.cur_kind == "64k":
                    self._maybe_merge(alloc, win)
        finally:
            if outer:
                rep = self._report
                self._report = None
                self._active_ctx = None
                rep.evicted = rep.evictions > 0
        return report

    def _windows_overlapped(self, alloc: Allocation, va: int, length: int):
        end = va + length
        for win in alloc.windows:
            wbase = win.index << 21
            lo = max(va, wbase)
            hi = min(end, wbase + WINDOW_BYTES)
            if lo < hi:
                yield win, lo - wbase, hi - wbase

    def _touch_window(self, ctx, alloc, win, lo, hi) -> None:
        if win.cur_kind == "2m":
            if -1 in win.resident:
                self._touch_recency(win, -1)
                return
            self._materialize_2m(ctx, win)
            return
        if win.cur_kind == "64k":
            if not win.resident and win.plan_kind == "2m":
                # fully evicted splintered window re-materializes per plan
                win.cur_kind = "2m"
                self._materialize_2m(ctx, win)
                return
            s0 = lo // PAGE_64K
            s1 = -(-hi // PAGE_64K)
            for s in range(s0, min(s1, win.plan_units if win.plan_kind != "2m" else SLICES_PER_WINDOW)):
                if s in win.resident:
                    self._touch_recency(win, s)
                else:
                    self._materialize_slice(ctx, win, s)
            return
        # 4 KiB tail
        key = (win.alloc_id, win.index, -2)
        p0 = lo // PAGE_4K
        p1 = min(-(-hi // PAGE_4K), win.plan_units)
        fresh = False
        for p in range(p0, p1):
            if p not in win.resident:
                self._materialize_4k(ctx, win, p)
                fresh = True
        if not fresh and key in self.resident:
            self.resident.move_to_end(key)

    def _touch_recency(self, win, unit) -> None:
        key = (win.alloc_id, win.index, unit)
        if key in self.resident:
            self.resident.move_to_end(key)

    def _materialize_2m(self, ctx, win) -> None:
        run = self._acquire(FRAMES_2M, FRAMES_2M, ctx)
        content = win.host.pop(-1, None)
        if content:
            self.device.install_frames(run, content)
        elif win.host:
            # reassemble from per-slice backings of an evicted splintered window
            for s in sorted(win.host):
                self.device.install_frames(run + s * FRAMES_64K, win.host[s])
            win.host.clear()
        self.device.write_u64(win.pd0_addr, pt.make_pte(run * FRAME_BYTES))
        self.device.write_u64(win.pd0_addr + 8, 0)
        win.resident[-1] = run
        win.cur_kind = "2m"
        self.resident[(win.alloc_id, win.index, -1)] = None
        if self._report:
            self._report.materialized += 1
        self._jlog("materialize", ctx=ctx, frame=run,
                   window=win.index, kind="2m")

    def _ensure_pt(self, win, kind: int) -> None:
        if win.pt_addr is None:
            win.pt_addr = self._carve_pt(kind)
            self.device.write_u64(win.pd0_addr + 8, pt.encode_pd_pointer(win.pt_addr, kind))
            self.device.write_u64(win.pd0_addr, 0)

    def _materialize_slice(self, ctx, win, s: int) -> None:
        self._ensure_pt(win, pt.PT_KIND_64K)
        run = self._acquire(FRAMES_64K, FRAMES_64K, ctx)
        content = win.host.pop(s, None)
        if content:
            self.device.install_frames(run, content)
        self.device.write_u64(win.pt_addr + 8 * s, pt.make_pte(run * FRAME_BYTES))
        win.resident[s] = run
        self.resident[(win.alloc_id, win.index, s)] = None
        if self._report:
            self._report.materialized += 1
        self._jlog("materialize", ctx=ctx, frame=run, window=win.index,
                   kind="64k", slice=s)

    def _materialize_4k(self, ctx, win, p: int) -> None:
        self._ensure_pt(win, pt.PT_KIND_4K)
        frame = self._acquire(1, 1, ctx)
        content = win.host.pop(p, None)
        if content:
            self.device.install_frames(frame, content)
        self.device.write_u64(win.pt_addr + 8 * p, pt.make_pte(frame * FRAME_BYTES))
        win.resident[p] = frame
        self.resident[(win.alloc_id, win.index, -2)] = None
        self.resident.move_to_end((win.alloc_id, win.index, -2))
        if self._report:
            self._report.materialized += 1
        self._jlog("materialize", ctx=ctx, frame=frame, window=win.index,
                   kind="4k", page=p)

    # -- eviction / migration -------------------------------------------------

    def _count_evictions(self, n: int = 1) -> None:
        if self._report:
            self._report.evictions += n

    def _evict_whole_2m(self, alloc, win) -> None:
        run = win.resident.pop(-1)
        win.host[-1] = self.device.extract_frames(run, FRAMES_2M)
        self.device.write_u64(win.pd0_addr, 0)
        self.resident.pop((win.alloc_id, win.index, -1), None)
        self._release(run, FRAMES_2M)
        self._count_evictions()
        self._jlog("evict", ctx=alloc.ctx, frame=run, window=win.index, kind="2m")

    def _evict_slice(self, alloc, win, s: int) -> None:
        run = win.resident.pop(s)
        win.host[s] = self.device.extract_frames(run, FRAMES_64K)
        self.device.write_u64(win.pt_addr + 8 * s, 0)
        self.resident.pop((win.alloc_id, win.index, s), None)
        self._release(run, FRAMES_64K)
        self._count_evictions()
        self._jlog("evict", ctx=alloc.ctx, frame=run, window=win.index,
                   kind="64k", slice=s)
        if not win.resident:
            self._release_pt(win)

    def _evict_tail(self, alloc, win) -> None:
        for p, frame in sorted(win.resident.items()):
            win.host[p] = self.device.extract_frames(frame, 1)
            self.device.write_u64(win.pt_addr + 8 * p, 0)
            self._release(frame, 1)
        win.resident.clear()
        self.resident.pop((win.alloc_id, win.index, -2), None)
        self._count_evictions()
        self._jlog("evict", ctx=alloc.ctx, window=win.index, kind="4k")
        self._release_pt(win)

    def _release_pt(self, win) -> None:
        if win.pt_addr is None:
            return
        size = PT_BYTES[pt.PT_KIND_64K if win.cur_kind == "64k" else pt.PT_KIND_4K]
        self.device.write_phys(win.pt_addr, b"\x00" * size)
        if win.pd0_addr is not None:
            self.device.write_u64(win.pd0_addr + 8, 0)
        self._jlog("pt_page_released", addr=win.pt_addr)
        win.pt_addr = None

    def _splinter(self, alloc, win, out_slices: list[int], touched: bool) -> None:
        """Break a resident 2 MiB mapping into 64 KiB mappings, migrating
        ``out_slices`` to the host."""
        run = win.resident.pop(-1)
        self.resident.pop((win.alloc_id, win.index, -1), None)
        win.cur_kind = "64k"
        keep = [s for s in range(SLICES_PER_WINDOW) if s not in out_slices]
        for s in out_slices:
            win.host[s] = self.device.extract_frames(run + s * FRAMES_64K, FRAMES_64K)
        if keep:
            win.pt_addr = None
            self._ensure_pt(win, pt.PT_KIND_64K)
            for s in keep:
                fs = run + s * FRAMES_64K
                self.device.write_u64(win.pt_addr + 8 * s, pt.make_pte(fs * FRAME_BYTES))
                win.resident[s] = fs
        else:
            self.device.write_u64(win.pd0_addr, 0)
        keys = [(win.alloc_id, win.index, s) for s in keep]
        if touched:
            for k in keys:
                self.resident[k] = None
        else:
            for k in reversed(keys):
                self.resident[k] = None
                self.resident.move_to_end(k, last=False)
        for s in sorted(out_slices):
            self._release(run + s * FRAMES_64K, FRAMES_64K)
        self._count_evictions(len(out_slices))
        self._jlog("splinter", ctx=alloc.ctx, frame=run, window=win.index,
                   out=len(out_slices))

    def cpu_touch(self, ctx: int, va: int, length: int) -> TouchReport:
        """Migrate the covering 64 KiB slices of [va, va+len) to the host."""
        alloc = self._locate(ctx, va, length)
        if not alloc.first_touched:
            raise TouchFault("allocation never materialized")
        report = TouchReport()
        outer = self._report is None
        if outer:
            self._report = report
            self._active_ctx = ctx
        try:
            for win, lo, hi in self._windows_overlapped(alloc, va, length):
                self._cpu_touch_window(alloc, win, lo, hi)
        finally:
            if outer:
                self._report = None
                self._active_ctx = None
        return report

    def _cpu_touch_window(self, alloc, win, lo, hi) -> None:
        s0 = lo // PAGE_64K
        s1 = -(-hi // PAGE_64K)
        if win.cur_kind == "2m":
            if -1 not in win.resident:
                if -1 in win.host or win.host:
                    return  # already host
                raise TouchFault("window never materialized")
            if s0 == 0 and s1 >= SLICES_PER_WINDOW:
                self._evict_whole_2m(alloc, win)
            else:
                self._splinter(alloc, win, list(range(s0, s1)), touched=True)
            return
        if win.cur_kind == "64k":
            any_state = win.resident or win.host
            if not any_state:
                raise TouchFault("window never materialized")
            for s in range(s0, s1):
                if s in win.resident:
                    self._evict_slice(alloc, win, s)
            return
        # 4 KiB tail: the covering chunk takes every page with it
        if not (win.resident or win.host):
            raise TouchFault("window never materialized")
        if win.resident:
            self._evict_tail(alloc, win)

    # -- merge ------------------------------------------------------------------

    def _merge_eligible(self, win) -> bool:
        return (win.cur_kind == "64k"
                and len(win.resident) > MERGE_THRESHOLD_64K
                and not win.host)

    def _maybe_merge(self, alloc, win) -> list:
        if not self._merge_eligible(win):
            return []
        run = self._acquire(FRAMES_2M, FRAMES_2M, alloc.ctx)
        for s, fs in sorted(win.resident.items()):
            self.device.install_frames(run + s * FRAMES_64K,
                                       self.device.extract_frames(fs, FRAMES_64K))
        self._release_pt(win)
        self.device.write_u64(win.pd0_addr, pt.make_pte(run * FRAME_BYTES))
        for s, fs in sorted(win.resident.items()):
            self.resident.pop((win.alloc_id, win.index, s), None)
            self._release(fs, FRAMES_64K)
        win.resident.clear()
        win.resident[-1] = run
        win.cur_kind = "2m"
        self.resident[(win.alloc_id, win.index, -1)] = None
        self._jlog("merge", ctx=alloc.ctx, frame=run, window=win.index, to="2m")
        return [("2m", win.index)]

    def merge_check(self, ctx: int) -> list:
        """Coalesce any window past the merge thresholds; -> merges applied."""
        st = self.contexts.get(ctx)
        if st is None:
            return []
        merges = []
        outer = self._report is None
        if outer:
            self._report = TouchReport()
            self._active_ctx = ctx
        try:
            for alloc in list(st.allocs.values()):
                if alloc.freed:
                    continue
                for win in alloc.windows:
                    merges.extend(self._maybe_merge(alloc, win))
        finally:
            if outer:
                self._report = None
                self._active_ctx = None
        return merges

    @staticmethod
    def plan_small_page_merges(entries: list[tuple[int, int]]) -> list[tuple[int, int]]:
        """Merge policy for 4 KiB entries of one leaf table.

        ``entries``: (page index, owning allocation id) pairs of the valid
        entries.  An allocation with more than MERGE_THRESHOLD_4K valid
        entries gets its aligned, contiguous 16-page runs coalesced into
        64 KiB mappings; scattered entries from distinct allocations never
        merge.  -> list of (first page index, allocation id) merges.
        """
        by_alloc: dict[int, list[int]] = {}
        for idx, aid in entries:
            by_alloc.setdefault(aid, []).append(idx)
        merges = []
        for aid, pages in sorted(by_alloc.items()):
            if len(pages) <= MERGE_THRESHOLD_4K:
                continue
            have = set(pages)
            for base in range(0, 512, 16):
                if all(base + i in have for i in range(16)):
                    merges.append((base, aid))
        return merges

    # -- free -----------------------------------------------------------------

    def free(self, ctx: int, va: int) -> None:
        """Zero and recycle every frame of the allocation at ``va``."""
        st = self.contexts.get(ctx)
        alloc = st.va_index.get(va) if st else None
        if alloc is None:
            raise TouchFault(f"va {va:#x} is not an allocation base")
        if alloc.freed:
            raise DoubleFree(f"va {va:#x}")
        alloc.freed = True
        for win in alloc.windows:
            runs = []
            if -1 in win.resident:
                runs.append((win.resident.pop(-1), FRAMES_2M))
                self.resident.pop((win.alloc_id, win.index, -1), None)
                self.device.write_u64(win.pd0_addr, 0)
            elif win.cur_kind == "64k":
                for s, fs in sorted(win.resident.items()):
                    runs.append((fs, FRAMES_64K))
                    self.resident.pop((win.alloc_id, win.index, s), None)
                win.resident.clear()
            else:
                for p, f in sorted(win.resident.items()):
                    runs.append((f, 1))
                win.resident.clear()
                self.resident.pop((win.alloc_id, win.index, -2), None)
            self._release_pt(win)
            win.host.clear()
            if win.pd0_addr is not None:
                self.device.write_phys(win.pd0_addr, b"\x00" * PD0_ENTRY)
            for start, n in sorted(runs):
                self.device.zero_frames(start, n)
                self._release(start, n)
            st.window_map.pop(win.index, None)
        self._jlog("free", ctx=ctx, va=va)

    # -- introspection (harness / tests) ------------------------------------------

    def frame_accounting(self) -> dict:
        data = 0
        for st in self.contexts.values():
            for alloc in st.allocs.values():
                if alloc.freed:
                    continue
                for win in alloc.windows:
                    for unit, v in win.resident.items():
                        if unit == -1:
                            data += FRAMES_2M
                        elif win.cur_kind == "64k":
                            data += FRAMES_64K
                        else:
                            data += 1
        pt_frames = len(self.regions) * FRAMES_2M
        free = self._free_frames
        return {"free": free, "data": data, "pt": pt_frames,
                "total": free + data + pt_frames,
                "capacity": self._cap_frames}

    def current_region(self) -> PtRegion:
        return self.regions[-1]

    def region_density(self, region: PtRegion) -> float:
        """Fraction of the region's bytes holding valid entries."""
        base = region.base
        valid = 0
        for off in range(0, REGION_BYTES, 8):
            if self.device.read_u64(base + off) & 1:
                valid += 8
        return valid / REGION_BYTES
