"""The confined per-context surface a user program gets.

Every interaction goes through a GuestSession method, is appended to the
session's audit log with its modelled latency, and reveals only what a
real user-level process could observe: its own virtual addresses, wall
clock latencies, global free-memory counts, and (per the threat model)
the reverse-engineered address-to-row mapping of its *own* resident
pages.  Reads and writes run through the TLB-aware translation path, so
stale or corrupted table entries misdirect them exactly as they would on
hardware.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import page_table as pt
from .device_memory import PhysRangeError, GpuDmaCapability
from .uvm_allocator import TouchFault, PAGE_64K, PAGE_4K, PAGE_2M, FRAMES_64K
from .device_memory import FRAME_BYTES


class AuditViolation(Exception):
    """A session tried to reach outside its confinement."""


class DeviceFault(Exception):
    """Translation or physical fault surfaced to the guest."""


class ThrashIncomplete(Exception):
    pass


@dataclass(frozen=True)
class LatencySample:
    value: float

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class RowInfo:
    """Placement knowledge for one of the session's own resident pages."""
    frame_2m: int
    phys_base: int
    rows: tuple[int, ...]


class GuestSession:
    def __init__(self, sim, ctx: int, label: str):
        self.sim = sim
        self.ctx = ctx
        self.label = label
        self.audit: list[tuple] = []
        self.dma_capability: GpuDmaCapability | None = None

    # -- bookkeeping -------------------------------------------------------

    def _log(self, op: str, args: tuple, evictions: int = 0,
             gpu: bool = True) -> LatencySample:
        lat = self.sim.params.timing.sample(evictions if gpu else 0, self.sim.rng)
        self.audit.append((op, args, lat))
        self.sim.record_latency(self.ctx, op, lat)
        return LatencySample(lat)

    def total_latency(self) -> float:
        return sum(row[2] for row in self.audit)

    # -- allocation lifecycle ------------------------------------------------

    def alloc(self, size: int) -> int:
        self.sim.advance()
        va = self.sim.allocator.uvm_alloc(self.ctx, size)
        self._log("alloc", (size,), gpu=False)
        return va

    def free(self, va: int) -> None:
        self.sim.advance()
        self.sim.allocator.free(self.ctx, va)
        self._log("free", (va,), gpu=False)

    def timed_touch(self, va: int, length: int) -> LatencySample:
        """Touch from the device side and observe the access latency."""
        self.sim.advance()
        report = self.sim.allocator.gpu_touch(self.ctx, va, length)
        return self._log("timed_touch", (va, length), report.evictions)

    def cpu_touch(self, va: int, length: int) -> None:
        """Touch from the host side, migrating the covering 64 KiB slices."""
        self.sim.advance()
        self.sim.allocator.cpu_touch(self.ctx, va, length)
        self._log("cpu_touch", (va, length), gpu=False)

    def mem_get_info(self) -> int:
        self.sim.advance()
        free = self.sim.allocator.mem_get_info()
        self._log("mem_get_info", (), gpu=False)
        return free

    def merge_check(self) -> list:
        self.sim.advance()
        merges = self.sim.allocator.merge_check(self.ctx)
        self._log("merge_check", (), gpu=False)
        return merges

    # -- data path (TLB-aware) ---------------------------------------------

    def _own(self, va: int, length: int):
        try:
            return self.sim.allocator._locate(self.ctx, va, length)
        except TouchFault as exc:
            raise AuditViolation(str(exc)) from None

    def _segments(self, va: int, length: int):
        pos = va
        end = va + length
        while pos < end:
            tr = self.sim.translate(self.ctx, pos)
            take = min(end - pos, tr.page_bytes - pos % tr.page_bytes)
            yield pos, tr, take
            pos += take

    def read_data(self, va: int, length: int) -> bytes:
        """Read through translation; misdirected mappings read wherever the
        live (or cached) entry points."""
        self.sim.advance()
        self._own(va, length)
        out = bytearray()
        try:
            for _, tr, take in self._segments(va, length):
                if tr.space == "host":
                    out += self._host_read(tr.phys, take)
                else:
                    out += self.sim.device.read_phys(tr.phys, take)
        except (pt.TranslationFault, PhysRangeError) as exc:
            self._log("read_data", (va, length))
            raise DeviceFault(str(exc)) from None
        self._log("read_data", (va, length))
        return bytes(out)

    def write_data(self, va: int, data: bytes) -> None:
        self.sim.advance()
        self._own(va, len(data))
        pos = 0
        try:
            for _, tr, take in self._segments(va, len(data)):
                if tr.space == "host":
                    self._host_write(tr.phys, data[pos:pos + take])
                else:
                    self.sim.device.write_phys(tr.phys, data[pos:pos + take])
                pos += take
        except (pt.TranslationFault, PhysRangeError) as exc:
            self._log("write_data", (va, len(data)))
            raise DeviceFault(str(exc)) from None
        self._log("write_data", (va, len(data)))

    def _host_read(self, addr: int, n: int) -> bytes:
        if self.dma_capability is None:
            raise DeviceFault("system-memory access without device capability")
        return self.sim.hostmem.dma_read_host(addr, n, self.dma_capability)

    def _host_write(self, addr: int, data: bytes) -> None:
        if self.dma_capability is None:
            raise DeviceFault("system-memory access without device capability")
        self.sim.hostmem.dma_write_host(addr, data, self.dma_capability)

    # -- threat-model capabilities -------------------------------------------

    def _placement(self, va: int) -> RowInfo:
        self._own(va, 1)
        st = self.sim.allocator.contexts[self.ctx]
        _, win = st.window_map[va >> 21]
        off = va - (win.index << 21)
        phys = None
        if -1 in win.resident:
            phys = win.resident[-1] * FRAME_BYTES + off
        elif win.cur_kind == "64k":
            s = off // PAGE_64K
            if s in win.resident:
                phys = win.resident[s] * FRAME_BYTES + off % PAGE_64K
        else:
            p = off // PAGE_4K
            if p in win.resident:
                phys = win.resident[p] * FRAME_BYTES + off % PAGE_4K
        if phys is None:
            raise AuditViolation(f"va {va:#x} is not resident")
        frame = phys // PAGE_2M
        return RowInfo(frame_2m=frame, phys_base=phys,
                       rows=tuple(self.sim.device.geometry.frame_rows(frame)))

    def resolve_rows(self, va: int) -> RowInfo:
        """Row placement of one of the session's own resident pages
        (a user can recover this mapping for memory it controls)."""
        self.sim.advance()
        info = self._placement(va)
        self._log("resolve_rows", (va,), gpu=False)
        return info

    def hammer_own(self, va_set) -> None:
        """Hammer the rows of the session's own pages; disturbance lands
        wherever profiled cells are double-sided adjacent, including table
        frames the session cannot address.  Nothing is returned."""
        self.sim.advance()
        rows: set[int] = set()
        try:
            for va in va_set:
                rows.update(self._placement(va).rows)
        finally:
            self._log("hammer_own", tuple(sorted(va_set)))
        for bank in range(self.sim.device.geometry.banks):
            self.sim.device.hammer(bank, rows)

    def tlb_thrash(self) -> None:
        """Stream enough of the session's own small resident pages to push
        every earlier translation out of the TLB."""
        self.sim.advance()
        cap = self.sim.tlb.capacity
        if len(self.sim.tlb) == 0:
            self._log("tlb_thrash", (0,))
            return
        units = []
        st = self.sim.allocator.contexts[self.ctx]
        for alloc in st.allocs.values():
            if alloc.freed:
                continue
            for win in alloc.windows:
                base = win.index << 21
                if win.cur_kind == "64k":
                    units.extend(base + s * PAGE_64K for s in win.resident)
                elif win.cur_kind == "4k":
                    units.extend(base + p * PAGE_4K for p in win.resident)
                if len(units) > cap:
                    break
            if len(units) > cap:
                break
        if len(units) < cap:
            self._log("tlb_thrash", ())
            raise ThrashIncomplete(f"only {len(units)} small pages resident, "
                                   f"need {cap}")
        for va in units:
            self.sim.translate(self.ctx, va)
        self._log("tlb_thrash", (len(units),))

    def device_attribute_query(self) -> None:
        """A trivial driver round-trip; its reply lands in the host-side
        message queue (one more produced message)."""
        self.sim.advance()
        if self.sim.host_driver is not None:
            self.sim.host_driver.gsp_enqueue_attribute_reply()
        self._log("device_attribute_query", (), gpu=False)

    # -- DMA (requires the compromised-device capability) ----------------------

    def dma_read_host(self, addr: int, length: int) -> bytes:
        self.sim.advance()
        data = self._host_read(addr, length)
        self._log("dma_read_host", (addr, length), gpu=False)
        return data

    def dma_write_host(self, addr: int, data: bytes) -> None:
        self.sim.advance()
        self._host_write(addr, data)
        self._log("dma_write_host", (addr, len(data)), gpu=False)
