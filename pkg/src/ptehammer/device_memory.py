"""Simulated GPU device memory and the host memory visible to the device.

Device memory is a sparse, byte-addressable store with a DRAM geometry on
top of it.  Disturbance faults are driven by a profiled list of bit-flip
sites: hammering the two row neighbours of a profiled victim row flips the
registered bit, nothing else ever flips.  Host memory is split into the
window a device is allowed to DMA into and kernel memory it can never
reach directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

FRAME_BYTES = 4096
FRAME_2M = 2 << 20


class PhysRangeError(Exception):
    """Physical access outside the configured capacity."""


class IommuFault(Exception):
    """Device-initiated host access outside the permitted window."""


class ProfileFormatError(Exception):
    pass


@dataclass(frozen=True)
class BitFlipSite:
    """One profiled disturbance cell.

    ``to_one`` gives the flip direction: True means the cell flips 0 -> 1
    when hammered, False means 1 -> 0.
    """

    bank: int
    victim_row: int
    byte_in_row: int
    bit: int
    to_one: bool

    @property
    def pte_bit(self) -> int:
        # Bit position within the 8-byte-aligned entry covering the site.
        return (self.byte_in_row % 8) * 8 + self.bit


def load_flip_profile(path) -> list[BitFlipSite]:
    """Read a fault profile: one `bank,row,byte,bit,direction` line per site.

    All fields are decimal; direction is the value the cell flips *to*
    (1 for a 0->1 flip, 0 for 1->0).
    """
    sites = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 5:
                raise ProfileFormatError(f"line {lineno}: expected 5 fields, got {len(row)}")
            try:
                bank, vrow, byte, bit, direction = (int(x) for x in row)
            except ValueError as exc:
                raise ProfileFormatError(f"line {lineno}: {exc}") from None
            if bit not in range(8) or direction not in (0, 1):
                raise ProfileFormatError(f"line {lineno}: bad bit or direction")
            sites.append(BitFlipSite(bank, vrow, byte, bit, bool(direction)))
    return sites


def save_flip_profile(path, sites) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for s in sites:
            w.writerow([s.bank, s.victim_row, s.byte_in_row, s.bit, int(s.to_one)])


class DramGeometry:
    """Maps physical addresses onto (bank, row, column).

    Consecutive bytes stripe across columns then banks; consecutive row
    indices of a bank land in *adjacent 2 MiB frames* at the same
    intra-frame offset.  That way the two row neighbours of a victim row
    inside one 2 MiB frame live in the two surrounding 2 MiB frames,
    which is what makes double-sided hammering of a frame expressible by
    an actor that only controls the neighbouring frames.
    """

    def __init__(self, capacity: int, banks: int = 16, row_bytes: int = 2048):
        if capacity % FRAME_2M:
            raise ValueError("capacity must be a multiple of 2 MiB")
        if FRAME_2M % (banks * row_bytes):
            raise ValueError("banks*row_bytes must divide 2 MiB")
        self.capacity = capacity
        self.banks = banks
        self.row_bytes = row_bytes
        self.frames_2m = capacity // FRAME_2M
        self.slab_bytes = banks * row_bytes
        self.slabs_per_frame = FRAME_2M // self.slab_bytes
        self.rows_per_bank = self.slabs_per_frame * self.frames_2m

    def phys_to_row(self, addr: int) -> tuple[int, int, int]:
        """(bank, row, column) of a physical byte."""
        if not 0 <= addr < self.capacity:
            raise PhysRangeError(hex(addr))
        frame = addr // FRAME_2M
        within = addr % FRAME_2M
        slab, lane = divmod(within, self.slab_bytes)
        bank, col = divmod(lane, self.row_bytes)
        return bank, slab * self.frames_2m + frame, col

    def row_to_phys(self, bank: int, row: int, col: int = 0) -> int:
        slab, frame = divmod(row, self.frames_2m)
        return frame * FRAME_2M + slab * self.slab_bytes + bank * self.row_bytes + col

    def frame_rows(self, frame_2m: int) -> list[int]:
        """Row indices (identical in every bank) covered by a 2 MiB frame."""
        return [s * self.frames_2m + frame_2m for s in range(self.slabs_per_frame)]

    def site_phys(self, site: BitFlipSite) -> int:
        return self.row_to_phys(site.bank, site.victim_row, site.byte_in_row)

    def site_region_offset(self, site: BitFlipSite) -> int:
        """Byte offset of the site within its containing 2 MiB frame."""
        return self.site_phys(site) % FRAME_2M

    def site_frame(self, site: BitFlipSite) -> int:
        return self.site_phys(site) // FRAME_2M


def flip_eligibility(site: BitFlipSite, mem_limit: int) -> tuple[bool, str]:
    """Whether a profiled flip can redirect a translation usefully.

    A useful flip must land in the frame-number field of an 8-byte entry
    and move the target by at least one 2 MiB frame but less than the
    memory limit.
    """
    from .page_table import PFN_LO_BIT, PFN_HI_BIT, pte_bit_to_jump

    b = site.pte_bit
    if not PFN_LO_BIT <= b <= PFN_HI_BIT:
        return False, f"pte bit {b} outside the frame-number field"
    jump = pte_bit_to_jump(b)
    if jump < FRAME_2M:
        return False, f"jump {jump} below 2 MiB"
    if jump >= mem_limit:
        return False, f"jump {jump} exceeds memory limit"
    return True, "ok"


def eligible_flips(profile: list[BitFlipSite], mem_limit: int) -> list[BitFlipSite]:
    """Filter a profile down to sites usable for translation tampering."""
    if not profile:
        raise ValueError("empty fault profile")
    return [s for s in profile if flip_eligibility(s, mem_limit)[0]]


@dataclass(frozen=True)
class AppliedFlip:
    site: BitFlipSite
    addr: int
    before: int
    after: int


class DeviceMemoryModel:
    """Sparse simulated VRAM with a registered-site fault model.

    Backing store is a dict of 4 KiB frames, each a dict of 8-byte words,
    so a mostly-untouched large address space costs nothing.  Every
    mutation source is journaled: plain writes (optional, they dominate
    large runs), zeroing, and applied flips (always).
    """

    def __init__(self, capacity: int, geometry: DramGeometry | None = None,
                 clock=None, direction_sensitive: bool = True,
                 record_writes: bool = True):
        self.capacity = capacity
        self.geometry = geometry or DramGeometry(capacity)
        if self.geometry.capacity != capacity:
            raise ValueError("geometry capacity mismatch")
        self._frames: dict[int, dict[int, int]] = {}
        self._sites: dict[tuple[int, int], list[BitFlipSite]] = {}
        self.journal: list[tuple] = []
        self.clock = clock or (lambda: 0)
        self.direction_sensitive = direction_sensitive
        self.record_writes = record_writes

    # -- fault profile ----------------------------------------------------

    def register_flip_profile(self, sites) -> None:
        for s in sites:
            if s.byte_in_row >= self.geometry.row_bytes:
                raise ValueError("byte_in_row beyond row size")
            self.geometry.site_phys(s)  # range check
            self._sites.setdefault((s.bank, s.victim_row), []).append(s)

    @property
    def flip_profile(self) -> list[BitFlipSite]:
        return [s for group in self._sites.values() for s in group]

    # -- raw access -------------------------------------------------------

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.capacity:
            raise PhysRangeError(f"[{addr:#x}, +{length})")

    def read_u64(self, addr: int) -> int:
        self._check(addr, 8)
        frame, off = divmod(addr, FRAME_BYTES)
        words = self._frames.get(frame)
        if words is None:
            return 0
        if off % 8 == 0:
            return words.get(off, 0)
        return int.from_bytes(self.read_phys(addr, 8), "little")

    def write_u64(self, addr: int, value: int) -> None:
        self._check(addr, 8)
        frame, off = divmod(addr, FRAME_BYTES)
        if off % 8:
            self.write_phys(addr, (value & (2**64 - 1)).to_bytes(8, "little"))
            return
        self._frames.setdefault(frame, {})[off] = value & (2**64 - 1)
        if self.record_writes:
            self.journal.append((self.clock(), "write", addr, 8))

    def read_phys(self, addr: int, length: int) -> bytes:
        """Ground-truth bytes; no state change."""
        self._check(addr, length)
        out = bytearray(length)
        pos = 0
        while pos < length:
            a = addr + pos
            frame, off = divmod(a, FRAME_BYTES)
            take = min(length - pos, FRAME_BYTES - off)
            words = self._frames.get(frame)
            if words:
                lo = off - off % 8
                for woff in range(lo, off + take, 8):
                    w = words.get(woff, 0)
                    if w:
                        chunk = w.to_bytes(8, "little")
                        s = max(woff, off)
                        e = min(woff + 8, off + take)
                        out[pos + (s - off):pos + (e - off)] = chunk[s - woff:e - woff]
            pos += take
        return bytes(out)

    def write_phys(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        pos = 0
        length = len(data)
        while pos < length:
            a = addr + pos
            frame, off = divmod(a, FRAME_BYTES)
            take = min(length - pos, FRAME_BYTES - off)
            words = self._frames.setdefault(frame, {})
            lo = off - off % 8
            for woff in range(lo, off + take, 8):
                s = max(woff, off)
                e = min(woff + 8, off + take)
                cur = words.get(woff, 0).to_bytes(8, "little")
                merged = cur[:s - woff] + data[pos + s - off:pos + e - off] + cur[e - woff:]
                v = int.from_bytes(merged, "little")
                if v:
                    words[woff] = v
                else:
                    words.pop(woff, None)
            pos += take
        if self.record_writes:
            self.journal.append((self.clock(), "write", addr, len(data)))

    def zero_frames(self, start_frame: int, n_frames: int) -> None:
        """Drop frame contents (recycled frames are handed out zeroed)."""
        self._check(start_frame * FRAME_BYTES, n_frames * FRAME_BYTES)
        for f in range(start_frame, start_frame + n_frames):
            self._frames.pop(f, None)
        self.journal.append((self.clock(), "zero", start_frame, n_frames))

    def extract_frames(self, start_frame: int, n_frames: int) -> dict[int, dict[int, int]]:
        """Copy-out frame contents (migration source); frames keep their bytes."""
        out = {}
        for f in range(start_frame, start_frame + n_frames):
            words = self._frames.get(f)
            if words:
                out[f - start_frame] = dict(words)
        return out

    def install_frames(self, start_frame: int, content: dict[int, dict[int, int]]) -> None:
        for rel, words in content.items():
            self._frames[start_frame + rel] = dict(words)
        if self.record_writes and content:
            self.journal.append((self.clock(), "install", start_frame, len(content)))

    # -- fault injection ----------------------------------------------------

    def hammer(self, bank: int, aggressor_rows) -> list[AppliedFlip]:
        """Apply every registered flip double-sided-adjacent to the aggressors.

        A site fires only when both row neighbours of its victim row are in
        the aggressor set and (in direction-sensitive mode) the cell
        currently holds the source value of the profiled flip direction.
        Deterministic: no randomness, sites visited in sorted order.
        """
        rows = set(aggressor_rows)
        max_row = self.geometry.rows_per_bank
        for r in rows:
            if not 0 <= r < max_row:
                raise ValueError(f"row {r} outside bank")
        victims = sorted({r + 1 for r in rows} & {r - 1 for r in rows})
        applied = []
        for v in victims:
            for site in self._sites.get((bank, v), []):
                addr = self.geometry.site_phys(site)
                word_addr = addr - addr % 8
                cur = self.read_u64(word_addr)
                bitpos = (addr % 8) * 8 + site.bit
                bit = (cur >> bitpos) & 1
                if self.direction_sensitive and bit == int(site.to_one):
                    continue  # cell already holds the flip target
                new = cur | (1 << bitpos) if site.to_one else cur & ~(1 << bitpos)
                if not self.direction_sensitive:
                    new = cur ^ (1 << bitpos)
                if new == cur:
                    continue
                frame, off = divmod(word_addr, FRAME_BYTES)
                words = self._frames.setdefault(frame, {})
                if new:
                    words[off] = new
                else:
                    words.pop(off, None)
                flip = AppliedFlip(site, addr, cur, new)
                applied.append(flip)
                self.journal.append((self.clock(), "flip", addr, site.bank, site.victim_row,
                                     bitpos, cur, new))
        return applied

    def flip_events(self) -> list[tuple]:
        return [e for e in self.journal if e[1] == "flip"]


@dataclass(frozen=True)
class GpuDmaCapability:
    """Token standing in for 'this device issues DMA on the attacker's behalf'.

    Only the attack engine mints one, and only after its read/write handle
    passed a self-test; host-side accesses are refused without it.
    """

    ctx: int
    note: str = "compromised-gpu"


class HostMemoryModel:
    """Host RAM as the device sees it: an IOMMU window plus kernel memory.

    Device-initiated accesses succeed iff they fall entirely inside
    [iova_base, iova_base+iova_len); partial overlap writes nothing.
    Kernel memory is only reachable through driver code paths.
    """

    def __init__(self, iova_base: int = 0x8_0000_0000, iova_len: int = 1 << 20,
                 clock=None):
        self.iova_base = iova_base
        self.iova_len = iova_len
        self._iova: dict[int, int] = {}
        self._kernel: dict[int, int] = {}
        self.kernel_ranges: list[tuple[int, int]] = []
        self.journal: list[tuple] = []
        self.clock = clock or (lambda: 0)

    # window-relative helpers used by the driver model
    def add_kernel_range(self, start: int, length: int) -> None:
        self.kernel_ranges.append((start, start + length))

    def kernel_addr_valid(self, addr: int, length: int) -> bool:
        return any(s <= addr and addr + length <= e for s, e in self.kernel_ranges)

    @staticmethod
    def _store_read(store: dict[int, int], addr: int, length: int) -> bytes:
        out = bytearray(length)
        lo = addr - addr % 8
        for woff in range(lo, addr + length, 8):
            w = store.get(woff, 0)
            if w:
                chunk = w.to_bytes(8, "little")
                s = max(woff, addr)
                e = min(woff + 8, addr + length)
                out[s - addr:e - addr] = chunk[s - woff:e - woff]
        return bytes(out)

    @staticmethod
    def _store_write(store: dict[int, int], addr: int, data: bytes) -> None:
        lo = addr - addr % 8
        for woff in range(lo, addr + len(data), 8):
            s = max(woff, addr)
            e = min(woff + 8, addr + len(data))
            cur = store.get(woff, 0).to_bytes(8, "little")
            merged = cur[:s - woff] + data[s - addr:e - addr] + cur[e - woff:]
            v = int.from_bytes(merged, "little")
            if v:
                store[woff] = v
            else:
                store.pop(woff, None)

    # -- device-side (IOMMU-gated) ------------------------------------------

    def _window_ok(self, addr: int, length: int) -> bool:
        return self.iova_base <= addr and addr + length <= self.iova_base + self.iova_len

    def dma_write_host(self, addr: int, data: bytes, capability: GpuDmaCapability) -> None:
        """All-or-nothing device write into the IOVA window."""
        if not isinstance(capability, GpuDmaCapability):
            raise IommuFault("no device capability")
        ok = self._window_ok(addr, len(data))
        self.journal.append((self.clock(), "dma_write", addr, len(data), ok))
        if not ok:
            raise IommuFault(f"write [{addr:#x}, +{len(data)}) outside IOVA window")
        self._store_write(self._iova, addr, data)

    def dma_read_host(self, addr: int, length: int, capability: GpuDmaCapability) -> bytes:
        if not isinstance(capability, GpuDmaCapability):
            raise IommuFault("no device capability")
        ok = self._window_ok(addr, length)
        self.journal.append((self.clock(), "dma_read", addr, length, ok))
        if not ok:
            raise IommuFault(f"read [{addr:#x}, +{length}) outside IOVA window")
        return self._store_read(self._iova, addr, length)

    # -- host-side (driver / harness) -----------------------------------------

    def iova_write(self, addr: int, data: bytes) -> None:
        if not self._window_ok(addr, len(data)):
            raise PhysRangeError(hex(addr))
        self._store_write(self._iova, addr, data)

    def iova_read(self, addr: int, length: int) -> bytes:
        if not self._window_ok(addr, length):
            raise PhysRangeError(hex(addr))
        return self._store_read(self._iova, addr, length)

    def kernel_write(self, addr: int, data: bytes) -> None:
        self._store_write(self._kernel, addr, data)

    def kernel_read(self, addr: int, length: int) -> bytes:
        return self._store_read(self._kernel, addr, length)
