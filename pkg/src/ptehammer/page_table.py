"""Translation structures: entry encodings, a finite LRU TLB, and the walk.

Entry layouts are fixed by this simulator and documented here, since the
walk decodes live device bytes (so a disturbed bit in a table page changes
real translations):

Leaf entry (8 bytes, little-endian u64)
    bit 0       valid
    bit 1       privileged
    bit 2       read-only
    bits 3-4    aperture (00/01 device memory, 10/11 system memory)
    bits 5-7    reserved, zero
    bits 8-53   frame number (physical address >> 12)

Directory entry (16 bytes = two u64 halves)
    half 0      terminal 2 MiB mapping in leaf-entry format (frame number
                512-aligned), or zero
    half 1      pointer to a last-level table: bit 0 valid, bit 1 selects
                the table kind (0 = 4 KiB table of 4 KiB pages, 1 = 256 B
                table of 64 KiB pages), bits 8-63 the table's physical
                address in 256-byte units
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

log = logging.getLogger(__name__)

PFN_LO_BIT = 8
PFN_HI_BIT = 53
PFN_MASK = (1 << 46) - 1
RESERVED_MASK = (0b111 << 5) | (((1 << 10) - 1) << 54)

APERTURE_VRAM = 0
APERTURE_VRAM_ALT = 1
APERTURE_SYS_COHERENT = 2
APERTURE_SYS = 3

PAGE_4K = 4096
PAGE_64K = 65536
PAGE_2M = 2 << 20

PT_KIND_4K = 0
PT_KIND_64K = 1


class TranslationFault(Exception):
    """No valid mapping for the requested virtual address."""


@dataclass(frozen=True)
class PteFlags:
    valid: bool = False
    privileged: bool = False
    read_only: bool = False
    aperture: int = 0

    def __post_init__(self):
        if self.aperture not in (0, 1, 2, 3):
            raise ValueError("aperture must be a 2-bit value")


@dataclass(frozen=True)
class Pte:
    flags: PteFlags
    pfn: int

    def __post_init__(self):
        if not 0 <= self.pfn < (1 << 46):
            raise ValueError("pfn out of range")


def encode_pte(p: Pte) -> int:
    f = p.flags
    return (int(f.valid)
            | int(f.privileged) << 1
            | int(f.read_only) << 2
            | f.aperture << 3
            | p.pfn << 8)


def decode_pte(raw: int) -> Pte:
    if raw & RESERVED_MASK:
        log.warning("decoding entry with nonzero reserved bits: %#x", raw)
    return Pte(
        flags=PteFlags(
            valid=bool(raw & 1),
            privileged=bool(raw >> 1 & 1),
            read_only=bool(raw >> 2 & 1),
            aperture=raw >> 3 & 0b11,
        ),
        pfn=raw >> 8 & PFN_MASK,
    )


def make_pte(phys: int, valid: bool = True, aperture: int = 0,
             privileged: bool = False, read_only: bool = False) -> int:
    return encode_pte(Pte(PteFlags(valid, privileged, read_only, aperture), phys >> 12))


def encode_pd_pointer(pt_addr: int, kind: int) -> int:
    if pt_addr % 256:
        raise ValueError("table address must be 256-byte aligned")
    return 1 | (kind & 1) << 1 | (pt_addr >> 8) << 8


def decode_pd_pointer(raw: int) -> tuple[bool, int, int]:
    """-> (valid, kind, table phys address)"""
    return bool(raw & 1), raw >> 1 & 1, (raw >> 8) << 8


def pte_bit_to_jump(pte_bit: int) -> int:
    """Physical distance a flip of the given entry bit moves the mapping.

    Frame numbers scale 4 KiB pages, so entry bit b covers address bit
    b + 4; the jump is 2**(b+4) bytes.
    """
    if not PFN_LO_BIT <= pte_bit <= PFN_HI_BIT:
        raise ValueError(f"bit {pte_bit} outside the frame-number field")
    return 1 << (pte_bit + 4)


@dataclass(frozen=True)
class Translation:
    phys: int
    space: str          # "vram" | "host"
    source: str         # "tlb" | "walk"
    page_bytes: int


class Tlb:
    """Fully-associative LRU translation cache.

    Hits return the cached mapping even when the in-memory entry has since
    changed; staleness is the point.  Keys carry the mapping's page size so
    a window that was remapped at a different granularity leaves its stale
    entries behind; probes try the smallest page first.
    """

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._entries: OrderedDict[tuple, tuple] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._entries)

    def lookup(self, ctx: int, va: int):
        for size in (PAGE_4K, PAGE_64K, PAGE_2M):
            key = (ctx, va - va % size, size)
            hit = self._entries.get(key)
            if hit is not None:
                self._entries.move_to_end(key)
                self.hits += 1
                phys_base, space = hit
                return Translation(phys_base + va % size, space, "tlb", size)
        self.misses += 1
        return None

    def insert(self, ctx: int, va_base: int, size: int, phys_base: int, space: str) -> None:
        key = (ctx, va_base, size)
        self._entries[key] = (phys_base, space)
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def contains(self, ctx: int, va: int) -> bool:
        return any((ctx, va - va % s, s) in self._entries
                   for s in (PAGE_4K, PAGE_64K, PAGE_2M))

    def entries_for(self, ctx: int) -> int:
        return sum(1 for k in self._entries if k[0] == ctx)


class PageTableSpace:
    """Per-context directory metadata.

    Upper directory levels are modelled as fixed per-context overhead, so
    the walk starts from a map of 2 MiB window -> directory-entry address;
    from there on everything is decoded from device bytes.
    """

    def __init__(self, ctx: int):
        self.ctx = ctx
        self.pd0_entry_addr: dict[int, int] = {}   # window index -> entry phys

    def entry_addr(self, window: int):
        return self.pd0_entry_addr.get(window)


def walk(device, space: PageTableSpace, va: int) -> tuple[int, str, int]:
    """Decode the translation for ``va`` from live memory bytes.

    -> (phys, space, page_bytes).  Raises TranslationFault when no valid
    entry covers the address.
    """
    entry = space.entry_addr(va >> 21)
    if entry is None:
        raise TranslationFault(f"ctx {space.ctx} va {va:#x}: no directory entry")
    half0 = device.read_u64(entry)
    if half0 & 1:
        p = decode_pte(half0)
        base = p.pfn << 12
        dest = "host" if p.flags.aperture >= 2 else "vram"
        return base + va % PAGE_2M, dest, PAGE_2M
    half1 = device.read_u64(entry + 8)
    valid, kind, pt_addr = decode_pd_pointer(half1)
    if not valid:
        raise TranslationFault(f"ctx {space.ctx} va {va:#x}: window not mapped")
    if kind == PT_KIND_64K:
        idx = (va % PAGE_2M) // PAGE_64K
        page = PAGE_64K
    else:
        idx = (va % PAGE_2M) // PAGE_4K
        page = PAGE_4K
    raw = device.read_u64(pt_addr + 8 * idx)
    p = decode_pte(raw)
    if not p.flags.valid:
        raise TranslationFault(f"ctx {space.ctx} va {va:#x}: leaf entry invalid")
    dest = "host" if p.flags.aperture >= 2 else "vram"
    return (p.pfn << 12) + va % page, dest, page
