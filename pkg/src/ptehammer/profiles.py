"""Synthetic fault-profile construction.

The profiling campaign itself is out of scope: runs take a given list of
flip sites as input.  This module builds plausible profiles from a small
catalog of (bank, byte-in-entry, bit) templates whose derived entry bits
span jumps from 16 MiB to 32 GiB, placing each victim cell at a concrete
row of the configured geometry.
"""

from __future__ import annotations

from .device_memory import BitFlipSite, DramGeometry, FRAME_2M
from .uvm_allocator import RegionCursor

# (bank, byte location in the 8-byte entry, bit location); entry bit =
# byte*8 + bit, jump = 2**(entry_bit + 4)
SITE_CATALOG = [
    (0, 2, 4),   # entry bit 20, 16 MiB
    (1, 2, 6),   # entry bit 22, 64 MiB
    (2, 2, 4),   # entry bit 20, 16 MiB
    (2, 3, 2),   # entry bit 26, 1 GiB
    (3, 2, 4),   # entry bit 20, 16 MiB
    (4, 3, 4),   # entry bit 28, 4 GiB
    (5, 3, 0),   # entry bit 24, 256 MiB
    (5, 3, 1),   # entry bit 25, 512 MiB
    (5, 3, 7),   # entry bit 31, 32 GiB
]


def packed_entry_offsets(limit: int = 1 << 21, max_entries: int = 4096) -> list[int]:
    """Region offsets of leaf-table entries under the packing fill."""
    cur = RegionCursor(0)
    offs = []
    while not cur.regions_rolled and len(offs) < max_entries:
        events = [e for e in cur.splinter_alloc() if e[0] == "carve"]
        pt_off = events[-1][1]
        if cur.regions_rolled:
            break
        offs.extend(pt_off + 8 * e for e in range(31))
    return [o for o in offs if o < limit]


def synthetic_flip_profile(geometry: DramGeometry, count: int = 9,
                           frame_span: tuple[float, float] = (0.45, 0.7)
                           ) -> list[BitFlipSite]:
    """Place catalog sites at concrete victim rows for this geometry.

    Victim frames are spread over the middle of the address space so that
    both the frame's neighbours and typical jump destinations stay inside
    capacity; the in-row byte is chosen so the covering 8-byte entry lands
    on a leaf-table slot of a packed region.
    """
    entry_offsets = packed_entry_offsets()
    nf = geometry.frames_2m
    lo = int(nf * frame_span[0])
    hi = max(lo + 1, int(nf * frame_span[1]))
    sites = []
    for i in range(count):
        bank, byte_loc, bit = SITE_CATALOG[i % len(SITE_CATALOG)]
        frame = lo + (i * 7919) % (hi - lo)
        # pick a packed-region entry offset that matches this bank and byte
        placed = False
        for o_entry in entry_offsets[i * 17:] + entry_offsets[:i * 17]:
            o_site = o_entry + byte_loc
            lane = o_site % geometry.slab_bytes
            if lane // geometry.row_bytes != bank:
                continue
            slab = o_site // geometry.slab_bytes
            row = slab * nf + frame
            sites.append(BitFlipSite(bank=bank, victim_row=row,
                                     byte_in_row=lane % geometry.row_bytes,
                                     bit=bit, to_one=bool(i % 2)))
            placed = True
            break
        if not placed:
            raise RuntimeError("no packed entry offset matches the catalog bank")
    return sites
