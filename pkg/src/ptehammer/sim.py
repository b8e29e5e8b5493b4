"""Simulation instance wiring: device, host memory, allocator, TLB, clock,
and the latency model behind the eviction timing channel.

One instance is single-writer; independent instances may run in parallel
processes for seeded sweeps.  All cross-component randomness flows from one seeded
generator, so (seed, config, fault profile) fully determine a run.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .device_memory import (DeviceMemoryModel, DramGeometry, HostMemoryModel,
                            FRAME_BYTES)
from .uvm_allocator import UvmAllocator
from . import page_table as pt


@dataclass
class TimingModel:
    """Latency units for guest-visible device operations.

    Shapes matter, magnitudes are modelled: a base unit per access and a
    large additive penalty per eviction serviced, with optional uniform
    jitter to exercise threshold robustness.
    """

    base: float = 1.0
    evict_penalty: float = 99.0
    jitter: float = 0.0

    def sample(self, evictions: int, rng: random.Random) -> float:
        value = self.base + self.evict_penalty * evictions
        if self.jitter:
            value *= rng.uniform(1.0 - self.jitter, 1.0 + self.jitter)
        return value


@dataclass
class SimParams:
    capacity: int = 48 << 30
    banks: int = 16
    row_bytes: int = 2048
    seed: int = 0
    tlb_entries: int = 4096
    region0_offset: int = 96 << 20
    initial_pt_fill: int = 352 * 1024
    direction_sensitive: bool = True
    journal_level: str = "full"
    record_writes: bool = True
    timing: TimingModel = field(default_factory=TimingModel)
    iova_base: int = 0x8_0000_0000
    iova_len: int = 1 << 20


class Simulator:
    """Owns every model and the logical clock; sessions attach per context."""

    def __init__(self, params: SimParams | None = None, flip_profile=None):
        self.params = params or SimParams()
        p = self.params
        self.tick = 0
        self.rng = random.Random(p.seed)
        geometry = DramGeometry(p.capacity, p.banks, p.row_bytes)
        self.device = DeviceMemoryModel(p.capacity, geometry, clock=self.clock,
                                        direction_sensitive=p.direction_sensitive,
                                        record_writes=p.record_writes)
        if flip_profile:
            self.device.register_flip_profile(flip_profile)
        self.hostmem = HostMemoryModel(p.iova_base, p.iova_len, clock=self.clock)
        self.allocator = UvmAllocator(self.device, clock=self.clock,
                                      region0_offset=p.region0_offset,
                                      initial_pt_fill=p.initial_pt_fill,
                                      journal_level=p.journal_level)
        self.tlb = pt.Tlb(p.tlb_entries)
        self.latency_trace: list[tuple] = []   # (tick, ctx, op, latency)
        self.host_driver = None                # attached by host_driver.install()
        self._next_ctx = 1

    def clock(self) -> int:
        return self.tick

    def advance(self) -> int:
        self.tick += 1
        return self.tick

    # -- translation -----------------------------------------------------------

    def translate(self, ctx: int, va: int) -> pt.Translation:
        """TLB-first translation; misses walk live table bytes and fill the TLB."""
        hit = self.tlb.lookup(ctx, va)
        if hit is not None:
            return hit
        space = self.allocator.ensure_ctx(ctx).ptspace
        phys, dest, page = pt.walk(self.device, space, va)
        self.tlb.insert(ctx, va - va % page, page, phys - va % page, dest)
        return pt.Translation(phys, dest, "walk", page)

    def new_session(self, label: str = ""):
        from .guest import GuestSession
        ctx = self._next_ctx
        self._next_ctx += 1
        self.allocator.ensure_ctx(ctx)
        return GuestSession(self, ctx, label or f"ctx{ctx}")

    def record_latency(self, ctx: int, op: str, latency: float) -> None:
        self.latency_trace.append((self.tick, ctx, op, latency))

    def export_latency_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("tick,ctx,op,latency\n")
            for tick, ctx, op, lat in self.latency_trace:
                fh.write(f"{tick},{ctx},{op},{lat:.6g}\n")
