"""ptehammer: a desk-scale simulator of a GPU memory subsystem and the
page-table-tampering attack chain that runs on it."""

from .device_memory import (BitFlipSite, DeviceMemoryModel, DramGeometry,
                            GpuDmaCapability, HostMemoryModel, IommuFault,
                            PhysRangeError, eligible_flips, flip_eligibility,
                            load_flip_profile, save_flip_profile)
from .page_table import (Pte, PteFlags, Tlb, TranslationFault, decode_pte,
                         encode_pte, pte_bit_to_jump)
from .sim import SimParams, Simulator, TimingModel
from .uvm_allocator import (AllocationError, DoubleFree, TouchFault,
                            UvmAllocator, allocations_to_next_pt_region)

__version__ = "0.1.0"
