//! Virtual memory layout, VMAs and per-node radix page tables.

mod layout;
mod pagetable;
mod space;
mod vma;

pub use layout::{AddressLayout, SplitAddress, Vpn, VpnRange};
pub use pagetable::{FrameId, LogicalPage, PageArena, PageId, PageTablePage, Pte};
pub use space::{ProcessId, ProcessSpace, ThreadId, ThreadPlacement};
pub use vma::{Prot, Vma, VmaId, VmaSet};
