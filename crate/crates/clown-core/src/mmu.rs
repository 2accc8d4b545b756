//! Logical-to-physical address translation: segmentation through eight
//! one-word descriptors, single-level paging with a 16-entry direct-mapped
//! TLB, and independent on/off switches for each mechanism.
//!
//! A segment descriptor packs into one word:
//!
//! ```text
//! bits 31-10  base/8   (bases are 8-word aligned)
//! bits 9-2    limit    in 1024-word units
//! bit 1       writable
//! bit 0       0 = valid descriptor (1 selects the direct-address form
//!             when the same word sits in an interrupt-vector entry)
//! ```
//!
//! A page-table entry:
//!
//! ```text
//! bits 31-8   frame number (frames are one 128-word page)
//! bit 4       dirty
//! bit 3       accessed
//! bit 2       user-accessible
//! bit 1       writable
//! bit 0       present
//! ```
//!
//! The page table is a single-level linear array of one word per page,
//! based at the physical address held in %r14. Walk reads and
//! accessed/dirty updates go through the cache and therefore count as bus
//! traffic for DMA arbitration.

use crate::memory::{MemorySystem, SimFault};
use crate::word::{Word, PAGE_WORDS};

pub const TLB_ENTRIES: usize = 16;

/// The descriptor %s0 holds after reset: base 0, maximum limit, writable.
/// With segmentation off it is never consulted; it exists so that turning
/// segmentation on without loading %s0 still yields one big segment.
pub const IMPLICIT_SEGMENT: Word = (0xFF << 2) | 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentDescriptor(pub Word);

impl SegmentDescriptor {
    pub fn from_parts(base: u32, limit_1k: u32, writable: bool) -> SegmentDescriptor {
        debug_assert_eq!(base % 8, 0);
        debug_assert!(limit_1k <= 0xFF);
        SegmentDescriptor(
            (((base / 8) << 10) | (limit_1k << 2) | ((writable as u32) << 1)) as Word,
        )
    }

    pub fn base(self) -> u32 {
        ((self.0 as u32) >> 10) * 8
    }

    /// Limit in words.
    pub fn limit_words(self) -> u32 {
        (((self.0 as u32) >> 2) & 0xFF) * 1024
    }

    pub fn writable(self) -> bool {
        (self.0 as u32) & 0b10 != 0
    }

    /// Descriptors are the mode-0 form: bit 0 clear.
    pub fn valid(self) -> bool {
        (self.0 as u32) & 1 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry(pub Word);

impl PageTableEntry {
    pub fn from_parts(frame: u32, present: bool, writable: bool, user: bool) -> PageTableEntry {
        PageTableEntry(
            ((frame << 8) | ((user as u32) << 2) | ((writable as u32) << 1) | present as u32)
                as Word,
        )
    }

    pub fn frame(self) -> u32 {
        (self.0 as u32) >> 8
    }
    pub fn present(self) -> bool {
        self.0 & 1 != 0
    }
    pub fn writable(self) -> bool {
        self.0 & 0b10 != 0
    }
    pub fn user(self) -> bool {
        self.0 & 0b100 != 0
    }
    pub fn accessed(self) -> bool {
        self.0 & 0b1000 != 0
    }
    pub fn dirty(self) -> bool {
        self.0 & 0b10000 != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Fetch,
}

/// Translation failure, by fault class. The CPU maps these onto
/// exceptions 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslateFault {
    /// Invalid descriptor, limit exceeded, or write to a read-only segment.
    Segment { seg: usize, offset: u32 },
    /// Missing, privileged, or read-only page; `linear` is delivered
    /// to %r15 by the fault path.
    Page { linear: u32 },
}

#[derive(Debug, Clone, Copy, Default)]
struct TlbEntry {
    valid: bool,
    vpn: u32,
    frame: u32,
    writable: bool,
    user: bool,
    /// Whether the in-memory PTE is already marked dirty; lets a write hit
    /// update the dirty bit exactly once.
    dirty_seen: bool,
}

#[derive(Debug, Default)]
pub struct Mmu {
    pub paging_on: bool,
    pub segmentation_on: bool,
    tlb: [TlbEntry; TLB_ENTRIES],
    /// Number of page-table walks performed (TLB misses).
    pub walk_count: u64,
}

/// Outcome of a translation: either a physical address or a CPU-visible
/// fault. Simulator faults (page table outside RAM) propagate separately.
pub type TranslateResult = Result<Result<u32, TranslateFault>, SimFault>;

impl Mmu {
    pub fn new() -> Mmu {
        Mmu::default()
    }

    pub fn tlb_invalidate(&mut self) {
        self.tlb = [TlbEntry::default(); TLB_ENTRIES];
    }

    pub fn set_paging(&mut self, on: bool) {
        // deliberately does not flush the TLB; software must tlbinv
        self.paging_on = on;
    }

    pub fn set_segmentation(&mut self, on: bool) {
        self.segmentation_on = on;
    }

    /// Translate `offset` within segment register `seg` into a physical
    /// address, applying whichever of segmentation and paging is enabled.
    /// `cpl` is the current privilege level (0 kernel, 1 user) and
    /// `page_table_base` the physical word address held in %r14.
    pub fn translate(
        &mut self,
        mem: &mut MemorySystem,
        segs: &[Word; 8],
        page_table_base: Word,
        offset: u32,
        seg: usize,
        access: Access,
        cpl: u8,
    ) -> TranslateResult {
        let linear = if self.segmentation_on {
            let d = SegmentDescriptor(segs[seg]);
            if !d.valid()
                || offset >= d.limit_words()
                || (access == Access::Write && !d.writable())
            {
                return Ok(Err(TranslateFault::Segment { seg, offset }));
            }
            d.base().wrapping_add(offset)
        } else {
            offset
        };
        if !self.paging_on {
            return Ok(Ok(linear));
        }
        let vpn = linear / PAGE_WORDS;
        let page_off = linear % PAGE_WORDS;
        let slot = (vpn as usize) % TLB_ENTRIES;
        let e = self.tlb[slot];
        if e.valid && e.vpn == vpn {
            if (cpl == 1 && !e.user) || (access == Access::Write && !e.writable) {
                return Ok(Err(TranslateFault::Page { linear }));
            }
            if access == Access::Write && !e.dirty_seen {
                // first write through this TLB entry: set the PTE dirty bit
                let pte_addr = (page_table_base as u32).wrapping_add(vpn);
                let pte = PageTableEntry(mem.cpu_read(pte_addr)?);
                mem.cpu_write(pte_addr, pte.0 | 0b11000)?;
                self.tlb[slot].dirty_seen = true;
            }
            return Ok(Ok(e.frame * PAGE_WORDS + page_off));
        }
        // walk
        self.walk_count += 1;
        let pte_addr = (page_table_base as u32).wrapping_add(vpn);
        let pte = PageTableEntry(mem.cpu_read(pte_addr)?);
        if !pte.present()
            || (cpl == 1 && !pte.user())
            || (access == Access::Write && !pte.writable())
        {
            return Ok(Err(TranslateFault::Page { linear }));
        }
        let mut updated = pte.0 | 0b1000; // accessed
        if access == Access::Write {
            updated |= 0b10000; // dirty
        }
        if updated != pte.0 {
            mem.cpu_write(pte_addr, updated)?;
        }
        self.tlb[slot] = TlbEntry {
            valid: true,
            vpn,
            frame: pte.frame(),
            writable: pte.writable(),
            user: pte.user(),
            dirty_seen: PageTableEntry(updated).dirty(),
        };
        Ok(Ok(pte.frame() * PAGE_WORDS + page_off))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem() -> MemorySystem {
        MemorySystem::new(1 << 16)
    }

    #[test]
    fn identity_when_both_off() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        let segs = [0; 8];
        assert_eq!(
            mmu.translate(&mut m, &segs, 0, 0x1234, 0, Access::Read, 0).unwrap(),
            Ok(0x1234)
        );
    }

    #[test]
    fn segmentation_base_and_limit() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_segmentation(true);
        let mut segs = [0; 8];
        segs[1] = SegmentDescriptor::from_parts(0x1000, 1, true).0;
        assert_eq!(
            mmu.translate(&mut m, &segs, 0, 0x10, 1, Access::Read, 0).unwrap(),
            Ok(0x1010)
        );
        assert_eq!(
            mmu.translate(&mut m, &segs, 0, 0x400, 1, Access::Read, 0).unwrap(),
            Err(TranslateFault::Segment { seg: 1, offset: 0x400 })
        );
    }

    #[test]
    fn readonly_segment_rejects_write() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_segmentation(true);
        let mut segs = [0; 8];
        segs[2] = SegmentDescriptor::from_parts(0, 1, false).0;
        assert!(matches!(
            mmu.translate(&mut m, &segs, 0, 4, 2, Access::Write, 0).unwrap(),
            Err(TranslateFault::Segment { .. })
        ));
        assert_eq!(mmu.translate(&mut m, &segs, 0, 4, 2, Access::Read, 0).unwrap(), Ok(4));
    }

    #[test]
    fn absent_page_faults_with_linear() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_paging(true);
        let segs = [0; 8];
        // empty page table at 0x8000
        assert_eq!(
            mmu.translate(&mut m, &segs, 0x8000, 0x290, 0, Access::Read, 0).unwrap(),
            Err(TranslateFault::Page { linear: 0x290 })
        );
    }

    #[test]
    fn walk_fills_tlb_and_sets_accessed() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_paging(true);
        let segs = [0; 8];
        let ptb: u32 = 0x8000;
        // map vpn 3 -> frame 9, writable, kernel
        m.load(ptb + 3, &[PageTableEntry::from_parts(9, true, true, false).0]).unwrap();
        let linear = 3 * PAGE_WORDS + 5;
        assert_eq!(
            mmu.translate(&mut m, &segs, ptb as Word, linear, 0, Access::Read, 0).unwrap(),
            Ok(9 * PAGE_WORDS + 5)
        );
        assert_eq!(mmu.walk_count, 1);
        // hit: no further walk
        mmu.translate(&mut m, &segs, ptb as Word, linear, 0, Access::Read, 0)
            .unwrap()
            .unwrap();
        assert_eq!(mmu.walk_count, 1);
        m.flush();
        assert!(PageTableEntry(m.ram()[(ptb + 3) as usize]).accessed());
    }

    #[test]
    fn stale_tlb_until_invalidate() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_paging(true);
        let segs = [0; 8];
        let ptb: u32 = 0x8000;
        m.load(ptb, &[PageTableEntry::from_parts(1, true, true, false).0]).unwrap();
        let p1 = mmu.translate(&mut m, &segs, ptb as Word, 0, 0, Access::Read, 0).unwrap();
        assert_eq!(p1, Ok(PAGE_WORDS));
        // remap vpn 0 -> frame 2 behind the TLB's back (through the cache path)
        m.cpu_write(ptb, PageTableEntry::from_parts(2, true, true, false).0).unwrap();
        let stale = mmu.translate(&mut m, &segs, ptb as Word, 0, 0, Access::Read, 0).unwrap();
        assert_eq!(stale, Ok(PAGE_WORDS)); // stale frame served
        mmu.tlb_invalidate();
        let fresh = mmu.translate(&mut m, &segs, ptb as Word, 0, 0, Access::Read, 0).unwrap();
        assert_eq!(fresh, Ok(2 * PAGE_WORDS));
    }

    #[test]
    fn write_sets_dirty_even_on_tlb_hit() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_paging(true);
        let segs = [0; 8];
        let ptb: u32 = 0x8000;
        m.load(ptb, &[PageTableEntry::from_parts(4, true, true, false).0]).unwrap();
        // read first (fills TLB without dirty), then write through the TLB
        mmu.translate(&mut m, &segs, ptb as Word, 7, 0, Access::Read, 0).unwrap().unwrap();
        m.flush();
        assert!(!PageTableEntry(m.ram()[ptb as usize]).dirty());
        mmu.translate(&mut m, &segs, ptb as Word, 7, 0, Access::Write, 0).unwrap().unwrap();
        m.flush();
        assert!(PageTableEntry(m.ram()[ptb as usize]).dirty());
    }

    #[test]
    fn user_cannot_touch_kernel_page() {
        let mut m = mem();
        let mut mmu = Mmu::new();
        mmu.set_paging(true);
        let segs = [0; 8];
        let ptb: u32 = 0x8000;
        m.load(ptb, &[PageTableEntry::from_parts(1, true, true, false).0]).unwrap();
        assert!(matches!(
            mmu.translate(&mut m, &segs, ptb as Word, 0, 0, Access::Read, 1).unwrap(),
            Err(TranslateFault::Page { .. })
        ));
    }
}
