//! Physical memory, the single-level direct-mapped write-back cache, and
//! the bus bookkeeping that decides when the DMA engine may run.
//!
//! All CPU memory traffic (fetches, data, stack, page-table walks) goes
//! through [`MemorySystem::cpu_read`] / [`MemorySystem::cpu_write`]. DMA
//! traffic uses the snooping [`MemorySystem::dma_read`] /
//! [`MemorySystem::dma_write`] path, which keeps the cache coherent:
//! DMA writes invalidate matching lines, DMA reads force write-back of
//! dirty lines first.

use thiserror::Error;

use crate::word::Word;

pub const CACHE_LINES: usize = 64;
pub const LINE_WORDS: usize = 4;

/// Default physical memory size: 2^20 words (4 MiB).
pub const DEFAULT_MEM_WORDS: u32 = 1 << 20;

/// Out-of-range physical access. This is a hard simulator fault, not a CPU
/// exception: a correctly translated address can never leave RAM unless the
/// machine is misconfigured.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("physical access out of range: address {addr:#x}, memory size {size:#x} words")]
pub struct SimFault {
    pub addr: u32,
    pub size: u32,
}

/// Which rule decides whether the bus is free for DMA after a CPU cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BusMode {
    /// The bus is free iff the CPU performed no actual bus transaction
    /// this cycle; cache hits leave the bus idle. Default.
    #[default]
    CacheAware,
    /// The bus is free iff the executed instruction is classified as
    /// neither a memory reference nor an I/O instruction, regardless of
    /// cache behaviour.
    StrictLiteral,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
}

#[derive(Clone, Copy)]
struct Line {
    valid: bool,
    dirty: bool,
    tag: u32,
    data: [Word; LINE_WORDS],
}

const EMPTY_LINE: Line = Line { valid: false, dirty: false, tag: 0, data: [0; LINE_WORDS] };

pub struct MemorySystem {
    ram: Vec<Word>,
    lines: Box<[Line; CACHE_LINES]>,
    pub stats: CacheStats,
    cpu_used_bus: bool,
    dma_granted: bool,
}

#[inline]
fn line_index(addr: u32) -> usize {
    ((addr as usize) / LINE_WORDS) % CACHE_LINES
}

#[inline]
fn tag_of(addr: u32) -> u32 {
    addr / (LINE_WORDS as u32 * CACHE_LINES as u32)
}

impl MemorySystem {
    pub fn new(size_words: u32) -> MemorySystem {
        MemorySystem {
            ram: vec![0; size_words as usize],
            lines: Box::new([EMPTY_LINE; CACHE_LINES]),
            stats: CacheStats::default(),
            cpu_used_bus: false,
            dma_granted: false,
        }
    }

    pub fn size(&self) -> u32 {
        self.ram.len() as u32
    }

    /// Start-of-cycle reset of the per-cycle bus bookkeeping.
    pub fn begin_cycle(&mut self) {
        self.cpu_used_bus = false;
        self.dma_granted = false;
    }

    /// Did the CPU occupy the bus (miss, write-back, or explicit I/O)
    /// during the current cycle?
    pub fn cpu_used_bus(&self) -> bool {
        self.cpu_used_bus
    }

    /// Record a CPU bus transaction that bypasses the cache (I/O port
    /// access).
    pub fn note_cpu_io(&mut self) {
        self.cpu_used_bus = true;
    }

    pub fn grant_dma(&mut self, grant: bool) {
        self.dma_granted = grant;
    }

    fn check(&self, addr: u32) -> Result<usize, SimFault> {
        if (addr as usize) < self.ram.len() {
            Ok(addr as usize)
        } else {
            Err(SimFault { addr, size: self.ram.len() as u32 })
        }
    }

    /// Fill the line covering `addr`, writing back the victim if dirty.
    /// Returns the index of the line. Counts as bus use.
    fn fill(&mut self, addr: u32) -> Result<usize, SimFault> {
        let idx = line_index(addr);
        let tag = tag_of(addr);
        let base = (addr as usize / LINE_WORDS) * LINE_WORDS;
        // line must fit entirely in RAM
        self.check((base + LINE_WORDS - 1) as u32)?;
        let line = &mut self.lines[idx];
        if line.valid && line.dirty {
            let victim_base =
                (line.tag as usize * CACHE_LINES + idx) * LINE_WORDS;
            self.ram[victim_base..victim_base + LINE_WORDS].copy_from_slice(&line.data);
            self.stats.writebacks += 1;
        }
        line.valid = true;
        line.dirty = false;
        line.tag = tag;
        line.data.copy_from_slice(&self.ram[base..base + LINE_WORDS]);
        self.cpu_used_bus = true;
        Ok(idx)
    }

    pub fn cpu_read(&mut self, addr: u32) -> Result<Word, SimFault> {
        self.check(addr)?;
        let idx = line_index(addr);
        let tag = tag_of(addr);
        let idx = if self.lines[idx].valid && self.lines[idx].tag == tag {
            self.stats.hits += 1;
            idx
        } else {
            self.stats.misses += 1;
            self.fill(addr)?
        };
        Ok(self.lines[idx].data[addr as usize % LINE_WORDS])
    }

    pub fn cpu_write(&mut self, addr: u32, value: Word) -> Result<(), SimFault> {
        self.check(addr)?;
        let idx = line_index(addr);
        let tag = tag_of(addr);
        let idx = if self.lines[idx].valid && self.lines[idx].tag == tag {
            self.stats.hits += 1;
            idx
        } else {
            self.stats.misses += 1;
            self.fill(addr)?
        };
        let line = &mut self.lines[idx];
        line.data[addr as usize % LINE_WORDS] = value;
        line.dirty = true;
        Ok(())
    }

    /// Snooping DMA read: a dirty cached copy is written back first so the
    /// engine always observes the latest value.
    pub fn dma_read(&mut self, addr: u32) -> Result<Word, SimFault> {
        assert!(self.dma_granted, "DMA access without bus grant");
        let i = self.check(addr)?;
        let idx = line_index(addr);
        let line = &mut self.lines[idx];
        if line.valid && line.tag == tag_of(addr) && line.dirty {
            let base = (addr as usize / LINE_WORDS) * LINE_WORDS;
            self.ram[base..base + LINE_WORDS].copy_from_slice(&line.data);
            line.dirty = false;
            self.stats.writebacks += 1;
        }
        Ok(self.ram[i])
    }

    /// Snooping DMA write: RAM is updated and any matching cache line is
    /// invalidated so the CPU refetches the new value. A matching dirty
    /// line is written back first so the CPU's pending stores to the other
    /// words of the line are not lost.
    pub fn dma_write(&mut self, addr: u32, value: Word) -> Result<(), SimFault> {
        assert!(self.dma_granted, "DMA access without bus grant");
        let i = self.check(addr)?;
        let idx = line_index(addr);
        let line = &mut self.lines[idx];
        if line.valid && line.tag == tag_of(addr) {
            if line.dirty {
                let base = (addr as usize / LINE_WORDS) * LINE_WORDS;
                self.ram[base..base + LINE_WORDS].copy_from_slice(&line.data);
                self.stats.writebacks += 1;
            }
            let line = &mut self.lines[idx];
            line.valid = false;
            line.dirty = false;
        }
        self.ram[i] = value;
        Ok(())
    }

    /// Write all dirty lines back to RAM. Returns the number of write-backs.
    pub fn flush(&mut self) -> usize {
        let mut count = 0;
        for idx in 0..CACHE_LINES {
            let line = &mut self.lines[idx];
            if line.valid && line.dirty {
                let base = (line.tag as usize * CACHE_LINES + idx) * LINE_WORDS;
                self.ram[base..base + LINE_WORDS].copy_from_slice(&line.data);
                line.dirty = false;
                count += 1;
            }
        }
        self.stats.writebacks += count as u64;
        count
    }

    /// Raw RAM view (bypasses the cache; loaders and tests only).
    pub fn ram(&self) -> &[Word] {
        &self.ram
    }

    /// Raw RAM write for image loading, before execution starts.
    pub fn load(&mut self, base: u32, words: &[Word]) -> Result<(), SimFault> {
        let end = base as usize + words.len();
        if end > self.ram.len() {
            return Err(SimFault { addr: end as u32 - 1, size: self.ram.len() as u32 });
        }
        self.ram[base as usize..end].copy_from_slice(words);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_read_hits() {
        let mut m = MemorySystem::new(1 << 12);
        m.begin_cycle();
        m.cpu_read(100).unwrap();
        assert!(m.cpu_used_bus());
        m.begin_cycle();
        m.cpu_read(100).unwrap();
        assert!(!m.cpu_used_bus());
        assert_eq!(m.stats.hits, 1);
        assert_eq!(m.stats.misses, 1);
    }

    #[test]
    fn line_granularity() {
        // read addr 3 then addr 0: both in the same 4-word line
        let mut m = MemorySystem::new(1 << 12);
        m.cpu_read(3).unwrap();
        m.cpu_read(0).unwrap();
        assert_eq!(m.stats.misses, 1);
        assert_eq!(m.stats.hits, 1);
    }

    #[test]
    fn conflict_forces_writeback() {
        let mut m = MemorySystem::new(1 << 12);
        m.cpu_write(0, 42).unwrap();
        assert_eq!(m.ram()[0], 0); // write-back: RAM stale until eviction
        // same line index, different tag
        m.cpu_read(4 * 64).unwrap();
        assert_eq!(m.ram()[0], 42);
        assert_eq!(m.stats.writebacks, 1);
    }

    #[test]
    fn dma_read_sees_dirty_data() {
        let mut m = MemorySystem::new(1 << 12);
        m.cpu_write(8, 7).unwrap();
        m.grant_dma(true);
        assert_eq!(m.dma_read(8).unwrap(), 7);
        assert_eq!(m.ram()[8], 7); // line cleaned
    }

    #[test]
    fn dma_write_invalidates() {
        let mut m = MemorySystem::new(1 << 12);
        m.cpu_read(16).unwrap();
        m.grant_dma(true);
        m.dma_write(16, 99).unwrap();
        m.begin_cycle();
        assert_eq!(m.cpu_read(16).unwrap(), 99);
        assert!(m.cpu_used_bus()); // refetched from RAM
    }

    #[test]
    fn dma_untouched_cache_when_uncached() {
        let mut m = MemorySystem::new(1 << 12);
        m.grant_dma(true);
        assert_eq!(m.dma_read(500).unwrap(), 0);
        m.begin_cycle();
        m.cpu_read(500).unwrap();
        assert_eq!(m.stats.misses, 1); // DMA did not allocate
    }

    #[test]
    fn flush_counts() {
        let mut m = MemorySystem::new(1 << 12);
        assert_eq!(m.flush(), 0);
        for i in 0..5 {
            m.cpu_write(i * 4, i as Word).unwrap(); // distinct lines
        }
        assert_eq!(m.flush(), 5);
        for i in 0..5u32 {
            assert_eq!(m.ram()[(i * 4) as usize], i as Word);
        }
    }

    #[test]
    fn out_of_range_is_fault() {
        let mut m = MemorySystem::new(64);
        assert!(m.cpu_read(64).is_err());
        assert!(m.cpu_write(1 << 30, 0).is_err());
    }

    #[test]
    #[should_panic(expected = "without bus grant")]
    fn dma_without_grant_asserts() {
        let mut m = MemorySystem::new(64);
        let _ = m.dma_read(0);
    }
}
