//! The one Clown data type.

/// The only data value in the machine: a signed 32-bit integer.
/// It doubles as the memory and addressing unit (there is no byte
/// addressing anywhere in the system).
pub type Word = i32;

/// One virtual-memory page, one disk block, and one DMA transfer unit
/// are all this many words. A single definition keeps the MMU, the disk,
/// and the DMA engine agreeing with each other.
pub const PAGE_WORDS: u32 = 128;

/// Reinterpret a word as an unsigned address.
#[inline]
pub fn as_addr(w: Word) -> u32 {
    w as u32
}
