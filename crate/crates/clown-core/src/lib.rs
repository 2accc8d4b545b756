//! Clown machine core.
//!
//! A cycle-accounted simulator of the Clown microprocessor and its standard
//! peripherals: the CPU with a direct-mapped write-back cache, a segmentation
//! and paging MMU with a 16-entry TLB, an interval timer, a console terminal,
//! a mechanically-timed hard disk, and a DMA controller implemented as a small
//! microcontroller VM that steals idle bus cycles.
//!
//! The [`system::System`] type composes all of the above into a deterministic
//! per-cycle scheduler; everything else can also be used piecemeal (the
//! toolchain crate shares [`isa`] for encoding and [`diskimg`] for disk
//! images).

pub mod devices;
pub mod diskimg;
pub mod isa;
pub mod machine;
pub mod memory;
pub mod mmu;
pub mod system;
pub mod ucvm;
pub mod word;

pub use word::{Word, PAGE_WORDS};
