//! The in-memory object module shared by the assembler and the linker.
//!
//! Relocation convention: a type-0 (absolute word) relocation site stores
//! only the addend; resolving it replaces the word with
//! `final_symbol_address + stored_addend`. Symbol values of defined
//! symbols are offsets within their segment until layout assigns bases.

use clown_core::word::Word;

pub const RELOC_ABSOLUTE_WORD: u32 = 0;

/// Marker for an external (undefined here) symbol in the exe format.
pub const SEG_EXTERNAL: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegFlags {
    pub writable: bool,
    pub executable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub flags: SegFlags,
    pub words: Vec<Word>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    /// Defining segment index, or None for an external reference.
    pub segment: Option<usize>,
    /// Offset within the segment (meaningless for externals).
    pub value: u32,
    pub global: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reloc {
    pub segment: usize,
    /// Word offset of the site within the segment.
    pub offset: u32,
    pub symbol: usize,
    pub kind: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObjectModule {
    pub segments: Vec<Segment>,
    pub symbols: Vec<Symbol>,
    pub relocs: Vec<Reloc>,
    /// Entry point as (segment, offset).
    pub entry: Option<(usize, u32)>,
}

impl ObjectModule {
    pub fn find_segment(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn find_symbol(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.name == name)
    }

    /// Internal-consistency check: every index in range, every reloc site
    /// inside its segment.
    pub fn validate(&self) -> Result<(), String> {
        for (i, s) in self.symbols.iter().enumerate() {
            if let Some(seg) = s.segment {
                if seg >= self.segments.len() {
                    return Err(format!("symbol {} ({i}) references segment {seg}", s.name));
                }
            }
        }
        for (i, r) in self.relocs.iter().enumerate() {
            if r.segment >= self.segments.len() {
                return Err(format!("relocation {i} references segment {}", r.segment));
            }
            if r.symbol >= self.symbols.len() {
                return Err(format!("relocation {i} references symbol {}", r.symbol));
            }
            if r.offset as usize >= self.segments[r.segment].words.len() {
                return Err(format!("relocation {i} site {} outside its segment", r.offset));
            }
            if r.kind != RELOC_ABSOLUTE_WORD {
                return Err(format!("relocation {i} has unknown type {}", r.kind));
            }
        }
        if let Some((seg, off)) = self.entry {
            if seg >= self.segments.len() || off as usize > self.segments[seg].words.len() {
                return Err(format!("entry ({seg}, {off}) outside the module"));
            }
        }
        Ok(())
    }

    /// Names of symbols that are referenced but defined nowhere here.
    pub fn externals(&self) -> Vec<&str> {
        self.symbols
            .iter()
            .filter(|s| s.segment.is_none())
            .map(|s| s.name.as_str())
            .collect()
    }
}
