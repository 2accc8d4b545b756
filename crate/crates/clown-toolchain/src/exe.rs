//! The exe object-file container, bit-exact.
//!
//! All quantities are little-endian 32-bit words. Layout:
//!
//! | region          | words                                            |
//! |-----------------|--------------------------------------------------|
//! | header          | magic 0x434C4F57, version 1, flags, entry_seg,   |
//! |                 | entry_off, n_segments, n_symbols, n_relocs       |
//! | segment records | name_idx, size_words, flags (bit0 w, bit1 x),    |
//! |                 | file_offset_words — 4 words each                 |
//! | symbol records  | name_idx, seg_idx (0xFFFFFFFF = external),       |
//! |                 | value, flags (bit0 global) — 4 words each        |
//! | reloc records   | seg_idx, offset, symbol_idx, type — 4 words each |
//! | string table    | char count, then one character per word, names   |
//! |                 | 0-terminated; name_idx is an offset into the     |
//! |                 | character array                                  |
//! | segment data    | at each record's file_offset_words               |
//!
//! entry_seg is 0xFFFFFFFF when the module has no entry point.

use thiserror::Error;

use clown_core::word::Word;

use crate::object::{ObjectModule, Reloc, SegFlags, Segment, Symbol, SEG_EXTERNAL};

pub const EXE_MAGIC: u32 = 0x434C4F57;
pub const EXE_VERSION: u32 = 1;
pub const HEADER_WORDS: usize = 8;

const NO_ENTRY: u32 = 0xFFFF_FFFF;

#[derive(Debug, Error)]
pub enum ExeError {
    #[error("bad magic {found:#010x} at offset 0 (expected {EXE_MAGIC:#010x})")]
    BadMagic { found: u32 },
    #[error("unsupported exe version {0}")]
    BadVersion(u32),
    #[error("truncated exe: need {needed} words, file has {have}")]
    Truncated { needed: usize, have: usize },
    #[error("dangling index: {0}")]
    Dangling(String),
    #[error("file length {0} is not a whole number of words")]
    RaggedLength(usize),
}

struct StringTable {
    chars: Vec<u32>,
}

impl StringTable {
    fn new() -> StringTable {
        StringTable { chars: Vec::new() }
    }

    fn intern(&mut self, name: &str) -> u32 {
        let idx = self.chars.len() as u32;
        self.chars.extend(name.chars().map(|c| c as u32));
        self.chars.push(0);
        idx
    }

    fn lookup(chars: &[u32], idx: u32) -> Result<String, ExeError> {
        let mut s = String::new();
        let mut i = idx as usize;
        loop {
            match chars.get(i) {
                None => return Err(ExeError::Dangling(format!("string index {idx}"))),
                Some(0) => return Ok(s),
                Some(&c) => {
                    s.push(char::from_u32(c).unwrap_or('\u{FFFD}'));
                    i += 1;
                }
            }
        }
    }
}

pub fn write_exe(module: &ObjectModule) -> Vec<u8> {
    let mut strings = StringTable::new();
    let seg_names: Vec<u32> = module.segments.iter().map(|s| strings.intern(&s.name)).collect();
    let sym_names: Vec<u32> = module.symbols.iter().map(|s| strings.intern(&s.name)).collect();

    let n_seg = module.segments.len();
    let n_sym = module.symbols.len();
    let n_rel = module.relocs.len();
    let table_words = 1 + strings.chars.len();
    let data_start = HEADER_WORDS + 4 * (n_seg + n_sym + n_rel) + table_words;

    let (entry_seg, entry_off) = match module.entry {
        Some((s, o)) => (s as u32, o),
        None => (NO_ENTRY, 0),
    };
    let mut words: Vec<u32> = vec![
        EXE_MAGIC,
        EXE_VERSION,
        0,
        entry_seg,
        entry_off,
        n_seg as u32,
        n_sym as u32,
        n_rel as u32,
    ];
    let mut offset = data_start as u32;
    for (seg, &name_idx) in module.segments.iter().zip(&seg_names) {
        let flags = seg.flags.writable as u32 | (seg.flags.executable as u32) << 1;
        words.extend([name_idx, seg.words.len() as u32, flags, offset]);
        offset += seg.words.len() as u32;
    }
    for (sym, &name_idx) in module.symbols.iter().zip(&sym_names) {
        let seg_idx = sym.segment.map_or(SEG_EXTERNAL, |s| s as u32);
        words.extend([name_idx, seg_idx, sym.value, sym.global as u32]);
    }
    for r in &module.relocs {
        words.extend([r.segment as u32, r.offset, r.symbol as u32, r.kind]);
    }
    words.push(strings.chars.len() as u32);
    words.extend(&strings.chars);
    debug_assert_eq!(words.len(), data_start);
    for seg in &module.segments {
        words.extend(seg.words.iter().map(|&w| w as u32));
    }
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn read_exe(bytes: &[u8]) -> Result<ObjectModule, ExeError> {
    if bytes.len() % 4 != 0 {
        return Err(ExeError::RaggedLength(bytes.len()));
    }
    let words: Vec<u32> =
        bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let need = |n: usize| {
        if n > words.len() {
            Err(ExeError::Truncated { needed: n, have: words.len() })
        } else {
            Ok(())
        }
    };
    need(HEADER_WORDS)?;
    if words[0] != EXE_MAGIC {
        return Err(ExeError::BadMagic { found: words[0] });
    }
    if words[1] != EXE_VERSION {
        return Err(ExeError::BadVersion(words[1]));
    }
    let (n_seg, n_sym, n_rel) = (words[5] as usize, words[6] as usize, words[7] as usize);
    let recs_end = HEADER_WORDS + 4 * (n_seg + n_sym + n_rel);
    need(recs_end + 1)?;
    let table_len = words[recs_end] as usize;
    let table = &words[recs_end + 1..recs_end + 1 + table_len.min(words.len() - recs_end - 1)];
    need(recs_end + 1 + table_len)?;

    let mut segments = Vec::with_capacity(n_seg);
    for i in 0..n_seg {
        let r = &words[HEADER_WORDS + 4 * i..];
        let (name_idx, size, flags, file_off) =
            (r[0], r[1] as usize, r[2], r[3] as usize);
        need(file_off + size)?;
        segments.push(Segment {
            name: StringTable::lookup(table, name_idx)?,
            flags: SegFlags { writable: flags & 1 != 0, executable: flags & 2 != 0 },
            words: words[file_off..file_off + size].iter().map(|&w| w as Word).collect(),
        });
    }
    let mut symbols = Vec::with_capacity(n_sym);
    for i in 0..n_sym {
        let r = &words[HEADER_WORDS + 4 * (n_seg + i)..];
        let segment = if r[1] == SEG_EXTERNAL {
            None
        } else if (r[1] as usize) < n_seg {
            Some(r[1] as usize)
        } else {
            return Err(ExeError::Dangling(format!("symbol {i} segment {}", r[1])));
        };
        symbols.push(Symbol {
            name: StringTable::lookup(table, r[0])?,
            segment,
            value: r[2],
            global: r[3] & 1 != 0,
        });
    }
    let mut relocs = Vec::with_capacity(n_rel);
    for i in 0..n_rel {
        let r = &words[HEADER_WORDS + 4 * (n_seg + n_sym + i)..];
        if r[0] as usize >= n_seg || r[2] as usize >= n_sym {
            return Err(ExeError::Dangling(format!("relocation {i}")));
        }
        relocs.push(Reloc {
            segment: r[0] as usize,
            offset: r[1],
            symbol: r[2] as usize,
            kind: r[3],
        });
    }
    let entry = if words[3] == NO_ENTRY {
        None
    } else if (words[3] as usize) < n_seg {
        Some((words[3] as usize, words[4]))
    } else {
        return Err(ExeError::Dangling(format!("entry segment {}", words[3])));
    };
    let module = ObjectModule { segments, symbols, relocs, entry };
    module.validate().map_err(ExeError::Dangling)?;
    Ok(module)
}
