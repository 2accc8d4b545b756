//! The clink linker: merges object modules, resolves symbols, and lays
//! out raw images.
//!
//! Same-named segments from different modules are concatenated in input
//! order, each module's contribution aligned up to 8 words, so a module's
//! internal layout survives linking. Relocation sites keep the
//! addend-only convention of [`crate::object`].

use std::collections::HashMap;

use thiserror::Error;

use clown_core::word::Word;

use crate::assemble::{align_up, BinImage};
use crate::object::{ObjectModule, Reloc, SegFlags, Segment, Symbol};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("duplicate global symbol {symbol:?}: defined in {first} and {second}")]
    DuplicateGlobal { symbol: String, first: String, second: String },
    #[error("unresolved externals: {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error("multiple entry points: {first} and {second}")]
    MultipleEntries { first: String, second: String },
    #[error("no segment named {0:?} for --base")]
    UnknownSegment(String),
    #[error("segments {a:?} [{a_lo:#x}..{a_hi:#x}) and {b:?} [{b_lo:#x}..{b_hi:#x}) overlap")]
    Overlap { a: String, a_lo: u32, a_hi: u32, b: String, b_lo: u32, b_hi: u32 },
}

/// Merge `inputs` (module name, module) into a single object module.
/// Unresolved externals are carried through; call [`require_resolved`]
/// before emitting a raw image.
pub fn link(inputs: &[(String, ObjectModule)]) -> Result<ObjectModule, LinkError> {
    let mut out = ObjectModule::default();
    let mut seg_index: HashMap<String, usize> = HashMap::new();
    // per input module, per input segment: (merged segment, word base)
    let mut placements: Vec<Vec<(usize, u32)>> = Vec::with_capacity(inputs.len());
    for (_, m) in inputs {
        let mut here = Vec::with_capacity(m.segments.len());
        for seg in &m.segments {
            let idx = *seg_index.entry(seg.name.clone()).or_insert_with(|| {
                out.segments.push(Segment {
                    name: seg.name.clone(),
                    flags: SegFlags::default(),
                    words: Vec::new(),
                });
                out.segments.len() - 1
            });
            let merged = &mut out.segments[idx];
            merged.flags.writable |= seg.flags.writable;
            merged.flags.executable |= seg.flags.executable;
            let base = align_up(merged.words.len() as u32, 8);
            merged.words.resize(base as usize, 0);
            merged.words.extend_from_slice(&seg.words);
            here.push((idx, base));
        }
        placements.push(here);
    }

    // global definitions first, so externals resolve across module order
    let mut globals: HashMap<String, (usize, &str)> = HashMap::new();
    for ((name, m), here) in inputs.iter().zip(&placements) {
        for sym in &m.symbols {
            let Some(seg) = sym.segment else { continue };
            if !sym.global {
                continue;
            }
            let (merged, base) = here[seg];
            if let Some(&(_, first)) = globals.get(&sym.name) {
                return Err(LinkError::DuplicateGlobal {
                    symbol: sym.name.clone(),
                    first: first.to_string(),
                    second: name.clone(),
                });
            }
            out.symbols.push(Symbol {
                name: sym.name.clone(),
                segment: Some(merged),
                value: base + sym.value,
                global: true,
            });
            globals.insert(sym.name.clone(), (out.symbols.len() - 1, name));
        }
    }

    let mut externals: HashMap<String, usize> = HashMap::new();
    let mut entry_owner: Option<&str> = None;
    for ((name, m), here) in inputs.iter().zip(&placements) {
        // map this module's symbol indices into the merged table
        let mut map = Vec::with_capacity(m.symbols.len());
        for sym in &m.symbols {
            let idx = match sym.segment {
                Some(_) if sym.global => globals[&sym.name].0,
                Some(seg) => {
                    let (merged, base) = here[seg];
                    out.symbols.push(Symbol {
                        name: sym.name.clone(),
                        segment: Some(merged),
                        value: base + sym.value,
                        global: false,
                    });
                    out.symbols.len() - 1
                }
                None => match globals.get(&sym.name) {
                    Some(&(idx, _)) => idx,
                    None => *externals.entry(sym.name.clone()).or_insert_with(|| {
                        out.symbols.push(Symbol {
                            name: sym.name.clone(),
                            segment: None,
                            value: 0,
                            global: false,
                        });
                        out.symbols.len() - 1
                    }),
                },
            };
            map.push(idx);
        }
        for r in &m.relocs {
            let (merged, base) = here[r.segment];
            out.relocs.push(Reloc {
                segment: merged,
                offset: base + r.offset,
                symbol: map[r.symbol],
                kind: r.kind,
            });
        }
        if let Some((seg, off)) = m.entry {
            if let Some(first) = entry_owner {
                return Err(LinkError::MultipleEntries {
                    first: first.to_string(),
                    second: name.clone(),
                });
            }
            let (merged, base) = here[seg];
            out.entry = Some((merged, base + off));
            entry_owner = Some(name);
        }
    }
    out.validate().expect("linker produced an inconsistent module");
    Ok(out)
}

/// Error with the complete list of unresolved externals, if any.
pub fn require_resolved(module: &ObjectModule) -> Result<(), LinkError> {
    let ext: Vec<String> = module.externals().iter().map(|s| s.to_string()).collect();
    if ext.is_empty() {
        Ok(())
    } else {
        Err(LinkError::Unresolved(ext))
    }
}

/// Lay out a fully resolved module as a raw image. Segments without an
/// explicit base are packed consecutively (8-word aligned) from `base`;
/// `overrides` pins named segments at fixed addresses. Any overlap in the
/// final ranges is an error.
pub fn layout_bin(
    module: &ObjectModule,
    base: u32,
    overrides: &[(String, u32)],
) -> Result<BinImage, LinkError> {
    require_resolved(module)?;
    let n = module.segments.len();
    let mut bases: Vec<Option<u32>> = vec![None; n];
    for (name, addr) in overrides {
        let idx = module
            .find_segment(name)
            .ok_or_else(|| LinkError::UnknownSegment(name.clone()))?;
        bases[idx] = Some(*addr);
    }
    let mut cursor = base;
    for (i, seg) in module.segments.iter().enumerate() {
        if bases[i].is_some() {
            continue;
        }
        cursor = align_up(cursor, 8);
        bases[i] = Some(cursor);
        cursor += seg.words.len() as u32;
    }
    let bases: Vec<u32> = bases.into_iter().map(Option::unwrap).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (a_lo, a_hi) = (bases[i], bases[i] + module.segments[i].words.len() as u32);
            let (b_lo, b_hi) = (bases[j], bases[j] + module.segments[j].words.len() as u32);
            if a_lo < b_hi && b_lo < a_hi {
                return Err(LinkError::Overlap {
                    a: module.segments[i].name.clone(),
                    a_lo,
                    a_hi,
                    b: module.segments[j].name.clone(),
                    b_lo,
                    b_hi,
                });
            }
        }
    }
    let lo = bases
        .iter()
        .zip(&module.segments)
        .filter(|(_, s)| !s.words.is_empty())
        .map(|(&b, _)| b)
        .min()
        .unwrap_or(base);
    let hi = bases
        .iter()
        .zip(&module.segments)
        .map(|(&b, s)| b + s.words.len() as u32)
        .max()
        .unwrap_or(base);
    let lo = lo.min(base);
    let mut words = vec![0 as Word; (hi - lo) as usize];
    for (seg, &b) in module.segments.iter().zip(&bases) {
        let at = (b - lo) as usize;
        words[at..at + seg.words.len()].copy_from_slice(&seg.words);
    }
    for r in &module.relocs {
        let sym = &module.symbols[r.symbol];
        let target = bases[sym.segment.unwrap()] + sym.value;
        let site = (bases[r.segment] - lo + r.offset) as usize;
        words[site] = (target as i64 + words[site] as i64) as Word;
    }
    let entry = module.entry.map(|(seg, off)| bases[seg] + off);
    Ok(BinImage { base: lo, words, entry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::assemble;

    fn module(src: &str) -> ObjectModule {
        assemble(src, "m.s").unwrap().module
    }

    fn named(pairs: &[(&str, &str)]) -> Vec<(String, ObjectModule)> {
        pairs.iter().map(|(n, s)| (n.to_string(), module(s))).collect()
    }

    #[test]
    fn merges_same_named_segments_with_alignment() {
        let linked = link(&named(&[
            ("a.s", "nop\nnop\nnop\n"),
            ("b.s", "stop\n"),
        ]))
        .unwrap();
        let code = &linked.segments[linked.find_segment("code").unwrap()].words;
        // second module's code starts at the next 8-word boundary
        assert_eq!(code.len(), 9);
        assert_ne!(code[8], 0);
    }

    #[test]
    fn cross_module_calls_resolve() {
        let linked = link(&named(&[
            ("main.s", ".entry main\nmain:\tcall puts\n\tstop\n.extern puts\n"),
            ("lib.s", ".global puts\nputs:\tret\n"),
        ]))
        .unwrap();
        require_resolved(&linked).unwrap();
        let img = layout_bin(&linked, 0, &[]).unwrap();
        // puts lands at offset 8 (after the aligned first module)
        assert_eq!(img.words[1], 8);
        assert_eq!(img.entry, Some(0));
    }

    #[test]
    fn duplicate_global_names_both_modules() {
        let err = link(&named(&[
            ("one.s", ".global f\nf:\tret\n"),
            ("two.s", ".global f\nf:\tret\n"),
        ]))
        .unwrap_err()
        .to_string();
        assert!(err.contains("one.s") && err.contains("two.s"), "{err}");
    }

    #[test]
    fn all_unresolved_externals_listed() {
        let linked = link(&named(&[(
            "m.s",
            ".extern alpha\n.extern beta\ncall alpha\ncall beta\n",
        )]))
        .unwrap();
        let err = require_resolved(&linked).unwrap_err().to_string();
        assert!(err.contains("alpha") && err.contains("beta"), "{err}");
    }

    #[test]
    fn multiple_entries_rejected() {
        let err = link(&named(&[
            ("a.s", ".entry a\na:\tstop\n"),
            ("b.s", ".entry b\nb:\tstop\n"),
        ]))
        .unwrap_err()
        .to_string();
        assert!(err.contains("a.s") && err.contains("b.s"), "{err}");
    }

    #[test]
    fn base_override_pins_segment_and_checks_overlap() {
        let linked = link(&named(&[(
            "m.s",
            "\tld %r1, [value]\n\tstop\n\t.segment data,w\nvalue:\t.word 7\n",
        )]))
        .unwrap();
        let img = layout_bin(&linked, 0, &[("data".into(), 0x100)]).unwrap();
        assert_eq!(img.base, 0);
        assert_eq!(img.words[0x100], 7);
        assert_eq!(img.words[1], 0x100); // reloc patched to the pinned base
        let clash = layout_bin(&linked, 0, &[("data".into(), 0x1)]);
        assert!(matches!(clash, Err(LinkError::Overlap { .. })), "{clash:?}");
    }

    #[test]
    fn relocation_delta_oracle() {
        // The same module laid out at two bases must differ exactly at
        // relocation sites, by exactly the base delta.
        let linked = link(&named(&[
            ("main.s", ".entry main\nmain:\tcall helper\n\tjmp main\n.extern helper\n"),
            ("lib.s", ".global helper\nhelper:\tld %r1, [table]\n\tret\n\t.segment data,w\ntable:\t.word table\n"),
        ]))
        .unwrap();
        let a = layout_bin(&linked, 0x0, &[]).unwrap();
        let b = layout_bin(&linked, 0x1000, &[]).unwrap();
        assert_eq!(a.words.len(), b.words.len());
        let sites: std::collections::HashSet<usize> = linked
            .relocs
            .iter()
            .map(|r| {
                // all segments shift together under a pure base change
                let seg_base_a = {
                    let img_off = |seg: usize| -> u32 {
                        let mut cursor = 0u32;
                        for s in &linked.segments[..seg] {
                            cursor = align_up(cursor, 8) + s.words.len() as u32;
                        }
                        align_up(cursor, 8)
                    };
                    img_off(r.segment)
                };
                (seg_base_a + r.offset) as usize
            })
            .collect();
        for i in 0..a.words.len() {
            if sites.contains(&i) {
                assert_eq!(b.words[i] - a.words[i], 0x1000, "site {i}");
            } else {
                assert_eq!(a.words[i], b.words[i], "non-site {i} must not move");
            }
        }
        assert_eq!(b.entry.unwrap() - a.entry.unwrap(), 0x1000);
    }
}
