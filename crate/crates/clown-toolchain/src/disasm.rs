//! Disassembler: renders machine words back into assembler syntax that
//! `assemble` accepts. Unassigned encodings come out as `.word 0x...`.

use clown_core::isa::{self, Decoded, Instruction, Shape};
use clown_core::word::Word;

/// One disassembled slot.
#[derive(Debug, Clone)]
pub struct DisasmLine {
    /// Word offset of the first word of the slot.
    pub offset: usize,
    pub words: Vec<Word>,
    pub text: String,
}

/// Render a single instruction in assembler syntax.
pub fn render(inst: &Instruction) -> String {
    let m = inst.opcode.mnemonic();
    let rd = inst.rd;
    let rs = inst.rs;
    // segment-register fields are architecturally 3 bits wide
    let sd = rd & 7;
    let ss = rs & 7;
    let d16 = inst.imm16 as i32;
    let imm = |v: Option<Word>| format!("{:#x}", v.unwrap_or(0) as u32);
    let mem = |base: u8, disp: i32| match disp {
        0 => format!("[%r{base}]"),
        d if d > 0 => format!("[%r{base} + {d}]"),
        d => format!("[%r{base} - {}]", -d),
    };
    match inst.opcode.shape() {
        Shape::None => m.to_string(),
        Shape::Rd => format!("{m} %r{rd}"),
        Shape::Rs => format!("{m} %r{rs}"),
        Shape::RdRs => format!("{m} %r{rd}, %r{rs}"),
        Shape::RdImm => format!("{m} %r{rd}, {}", imm(inst.imm32)),
        Shape::Imm => format!("{m} {}", imm(inst.imm32)),
        Shape::Imm16 => format!("{m} {d16}"),
        Shape::RdMem => format!("{m} %r{rd}, {}", mem(rs, d16)),
        Shape::RdAbs => format!("{m} %r{rd}, [{}]", imm(inst.imm32)),
        Shape::MemRs => format!("{m} {}, %r{rs}", mem(rd, d16)),
        Shape::AbsRs => format!("{m} [{}], %r{rs}", imm(inst.imm32)),
        Shape::SegRs => format!("{m} %s{sd}, %r{rs}"),
        Shape::RdSeg => format!("{m} %r{rd}, %s{ss}"),
        Shape::Target => match inst.imm32 {
            Some(t) => format!("{m} {:#x}", t as u32),
            None => format!("{m} {d16}"),
        },
        Shape::RegTarget => format!("{m} %r{rs}"),
        Shape::ImmTarget => format!("{m} {}", imm(inst.imm32)),
        Shape::RdTarget => match inst.imm32 {
            Some(t) => format!("{m} %r{rd}, {:#x}", t as u32),
            None => format!("{m} %r{rd}, {d16}"),
        },
        Shape::SegTarget => match inst.imm32 {
            Some(t) => format!("{m} %s{sd}, {:#x}", t as u32),
            None => format!("{m} %s{sd}, {d16}"),
        },
        Shape::InPort => format!("{m} %r{rd}, ({})", d16 as u16),
        Shape::OutPort => format!("{m} %r{rs}, ({})", d16 as u16),
        Shape::ImmPort => format!("{m} {}, ({})", imm(inst.imm32), d16 as u16),
    }
}

/// Disassemble a word span. The decode never fails mid-stream: a dangling
/// immediate word at the very end is emitted as `.word`.
pub fn disassemble(words: &[Word]) -> Vec<DisasmLine> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < words.len() {
        match isa::decode(words, at) {
            Ok(Decoded::Valid { inst, len }) => {
                out.push(DisasmLine {
                    offset: at,
                    words: words[at..at + len].to_vec(),
                    text: render(&inst),
                });
                at += len;
            }
            Ok(Decoded::Invalid { raw, len }) => {
                // take only the first word; the trailer may be code
                let _ = len;
                out.push(DisasmLine {
                    offset: at,
                    words: vec![raw],
                    text: format!(".word {:#010x}", raw as u32),
                });
                at += 1;
            }
            Err(_) => {
                out.push(DisasmLine {
                    offset: at,
                    words: vec![words[at]],
                    text: format!(".word {:#010x}", words[at] as u32),
                });
                at += 1;
            }
        }
    }
    out
}

/// Plain-text listing: `offset:  words  text`.
pub fn format_listing(lines: &[DisasmLine], base: u32) -> String {
    let mut out = String::new();
    for l in lines {
        let ws: Vec<String> = l.words.iter().map(|w| format!("{:08X}", *w as u32)).collect();
        out.push_str(&format!(
            "{:08X}  {:<18} {}\n",
            base + l.offset as u32,
            ws.join(" "),
            l.text
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::assemble;

    fn roundtrip(words: &[Word]) -> Vec<Word> {
        let text: String =
            disassemble(words).iter().map(|l| format!("{}\n", l.text)).collect();
        let m = assemble(&text, "rt.s").expect("disassembly must reassemble");
        m.module.segments[0].words.clone()
    }

    #[test]
    fn renders_parser_syntax() {
        let lines = disassemble(&[0x01120000]);
        assert_eq!(lines[0].text, "mov %r1, %r2");
    }

    #[test]
    fn source_programs_roundtrip_exactly() {
        let src = "\tmov %r1, 10000000\n\tdec %r1\n\tjnz 0x12345\n\tld %r2, [%r3 + 4]\n\tst [%r4 - 2], %r5\n\tin %r1, (33)\n\tout %r2, (0x21)\n\tout 65, (0x21)\n\tint 3\n\tpush %r1\n\tpush 99\n\tlds %s2, %r1\n\tsts %r1, %s2\n\tjmpf %s3, 0x20\n\tloop %r6, 2\n\tcall %r7\n\tstop\n";
        let a = assemble(src, "t.s").unwrap().module.segments[0].words.clone();
        assert_eq!(roundtrip(&a), a);
    }

    #[test]
    fn unknown_words_become_word_directives() {
        // 0x7F in the code field is unassigned
        let raw: Word = 0x7F000000u32 as Word;
        let lines = disassemble(&[raw]);
        assert!(lines[0].text.starts_with(".word"), "{}", lines[0].text);
        assert_eq!(roundtrip(&[raw]), vec![raw]);
    }

    #[test]
    fn normalization_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xD15A);
        for _ in 0..200 {
            let words: Vec<Word> = (0..rng.gen_range(1..24)).map(|_| rng.gen::<i32>()).collect();
            let once = roundtrip(&words);
            let twice = roundtrip(&once);
            assert_eq!(once, twice, "normalization must be a fixed point");
        }
    }

    #[test]
    fn listing_format() {
        let lines = disassemble(&[0x00000000]);
        let text = format_listing(&lines, 0x100);
        assert!(text.contains("00000100"));
        assert!(text.contains("nop"));
    }
}
