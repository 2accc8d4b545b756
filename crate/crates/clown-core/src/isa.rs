//! The Clown instruction set: roster, binary encoding, decoding.
//!
//! An instruction is one or two 32-bit words. The first word is laid out as
//!
//! ```text
//! bit 31      ximm    immediate word follows
//! bits 30-24  opcode  7-bit operation code
//! bits 23-20  rd      destination register field
//! bits 19-16  rs      source register field
//! bits 15-0   imm16   signed short immediate / port / displacement
//! ```
//!
//! and the second word, present exactly when the MSB of the first is set, is
//! the 32-bit immediate operand. Mnemonics with the `x` prefix are the named
//! immediate forms; they share the 7-bit code of their base mnemonic and are
//! distinguished by the MSB. Flow-control instructions without an `x` name
//! (the conditional jumps, `loop`, `jmpf`, `callf`) also accept the immediate
//! word for their absolute target.

use thiserror::Error;

use crate::word::Word;

/// Instruction groups, mirroring the machine's ten-row ISA summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    DataMovement,
    Arithmetic,
    ShiftRotate,
    Logical,
    BitsBytes,
    FlagControl,
    ProcessorControl,
    FlowControl,
    MemoryProtection,
    Io,
}

impl Group {
    pub const ALL: [Group; 10] = [
        Group::DataMovement,
        Group::Arithmetic,
        Group::ShiftRotate,
        Group::Logical,
        Group::BitsBytes,
        Group::FlagControl,
        Group::ProcessorControl,
        Group::FlowControl,
        Group::MemoryProtection,
        Group::Io,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::DataMovement => "DataMovement",
            Group::Arithmetic => "Arithmetic",
            Group::ShiftRotate => "ShiftRotate",
            Group::Logical => "Logical",
            Group::BitsBytes => "BitsBytes",
            Group::FlagControl => "FlagControl",
            Group::ProcessorControl => "ProcessorControl",
            Group::FlowControl => "FlowControl",
            Group::MemoryProtection => "MemoryProtection",
            Group::Io => "IO",
        }
    }
}

/// How an opcode's operands map onto the instruction fields. The assembler
/// and the disassembler both key off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// No operands.
    None,
    /// `op %rd`
    Rd,
    /// `op %rs`
    Rs,
    /// `op %rd, %rs`
    RdRs,
    /// `op %rd, imm` (immediate word)
    RdImm,
    /// `op imm` (immediate word)
    Imm,
    /// `op imm16` (short immediate, e.g. `int`)
    Imm16,
    /// `op %rd, [%rs + disp16]`
    RdMem,
    /// `op %rd, [imm]` (absolute address in the immediate word)
    RdAbs,
    /// `op [%rd + disp16], %rs`
    MemRs,
    /// `op [imm], %rs`
    AbsRs,
    /// `op %sK, %rs` (segment index in the rd field)
    SegRs,
    /// `op %rd, %sK` (segment index in the rs field)
    RdSeg,
    /// `op target` — absolute word address, imm16 or promoted immediate word
    Target,
    /// `op %rs` — register-indirect jump/call
    RegTarget,
    /// `op target` — absolute target in the immediate word (xjmp/xcall)
    ImmTarget,
    /// `op %rd, target` (`loop`)
    RdTarget,
    /// `op %sK, target` (`jmpf`/`callf`; segment index in the rd field)
    SegTarget,
    /// `op %rd, (port)` — port in imm16
    InPort,
    /// `op %rs, (port)` — port in imm16
    OutPort,
    /// `op imm, (port)` — value in the immediate word, port in imm16
    ImmPort,
}

/// Bus behaviour of an instruction, used by the DMA arbitration rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusClass {
    None,
    MemoryReference,
    IoInstruction,
}

macro_rules! roster_table {
    ($( $variant:ident : $mnem:literal, $code:literal, $ximm:literal, $group:ident, $shape:ident; )*) => {
        /// One of the 87 machine instructions.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Opcode {
            $( $variant, )*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[ $( Opcode::$variant, )* ];

            /// The 7-bit operation code. Immediate (`x`) forms share the
            /// code of their base form; the encoded MSB tells them apart.
            pub fn code(self) -> u8 {
                match self { $( Opcode::$variant => $code, )* }
            }

            /// True for the named immediate (`x`-prefixed) forms.
            pub fn is_x_form(self) -> bool {
                match self { $( Opcode::$variant => $ximm, )* }
            }

            pub fn group(self) -> Group {
                match self { $( Opcode::$variant => Group::$group, )* }
            }

            pub fn mnemonic(self) -> &'static str {
                match self { $( Opcode::$variant => $mnem, )* }
            }

            pub fn shape(self) -> Shape {
                match self { $( Opcode::$variant => Shape::$shape, )* }
            }
        }
    };
}

roster_table! {
    // Data movement (13)
    Mov:   "mov",   0x01, false, DataMovement, RdRs;
    Xmov:  "xmov",  0x01, true,  DataMovement, RdImm;
    Ld:    "ld",    0x02, false, DataMovement, RdMem;
    Xld:   "xld",   0x02, true,  DataMovement, RdAbs;
    St:    "st",    0x03, false, DataMovement, MemRs;
    Xst:   "xst",   0x03, true,  DataMovement, AbsRs;
    Push:  "push",  0x04, false, DataMovement, Rs;
    Xpush: "xpush", 0x04, true,  DataMovement, Imm;
    Pop:   "pop",   0x05, false, DataMovement, Rd;
    Lds:   "lds",   0x06, false, DataMovement, SegRs;
    Sts:   "sts",   0x07, false, DataMovement, RdSeg;
    Swap:  "swap",  0x08, false, DataMovement, RdRs;
    Lea:   "lea",   0x09, false, DataMovement, RdMem;
    // Arithmetic (12)
    Add:   "add",   0x10, false, Arithmetic, RdRs;
    Xadd:  "xadd",  0x10, true,  Arithmetic, RdImm;
    Sub:   "sub",   0x11, false, Arithmetic, RdRs;
    Xsub:  "xsub",  0x11, true,  Arithmetic, RdImm;
    Mul:   "mul",   0x12, false, Arithmetic, RdRs;
    Xmul:  "xmul",  0x12, true,  Arithmetic, RdImm;
    Div:   "div",   0x13, false, Arithmetic, RdRs;
    Xdiv:  "xdiv",  0x13, true,  Arithmetic, RdImm;
    Mod:   "mod",   0x14, false, Arithmetic, RdRs;
    Xmod:  "xmod",  0x14, true,  Arithmetic, RdImm;
    Inc:   "inc",   0x15, false, Arithmetic, Rd;
    Dec:   "dec",   0x16, false, Arithmetic, Rd;
    // Shift / rotate (8)
    Shl:   "shl",   0x18, false, ShiftRotate, RdRs;
    Xshl:  "xshl",  0x18, true,  ShiftRotate, RdImm;
    Shr:   "shr",   0x19, false, ShiftRotate, RdRs;
    Xshr:  "xshr",  0x19, true,  ShiftRotate, RdImm;
    Sar:   "sar",   0x1A, false, ShiftRotate, RdRs;
    Xsar:  "xsar",  0x1A, true,  ShiftRotate, RdImm;
    Rol:   "rol",   0x1B, false, ShiftRotate, RdRs;
    Ror:   "ror",   0x1C, false, ShiftRotate, RdRs;
    // Logical (11)
    And:   "and",   0x20, false, Logical, RdRs;
    Xand:  "xand",  0x20, true,  Logical, RdImm;
    Or:    "or",    0x21, false, Logical, RdRs;
    Xior:  "xior",  0x21, true,  Logical, RdImm;
    Eor:   "eor",   0x22, false, Logical, RdRs;
    Xeor:  "xeor",  0x22, true,  Logical, RdImm;
    Not:   "not",   0x23, false, Logical, Rd;
    Test:  "test",  0x24, false, Logical, RdRs;
    Xtest: "xtest", 0x24, true,  Logical, RdImm;
    Cmp:   "cmp",   0x25, false, Logical, RdRs;
    Xcmp:  "xcmp",  0x25, true,  Logical, RdImm;
    // Bits and bytes (8)
    Bt:     "bt",     0x28, false, BitsBytes, RdRs;
    Xbt:    "xbt",    0x28, true,  BitsBytes, RdImm;
    Bts:    "bts",    0x29, false, BitsBytes, RdRs;
    Btr:    "btr",    0x2A, false, BitsBytes, RdRs;
    Btc:    "btc",    0x2B, false, BitsBytes, RdRs;
    Bsf:    "bsf",    0x2C, false, BitsBytes, RdRs;
    Bsr:    "bsr",    0x2D, false, BitsBytes, RdRs;
    Popcnt: "popcnt", 0x2E, false, BitsBytes, RdRs;
    // Flag control (6)
    Stc:   "stc",   0x30, false, FlagControl, None;
    Clc:   "clc",   0x31, false, FlagControl, None;
    Sti:   "sti",   0x32, false, FlagControl, None;
    Cli:   "cli",   0x33, false, FlagControl, None;
    Pushf: "pushf", 0x34, false, FlagControl, None;
    Popf:  "popf",  0x35, false, FlagControl, None;
    // Processor control (3)
    Nop:   "nop",   0x00, false, ProcessorControl, None;
    Hlt:   "hlt",   0x36, false, ProcessorControl, None;
    Stop:  "stop",  0x37, false, ProcessorControl, None;
    // Flow control (18)
    Jmp:   "jmp",   0x40, false, FlowControl, RegTarget;
    Xjmp:  "xjmp",  0x40, true,  FlowControl, ImmTarget;
    Jz:    "jz",    0x41, false, FlowControl, Target;
    Jnz:   "jnz",   0x42, false, FlowControl, Target;
    Jc:    "jc",    0x43, false, FlowControl, Target;
    Jnc:   "jnc",   0x44, false, FlowControl, Target;
    Js:    "js",    0x45, false, FlowControl, Target;
    Jns:   "jns",   0x46, false, FlowControl, Target;
    Jo:    "jo",    0x47, false, FlowControl, Target;
    Jno:   "jno",   0x48, false, FlowControl, Target;
    Call:  "call",  0x49, false, FlowControl, RegTarget;
    Xcall: "xcall", 0x49, true,  FlowControl, ImmTarget;
    Ret:   "ret",   0x4A, false, FlowControl, None;
    Int:   "int",   0x4B, false, FlowControl, Imm16;
    Iret:  "iret",  0x4C, false, FlowControl, None;
    Loop:  "loop",  0x4D, false, FlowControl, RdTarget;
    Jmpf:  "jmpf",  0x4E, false, FlowControl, SegTarget;
    Callf: "callf", 0x4F, false, FlowControl, SegTarget;
    // Memory protection (5)
    Pgon:   "pgon",   0x50, false, MemoryProtection, None;
    Pgoff:  "pgoff",  0x51, false, MemoryProtection, None;
    Tlbinv: "tlbinv", 0x52, false, MemoryProtection, None;
    Segon:  "segon",  0x53, false, MemoryProtection, None;
    Segoff: "segoff", 0x54, false, MemoryProtection, None;
    // I/O (3)
    In:    "in",    0x58, false, Io, InPort;
    Out:   "out",   0x59, false, Io, OutPort;
    Xout:  "xout",  0x59, true,  Io, ImmPort;
}

impl Opcode {
    /// Can this base opcode carry the immediate word without a dedicated
    /// `x` mnemonic? True for the flow-control instructions whose target may
    /// be an absolute address wider than 16 bits.
    pub fn promotes_to_imm(self) -> bool {
        matches!(self.shape(), Shape::Target | Shape::RdTarget | Shape::SegTarget)
    }

    /// The immediate twin of a base opcode (`mov` -> `xmov`), if one exists.
    pub fn x_form(self) -> Option<Opcode> {
        if self.is_x_form() {
            return Some(self);
        }
        Opcode::ALL
            .iter()
            .copied()
            .find(|o| o.is_x_form() && o.code() == self.code())
    }

    /// Look up a mnemonic (case-insensitive).
    pub fn from_mnemonic(m: &str) -> Option<Opcode> {
        let lower = m.to_ascii_lowercase();
        Opcode::ALL.iter().copied().find(|o| o.mnemonic() == lower)
    }

    pub fn bus_class(self) -> BusClass {
        use Opcode::*;
        match self {
            Ld | Xld | St | Xst | Push | Xpush | Pop | Pushf | Popf | Call | Xcall | Callf
            | Ret | Int | Iret => BusClass::MemoryReference,
            In | Out | Xout => BusClass::IoInstruction,
            _ => BusClass::None,
        }
    }
}

/// A decoded instruction. `imm32` is present exactly when the encoded form
/// is two words long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub rd: u8,
    pub rs: u8,
    pub imm16: i16,
    pub imm32: Option<Word>,
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Instruction {
        Instruction { opcode, rd: 0, rs: 0, imm16: 0, imm32: None }
    }

    pub fn with_rd(mut self, rd: u8) -> Instruction {
        self.rd = rd;
        self
    }

    pub fn with_rs(mut self, rs: u8) -> Instruction {
        self.rs = rs;
        self
    }

    pub fn with_imm16(mut self, imm16: i16) -> Instruction {
        self.imm16 = imm16;
        self
    }

    pub fn with_imm32(mut self, imm32: Word) -> Instruction {
        self.imm32 = Some(imm32);
        self
    }

    /// True when the encoding is two words.
    pub fn ximm(&self) -> bool {
        self.imm32.is_some()
    }

    pub fn len(&self) -> usize {
        if self.ximm() {
            2
        } else {
            1
        }
    }

    pub fn bus_class(&self) -> BusClass {
        self.opcode.bus_class()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("register field {field} out of range: {value} (must be < 16)")]
    RegisterOutOfRange { field: &'static str, value: u8 },
    #[error("{0} requires an immediate word")]
    MissingImmediate(&'static str),
    #[error("{0} does not take an immediate word")]
    UnexpectedImmediate(&'static str),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("two-word instruction truncated at word offset {at}")]
    Truncated { at: usize },
    #[error("no word available at offset {at}")]
    Empty { at: usize },
}

/// Result of decoding one instruction slot. An unassigned code (or an
/// immediate bit on an opcode that cannot carry one) is not a decode error:
/// it decodes to [`Decoded::Invalid`], which the CPU turns into exception 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Valid { inst: Instruction, len: usize },
    Invalid { raw: Word, len: usize },
}

impl Decoded {
    pub fn len(&self) -> usize {
        match *self {
            Decoded::Valid { len, .. } | Decoded::Invalid { len, .. } => len,
        }
    }
}

/// Encode an instruction into one or two words.
pub fn encode(inst: &Instruction) -> Result<Vec<Word>, EncodeError> {
    if inst.rd > 15 {
        return Err(EncodeError::RegisterOutOfRange { field: "rd", value: inst.rd });
    }
    if inst.rs > 15 {
        return Err(EncodeError::RegisterOutOfRange { field: "rs", value: inst.rs });
    }
    let op = inst.opcode;
    if op.is_x_form() || op.shape() == Shape::ImmTarget {
        if inst.imm32.is_none() {
            return Err(EncodeError::MissingImmediate(op.mnemonic()));
        }
    } else if inst.imm32.is_some() && !op.promotes_to_imm() {
        return Err(EncodeError::UnexpectedImmediate(op.mnemonic()));
    }
    let ximm = inst.ximm() as u32;
    let word0 = (ximm << 31)
        | ((op.code() as u32) << 24)
        | ((inst.rd as u32) << 20)
        | ((inst.rs as u32) << 16)
        | (inst.imm16 as u16 as u32);
    let mut words = vec![word0 as Word];
    if let Some(imm) = inst.imm32 {
        words.push(imm);
    }
    Ok(words)
}

// Lookup planes: index [ximm][code]. Built once, on first use.
fn planes() -> &'static [[Option<Opcode>; 128]; 2] {
    use std::sync::OnceLock;
    static PLANES: OnceLock<[[Option<Opcode>; 128]; 2]> = OnceLock::new();
    PLANES.get_or_init(|| {
        let mut p: [[Option<Opcode>; 128]; 2] = [[None; 128], [None; 128]];
        for &op in Opcode::ALL {
            let plane = op.is_x_form() as usize;
            debug_assert!(p[plane][op.code() as usize].is_none());
            p[plane][op.code() as usize] = Some(op);
        }
        // Flow-control opcodes without an x twin still accept the
        // immediate word for their absolute target.
        for &op in Opcode::ALL {
            if op.promotes_to_imm() {
                p[1][op.code() as usize] = Some(op);
            }
        }
        p
    })
}

/// Decode the instruction starting at `words[at]`.
pub fn decode(words: &[Word], at: usize) -> Result<Decoded, DecodeError> {
    let w0 = *words.get(at).ok_or(DecodeError::Empty { at })? as u32;
    let ximm = (w0 >> 31) != 0;
    let len = if ximm { 2 } else { 1 };
    let imm32 = if ximm {
        Some(*words.get(at + 1).ok_or(DecodeError::Truncated { at })?)
    } else {
        None
    };
    let code = ((w0 >> 24) & 0x7F) as usize;
    match planes()[ximm as usize][code] {
        Some(opcode) => Ok(Decoded::Valid {
            inst: Instruction {
                opcode,
                rd: ((w0 >> 20) & 0xF) as u8,
                rs: ((w0 >> 16) & 0xF) as u8,
                imm16: (w0 & 0xFFFF) as u16 as i16,
                imm32,
            },
            len,
        }),
        None => Ok(Decoded::Invalid { raw: w0 as Word, len }),
    }
}

/// One row of the exported roster table.
#[derive(Debug, Clone, Copy)]
pub struct RosterEntry {
    pub opcode: Opcode,
    pub code: u8,
    pub ximm: bool,
    pub mnemonic: &'static str,
    pub group: Group,
    pub shape: Shape,
}

/// The full instruction roster, in group order.
pub fn roster() -> Vec<RosterEntry> {
    Opcode::ALL
        .iter()
        .map(|&op| RosterEntry {
            opcode: op,
            code: op.code(),
            ximm: op.is_x_form(),
            mnemonic: op.mnemonic(),
            group: op.group(),
            shape: op.shape(),
        })
        .collect()
}

/// Number of roster entries in a group.
pub fn group_count(group: Group) -> usize {
    Opcode::ALL.iter().filter(|o| o.group() == group).count()
}

/// Machine-readable roster dump: one line per opcode with the encoded
/// discriminator, mnemonic, group, and operand shape.
pub fn roster_text() -> String {
    let mut out = String::from("# code ximm mnemonic group shape\n");
    for e in roster() {
        out.push_str(&format!(
            "0x{:02X} {} {} {} {:?}\n",
            e.code,
            e.ximm as u8,
            e.mnemonic,
            e.group.name(),
            e.shape
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts_match_budget() {
        let expected = [
            (Group::DataMovement, 13),
            (Group::Arithmetic, 12),
            (Group::ShiftRotate, 8),
            (Group::Logical, 11),
            (Group::BitsBytes, 8),
            (Group::FlagControl, 6),
            (Group::ProcessorControl, 3),
            (Group::FlowControl, 18),
            (Group::MemoryProtection, 5),
            (Group::Io, 3),
        ];
        for (g, n) in expected {
            assert_eq!(group_count(g), n, "group {:?}", g);
        }
        assert_eq!(Opcode::ALL.len(), 87);
    }

    #[test]
    fn discriminators_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for &op in Opcode::ALL {
            assert!(op.code() < 128);
            assert!(seen.insert((op.code(), op.is_x_form())), "duplicate {:?}", op);
        }
        // base codes are distinct among the non-x mnemonics too
        let mut base = std::collections::HashSet::new();
        for &op in Opcode::ALL {
            if !op.is_x_form() {
                assert!(base.insert(op.code()));
            }
        }
    }

    #[test]
    fn nop_is_all_zero() {
        assert_eq!(Opcode::Nop.code(), 0);
        assert_eq!(encode(&Instruction::new(Opcode::Nop)).unwrap(), vec![0]);
        match decode(&[0], 0).unwrap() {
            Decoded::Valid { inst, len } => {
                assert_eq!(inst.opcode, Opcode::Nop);
                assert_eq!(len, 1);
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn encode_mov_example() {
        // mov %r1, %r2 -> 0x01120000
        let i = Instruction::new(Opcode::Mov).with_rd(1).with_rs(2);
        assert_eq!(encode(&i).unwrap(), vec![0x01120000]);
    }

    #[test]
    fn encode_xmov_example() {
        // xmov %r1, 10000000 -> [0x81100000, 0x00989680]
        let i = Instruction::new(Opcode::Xmov).with_rd(1).with_imm32(10_000_000);
        assert_eq!(encode(&i).unwrap(), vec![0x81100000u32 as i32, 0x00989680]);
    }

    #[test]
    fn decode_xmov_example() {
        let d = decode(&[0x81100000u32 as i32, 0x00989680], 0).unwrap();
        match d {
            Decoded::Valid { inst, len } => {
                assert_eq!(len, 2);
                assert_eq!(inst.opcode, Opcode::Xmov);
                assert_eq!(inst.rd, 1);
                assert_eq!(inst.imm32, Some(10_000_000));
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn unassigned_code_is_invalid_marker() {
        let w = (0x7Fu32 << 24) as i32;
        assert_eq!(decode(&[w], 0).unwrap(), Decoded::Invalid { raw: w, len: 1 });
    }

    #[test]
    fn truncated_two_word_is_error() {
        let w = 0x81100000u32 as i32;
        assert_eq!(decode(&[w], 0), Err(DecodeError::Truncated { at: 0 }));
        assert_eq!(decode(&[], 0), Err(DecodeError::Empty { at: 0 }));
    }

    #[test]
    fn bus_classes() {
        assert_eq!(Opcode::Ld.bus_class(), BusClass::MemoryReference);
        assert_eq!(Opcode::Out.bus_class(), BusClass::IoInstruction);
        assert_eq!(Opcode::Add.bus_class(), BusClass::None);
        assert_eq!(Opcode::Push.bus_class(), BusClass::MemoryReference);
        assert_eq!(Opcode::Iret.bus_class(), BusClass::MemoryReference);
    }

    #[test]
    fn field_range_errors_name_the_field() {
        let i = Instruction::new(Opcode::Mov).with_rd(16);
        assert_eq!(
            encode(&i),
            Err(EncodeError::RegisterOutOfRange { field: "rd", value: 16 })
        );
    }

    #[test]
    fn conditional_jump_promotes() {
        // jnz with an immediate word target decodes back to jnz
        let i = Instruction::new(Opcode::Jnz).with_imm32(2);
        let w = encode(&i).unwrap();
        assert_eq!(w.len(), 2);
        match decode(&w, 0).unwrap() {
            Decoded::Valid { inst, len } => {
                assert_eq!(inst.opcode, Opcode::Jnz);
                assert_eq!(len, 2);
                assert_eq!(inst.imm32, Some(2));
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn non_promoting_opcode_with_msb_is_invalid() {
        // inc cannot carry an immediate word
        let w0 = ((1u32 << 31) | ((Opcode::Inc.code() as u32) << 24)) as i32;
        match decode(&[w0, 5], 0).unwrap() {
            Decoded::Invalid { len, .. } => assert_eq!(len, 2),
            other => panic!("{:?}", other),
        }
    }
}
