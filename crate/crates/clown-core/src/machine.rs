//! CPU state and the fetch-decode-execute cycle: flag semantics, the two
//! privilege levels, and the interrupt controller with queuing, priorities
//! and nesting.
//!
//! Register conventions: %r13 is the stack pointer, %r14 the page-table
//! base, %r15 receives the faulting logical address on a page fault.
//! Instruction fetch uses %s0, data accesses %s1, and the stack %s2 when
//! segmentation is enabled.
//!
//! Vector map: the interrupt vector lives at physical `iv_base` (default 0)
//! and has 32 one-word entries. Vectors 0-15 are CPU exceptions (0 invalid
//! opcode, 1 divide by zero, 2 segment violation, 3 page fault, 4 privilege
//! violation, 5-15 reserved); vectors 16-31 are the 16 IRQ channels. Lower
//! vector numbers have higher priority.
//!
//! Dispatch pushes flags, %s0 and the return offset (three words,
//! descending) on the stack at %r13. The hidden privilege level rides in
//! bit 15 of the saved flags word so that `iret` can restore it; `pushf`
//! never exposes it.

use thiserror::Error;

use crate::isa::{self, BusClass, Decoded, Instruction, Opcode};
use crate::memory::{MemorySystem, SimFault};
use crate::mmu::{Access, Mmu, TranslateFault, IMPLICIT_SEGMENT};
use crate::word::Word;

pub const EXC_INVALID_OPCODE: u8 = 0;
pub const EXC_DIVIDE_BY_ZERO: u8 = 1;
pub const EXC_SEGMENT_VIOLATION: u8 = 2;
pub const EXC_PAGE_FAULT: u8 = 3;
pub const EXC_PRIVILEGE: u8 = 4;
/// First IRQ vector: channel `c` raises vector `IRQ_VECTOR_BASE + c`.
pub const IRQ_VECTOR_BASE: u8 = 16;

pub const SEG_CODE: usize = 0;
pub const SEG_DATA: usize = 1;
pub const SEG_STACK: usize = 2;

const FLAG_C: u16 = 1 << 0;
const FLAG_Z: u16 = 1 << 1;
const FLAG_S: u16 = 1 << 2;
const FLAG_O: u16 = 1 << 3;
const FLAG_I: u16 = 1 << 4;
const IOPL_SHIFT: u16 = 5;
/// The seven externally visible flag bits.
const FLAG_VISIBLE: u16 = 0x7F;
/// Hidden privilege level, stored only in interrupt frames.
const FRAME_CPL: u16 = 1 << 15;

/// The 16-bit flag register. Only seven bits are externally visible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags(pub u16);

impl Flags {
    pub fn c(self) -> bool {
        self.0 & FLAG_C != 0
    }
    pub fn z(self) -> bool {
        self.0 & FLAG_Z != 0
    }
    pub fn s(self) -> bool {
        self.0 & FLAG_S != 0
    }
    pub fn o(self) -> bool {
        self.0 & FLAG_O != 0
    }
    pub fn i(self) -> bool {
        self.0 & FLAG_I != 0
    }
    pub fn iopl(self) -> u8 {
        ((self.0 >> IOPL_SHIFT) & 0b11) as u8
    }

    pub fn set_c(&mut self, v: bool) {
        self.set(FLAG_C, v)
    }
    pub fn set_z(&mut self, v: bool) {
        self.set(FLAG_Z, v)
    }
    pub fn set_s(&mut self, v: bool) {
        self.set(FLAG_S, v)
    }
    pub fn set_o(&mut self, v: bool) {
        self.set(FLAG_O, v)
    }
    pub fn set_i(&mut self, v: bool) {
        self.set(FLAG_I, v)
    }

    fn set(&mut self, bit: u16, v: bool) {
        if v {
            self.0 |= bit;
        } else {
            self.0 &= !bit;
        }
    }

    fn set_zs(&mut self, value: Word) {
        self.set_z(value == 0);
        self.set_s(value < 0);
    }

    /// What `pushf` exposes: bits 7-15 read as zero.
    pub fn visible(self) -> Word {
        (self.0 & FLAG_VISIBLE) as Word
    }
}

/// Pending/in-service interrupt state.
#[derive(Debug, Clone, Default)]
pub struct InterruptController {
    /// Latched vectors 0-31, one bit each.
    pub pending: u32,
    /// Stack of vectors being serviced; priorities strictly increase
    /// toward the top (lower number = higher priority).
    pub in_service: Vec<u8>,
    /// Physical word address of the 32-entry interrupt vector.
    pub iv_base: u32,
}

/// I/O port space seen by `in`/`out`. The system scheduler supplies the
/// device dispatch; tests can plug in stubs.
pub trait IoPorts {
    fn io_read(&mut self, port: u16) -> Word;
    fn io_write(&mut self, port: u16, value: Word);
}

/// An I/O space with nothing attached: reads return 0, writes vanish.
pub struct NullPorts;

impl IoPorts for NullPorts {
    fn io_read(&mut self, _port: u16) -> Word {
        0
    }
    fn io_write(&mut self, _port: u16, _value: Word) {}
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Sim(#[from] SimFault),
    #[error("double fault dispatching vector {vector} (cycle {cycle}): {reason}")]
    DoubleFault { vector: u8, cycle: u64, reason: &'static str },
}

/// What one cycle did, for tracing and arbitration.
#[derive(Debug, Clone, Copy)]
pub struct CycleReport {
    /// The executed (or attempted) instruction; `None` during halt idling.
    pub inst: Option<Instruction>,
    pub bus_class: BusClass,
    /// True if the instruction completed; false for idle cycles and
    /// exception-aborted attempts.
    pub retired: bool,
    /// Program counter the instruction was fetched from.
    pub pc: u32,
}

#[derive(Debug, Clone, Copy)]
struct PendingException {
    vector: u8,
    /// Faulting logical address, delivered to %r15 (page faults).
    fault_addr: Option<u32>,
}

enum Trap {
    Exc(PendingException),
    Sim(SimFault),
}

impl From<SimFault> for Trap {
    fn from(f: SimFault) -> Trap {
        Trap::Sim(f)
    }
}

fn exc(vector: u8) -> Trap {
    Trap::Exc(PendingException { vector, fault_addr: None })
}

pub struct Cpu {
    pub r: [Word; 16],
    pub s: [Word; 8],
    pub flags: Flags,
    pub pc: u32,
    /// Last fetched instruction word.
    pub ir: Word,
    /// Hidden privilege level: 0 kernel, 1 user.
    pub cpl: u8,
    pub halted: bool,
    pub stopped: bool,
    pub intc: InterruptController,
    pub cycles: u64,
    pub instructions: u64,
    pending_exception: Option<PendingException>,
    pending_soft_int: Option<u8>,
}

impl Default for Cpu {
    fn default() -> Cpu {
        Cpu::reset()
    }
}

impl Cpu {
    /// Power-on state: execution starts at offset 0 with interrupts
    /// disabled, kernel privilege, and both MMU mechanisms off (the MMU
    /// itself defaults to off; %s0 holds the implicit full-memory segment).
    pub fn reset() -> Cpu {
        let mut s = [0; 8];
        s[0] = IMPLICIT_SEGMENT;
        Cpu {
            r: [0; 16],
            s,
            flags: Flags(0),
            pc: 0,
            ir: 0,
            cpl: 0,
            halted: false,
            stopped: false,
            intc: InterruptController::default(),
            cycles: 0,
            instructions: 0,
            pending_exception: None,
            pending_soft_int: None,
        }
    }

    /// Latch IRQ channel 0-15; it becomes dispatchable at the end of the
    /// current cycle at the earliest.
    pub fn raise_irq(&mut self, channel: u8) {
        assert!(channel < 16);
        self.intc.pending |= 1 << (IRQ_VECTOR_BASE + channel);
    }

    fn translate(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        offset: u32,
        seg: usize,
        access: Access,
    ) -> Result<u32, Trap> {
        match mmu.translate(mem, &self.s, self.r[14], offset, seg, access, self.cpl)? {
            Ok(phys) => Ok(phys),
            Err(TranslateFault::Segment { .. }) => Err(exc(EXC_SEGMENT_VIOLATION)),
            Err(TranslateFault::Page { linear }) => Err(Trap::Exc(PendingException {
                vector: EXC_PAGE_FAULT,
                fault_addr: Some(linear),
            })),
        }
    }

    fn read(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        offset: u32,
        seg: usize,
    ) -> Result<Word, Trap> {
        let phys = self.translate(mem, mmu, offset, seg, Access::Read)?;
        Ok(mem.cpu_read(phys)?)
    }

    fn write(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        offset: u32,
        seg: usize,
        value: Word,
    ) -> Result<(), Trap> {
        let phys = self.translate(mem, mmu, offset, seg, Access::Write)?;
        Ok(mem.cpu_write(phys, value)?)
    }

    fn push(&mut self, mem: &mut MemorySystem, mmu: &mut Mmu, value: Word) -> Result<(), Trap> {
        let sp = (self.r[13] as u32).wrapping_sub(1);
        self.write(mem, mmu, sp, SEG_STACK, value)?;
        self.r[13] = sp as Word;
        Ok(())
    }

    fn pop(&mut self, mem: &mut MemorySystem, mmu: &mut Mmu) -> Result<Word, Trap> {
        let sp = self.r[13] as u32;
        let v = self.read(mem, mmu, sp, SEG_STACK)?;
        self.r[13] = sp.wrapping_add(1) as Word;
        Ok(v)
    }

    /// Execute one cycle: fetch, decode, execute. Interrupt dispatch is a
    /// separate end-of-cycle step ([`Cpu::end_of_cycle`]); the system
    /// scheduler runs device ticks in between.
    pub fn step(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        io: &mut dyn IoPorts,
    ) -> Result<CycleReport, MachineError> {
        assert!(!self.stopped, "step() on a stopped CPU");
        self.cycles += 1;
        let pc = self.pc;
        if self.halted {
            // idle cycle; only an interrupt ends it
            return Ok(CycleReport { inst: None, bus_class: BusClass::None, retired: false, pc });
        }
        match self.fetch_execute(mem, mmu, io) {
            Ok(report) => Ok(report),
            Err(Trap::Exc(e)) => {
                self.pending_exception = Some(e);
                Ok(CycleReport { inst: None, bus_class: BusClass::None, retired: false, pc })
            }
            Err(Trap::Sim(f)) => Err(f.into()),
        }
    }

    fn fetch_execute(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        io: &mut dyn IoPorts,
    ) -> Result<CycleReport, Trap> {
        let pc = self.pc;
        let phys0 = self.translate(mem, mmu, pc, SEG_CODE, Access::Fetch)?;
        let w0 = mem.cpu_read(phys0)?;
        self.ir = w0;
        let two = (w0 as u32) >> 31 != 0;
        let mut words = [w0, 0];
        if two {
            let phys1 = self.translate(mem, mmu, pc.wrapping_add(1), SEG_CODE, Access::Fetch)?;
            words[1] = mem.cpu_read(phys1)?;
        }
        let decoded = isa::decode(&words[..if two { 2 } else { 1 }], 0)
            .map_err(|_| exc(EXC_INVALID_OPCODE))?;
        let inst = match decoded {
            Decoded::Invalid { .. } => return Err(exc(EXC_INVALID_OPCODE)),
            Decoded::Valid { inst, .. } => inst,
        };
        let next_pc = pc.wrapping_add(inst.len() as u32);
        self.pc = next_pc;
        match self.execute(mem, mmu, io, &inst, next_pc) {
            Ok(()) => {
                self.instructions += 1;
                Ok(CycleReport {
                    inst: Some(inst),
                    bus_class: inst.bus_class(),
                    retired: true,
                    pc,
                })
            }
            Err(t) => {
                // abort: the instruction restarts after the handler returns
                self.pc = pc;
                Err(t)
            }
        }
    }

    fn require_kernel(&self) -> Result<(), Trap> {
        if self.cpl == 0 {
            Ok(())
        } else {
            Err(exc(EXC_PRIVILEGE))
        }
    }

    fn require_iopl(&self) -> Result<(), Trap> {
        if self.cpl <= self.flags.iopl() {
            Ok(())
        } else {
            Err(exc(EXC_PRIVILEGE))
        }
    }

    fn add_flags(&mut self, a: Word, b: Word) -> Word {
        let r = a.wrapping_add(b);
        self.flags.set_c(((a as u32 as u64) + (b as u32 as u64)) > u32::MAX as u64);
        self.flags.set_o(a.checked_add(b).is_none());
        self.flags.set_zs(r);
        r
    }

    fn sub_flags(&mut self, a: Word, b: Word) -> Word {
        let r = a.wrapping_sub(b);
        self.flags.set_c((a as u32) < (b as u32));
        self.flags.set_o(a.checked_sub(b).is_none());
        self.flags.set_zs(r);
        r
    }

    fn logic_flags(&mut self, r: Word) {
        self.flags.set_c(false);
        self.flags.set_o(false);
        self.flags.set_zs(r);
    }

    fn execute(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        io: &mut dyn IoPorts,
        inst: &Instruction,
        next_pc: u32,
    ) -> Result<(), Trap> {
        use Opcode::*;
        let rd = inst.rd as usize;
        let rs = inst.rs as usize;
        let imm = inst.imm32.unwrap_or(0);
        let disp = inst.imm16 as i32;
        // absolute flow-control target: immediate word if present, else imm16
        let target = inst.imm32.unwrap_or(inst.imm16 as i32) as u32;
        match inst.opcode {
            Nop => {}
            Mov => self.r[rd] = self.r[rs],
            Xmov => self.r[rd] = imm,
            Ld => {
                let addr = (self.r[rs] as u32).wrapping_add(disp as u32);
                self.r[rd] = self.read(mem, mmu, addr, SEG_DATA)?;
            }
            Xld => self.r[rd] = self.read(mem, mmu, imm as u32, SEG_DATA)?,
            St => {
                let addr = (self.r[rd] as u32).wrapping_add(disp as u32);
                self.write(mem, mmu, addr, SEG_DATA, self.r[rs])?;
            }
            Xst => self.write(mem, mmu, imm as u32, SEG_DATA, self.r[rs])?,
            Push => self.push(mem, mmu, self.r[rs])?,
            Xpush => self.push(mem, mmu, imm)?,
            Pop => self.r[rd] = self.pop(mem, mmu)?,
            Lds => {
                self.require_kernel()?;
                self.s[rd & 7] = self.r[rs];
            }
            Sts => {
                self.require_kernel()?;
                self.r[rd] = self.s[rs & 7];
            }
            Swap => self.r.swap(rd, rs),
            Lea => self.r[rd] = (self.r[rs] as u32).wrapping_add(disp as u32) as Word,

            Add => self.r[rd] = self.add_flags(self.r[rd], self.r[rs]),
            Xadd => self.r[rd] = self.add_flags(self.r[rd], imm),
            Sub => self.r[rd] = self.sub_flags(self.r[rd], self.r[rs]),
            Xsub => self.r[rd] = self.sub_flags(self.r[rd], imm),
            Mul | Xmul => {
                let b = if inst.opcode == Mul { self.r[rs] } else { imm };
                let wide = self.r[rd] as i64 * b as i64;
                let r = wide as Word;
                let overflow = wide != r as i64;
                self.flags.set_c(overflow);
                self.flags.set_o(overflow);
                self.flags.set_zs(r);
                self.r[rd] = r;
            }
            Div | Xdiv | Mod | Xmod => {
                let b = if inst.ximm() { imm } else { self.r[rs] };
                if b == 0 {
                    return Err(exc(EXC_DIVIDE_BY_ZERO));
                }
                let a = self.r[rd];
                self.r[rd] = match inst.opcode {
                    Div | Xdiv => a.wrapping_div(b),
                    _ => a.wrapping_rem(b),
                };
            }
            Inc | Dec => {
                let c = self.flags.c(); // inc/dec preserve carry
                let one = 1;
                self.r[rd] = if inst.opcode == Inc {
                    self.add_flags(self.r[rd], one)
                } else {
                    self.sub_flags(self.r[rd], one)
                };
                self.flags.set_c(c);
            }

            Shl | Xshl | Shr | Xshr | Sar | Xsar => {
                let count = (if inst.ximm() { imm } else { self.r[rs] } as u32) & 31;
                let a = self.r[rd];
                let r = match inst.opcode {
                    Shl | Xshl => {
                        if count > 0 {
                            self.flags.set_c((a as u32) >> (32 - count) & 1 != 0);
                        }
                        a.wrapping_shl(count)
                    }
                    Shr | Xshr => {
                        if count > 0 {
                            self.flags.set_c((a as u32) >> (count - 1) & 1 != 0);
                        }
                        ((a as u32) >> count) as Word
                    }
                    _ => {
                        if count > 0 {
                            self.flags.set_c((a >> (count - 1)) & 1 != 0);
                        }
                        a >> count
                    }
                };
                self.flags.set_o(false);
                self.flags.set_zs(r);
                self.r[rd] = r;
            }
            Rol | Ror => {
                let count = (self.r[rs] as u32) & 31;
                let a = self.r[rd] as u32;
                let r = if inst.opcode == Rol { a.rotate_left(count) } else { a.rotate_right(count) }
                    as Word;
                if count > 0 {
                    self.flags.set_c(if inst.opcode == Rol { r & 1 != 0 } else { r < 0 });
                }
                self.flags.set_zs(r);
                self.r[rd] = r;
            }

            And | Xand => {
                let r = self.r[rd] & if inst.ximm() { imm } else { self.r[rs] };
                self.logic_flags(r);
                self.r[rd] = r;
            }
            Or | Xior => {
                let r = self.r[rd] | if inst.ximm() { imm } else { self.r[rs] };
                self.logic_flags(r);
                self.r[rd] = r;
            }
            Eor | Xeor => {
                let r = self.r[rd] ^ if inst.ximm() { imm } else { self.r[rs] };
                self.logic_flags(r);
                self.r[rd] = r;
            }
            Not => self.r[rd] = !self.r[rd],
            Test | Xtest => {
                let r = self.r[rd] & if inst.ximm() { imm } else { self.r[rs] };
                self.logic_flags(r);
            }
            Cmp | Xcmp => {
                let b = if inst.ximm() { imm } else { self.r[rs] };
                self.sub_flags(self.r[rd], b);
            }

            Bt | Xbt | Bts | Btr | Btc => {
                let bit = (if inst.ximm() { imm } else { self.r[rs] } as u32) & 31;
                let mask = 1 << bit;
                let a = self.r[rd] as u32;
                self.flags.set_c(a & mask != 0);
                self.r[rd] = match inst.opcode {
                    Bts => a | mask,
                    Btr => a & !mask,
                    Btc => a ^ mask,
                    _ => a,
                } as Word;
            }
            Bsf | Bsr => {
                let v = self.r[rs] as u32;
                if v == 0 {
                    self.flags.set_z(true);
                } else {
                    self.flags.set_z(false);
                    self.r[rd] =
                        if inst.opcode == Bsf { v.trailing_zeros() } else { 31 - v.leading_zeros() }
                            as Word;
                }
            }
            Popcnt => {
                let r = (self.r[rs] as u32).count_ones() as Word;
                self.logic_flags(r);
                self.r[rd] = r;
            }

            Stc => self.flags.set_c(true),
            Clc => self.flags.set_c(false),
            Sti => {
                self.require_kernel()?;
                self.flags.set_i(true);
            }
            Cli => {
                self.require_kernel()?;
                self.flags.set_i(false);
            }
            Pushf => self.push(mem, mmu, self.flags.visible())?,
            Popf => {
                let v = self.pop(mem, mmu)? as u16;
                if self.cpl == 0 {
                    self.flags.0 = v & FLAG_VISIBLE;
                } else {
                    // user mode cannot change I or IOPL
                    let keep = self.flags.0 & (FLAG_I | (0b11 << IOPL_SHIFT));
                    self.flags.0 = (v & (FLAG_C | FLAG_Z | FLAG_S | FLAG_O)) | keep;
                }
            }

            Hlt => {
                self.require_iopl()?;
                self.halted = true;
            }
            Stop => {
                self.require_kernel()?;
                self.stopped = true;
            }

            Jmp => self.pc = self.r[rs] as u32,
            Xjmp => self.pc = target,
            Jz => self.branch(self.flags.z(), target),
            Jnz => self.branch(!self.flags.z(), target),
            Jc => self.branch(self.flags.c(), target),
            Jnc => self.branch(!self.flags.c(), target),
            Js => self.branch(self.flags.s(), target),
            Jns => self.branch(!self.flags.s(), target),
            Jo => self.branch(self.flags.o(), target),
            Jno => self.branch(!self.flags.o(), target),
            Call => {
                self.push(mem, mmu, next_pc as Word)?;
                self.pc = self.r[rs] as u32;
            }
            Xcall => {
                self.push(mem, mmu, next_pc as Word)?;
                self.pc = target;
            }
            Ret => self.pc = self.pop(mem, mmu)? as u32,
            Int => {
                let vector = inst.imm16 as u16;
                if vector >= 32 {
                    return Err(exc(EXC_INVALID_OPCODE));
                }
                let entry = mem.cpu_read(self.intc.iv_base + vector as u32)?;
                let allowed = if entry & 1 != 0 {
                    let prot = ((entry as u32) >> 1) & 0b11;
                    self.cpl as u32 <= prot
                } else {
                    // descriptor-form entries are kernel-only via int
                    self.cpl == 0
                };
                if !allowed {
                    return Err(exc(EXC_PRIVILEGE));
                }
                self.pending_soft_int = Some(vector as u8);
            }
            Iret => {
                let pc = self.pop(mem, mmu)? as u32;
                let s0 = self.pop(mem, mmu)?;
                let f = self.pop(mem, mmu)? as u16;
                self.pc = pc;
                self.s[0] = s0;
                self.cpl = ((f & FRAME_CPL) != 0) as u8;
                self.flags.0 = f & FLAG_VISIBLE;
                self.intc.in_service.pop();
            }
            Loop => {
                self.r[rd] = self.r[rd].wrapping_sub(1);
                if self.r[rd] != 0 {
                    self.pc = target;
                }
            }
            Jmpf => {
                self.s[0] = self.s[rd & 7];
                self.pc = target;
            }
            Callf => {
                // far return: pop the offset yourself, then restore %s0
                self.push(mem, mmu, self.s[0])?;
                self.push(mem, mmu, next_pc as Word)?;
                self.s[0] = self.s[rd & 7];
                self.pc = target;
            }

            Pgon | Pgoff => {
                self.require_kernel()?;
                mmu.set_paging(inst.opcode == Pgon);
            }
            Segon | Segoff => {
                self.require_kernel()?;
                mmu.set_segmentation(inst.opcode == Segon);
            }
            Tlbinv => {
                self.require_kernel()?;
                mmu.tlb_invalidate();
            }

            In => {
                self.require_iopl()?;
                mem.note_cpu_io();
                self.r[rd] = io.io_read(inst.imm16 as u16 & 0xFF);
            }
            Out | Xout => {
                self.require_iopl()?;
                let v = if inst.ximm() { imm } else { self.r[rs] };
                mem.note_cpu_io();
                io.io_write(inst.imm16 as u16 & 0xFF, v);
            }
        }
        Ok(())
    }

    #[inline]
    fn branch(&mut self, taken: bool, target: u32) {
        if taken {
            self.pc = target;
        }
    }

    /// End-of-cycle interrupt decision: a CPU exception dispatches first
    /// (regardless of the I flag), then a pending software `int`, then the
    /// highest-priority latched IRQ that outranks the current in-service
    /// top — and only when interrupts are enabled.
    pub fn end_of_cycle(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
    ) -> Result<Option<u8>, MachineError> {
        if let Some(e) = self.pending_exception.take() {
            if self.intc.in_service.last().is_some_and(|&top| e.vector >= top) {
                return Err(MachineError::DoubleFault {
                    vector: e.vector,
                    cycle: self.cycles,
                    reason: "exception raised while servicing an equal or higher priority vector",
                });
            }
            if let Some(addr) = e.fault_addr {
                self.r[15] = addr as Word;
            }
            self.dispatch(mem, mmu, e.vector)?;
            return Ok(Some(e.vector));
        }
        if let Some(v) = self.pending_soft_int.take() {
            self.dispatch(mem, mmu, v)?;
            return Ok(Some(v));
        }
        if self.flags.i() && self.intc.pending != 0 {
            let v = self.intc.pending.trailing_zeros() as u8;
            let outranks = self.intc.in_service.last().map_or(true, |&top| v < top);
            if outranks {
                self.intc.pending &= !(1u32 << v);
                self.dispatch(mem, mmu, v)?;
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    /// Enter the handler for `vector`: push flags (with the hidden CPL in
    /// bit 15), %s0 and the return offset, then load the entry point from
    /// the interrupt vector. A fault while pushing the frame is a double
    /// fault and halts the simulator with a diagnostic.
    pub fn dispatch(
        &mut self,
        mem: &mut MemorySystem,
        mmu: &mut Mmu,
        vector: u8,
    ) -> Result<(), MachineError> {
        let frame_flags =
            (self.flags.visible() as u16 | if self.cpl != 0 { FRAME_CPL } else { 0 }) as Word;
        let frame = [frame_flags, self.s[0], self.pc as Word];
        for &w in &frame {
            match self.push(mem, mmu, w) {
                Ok(()) => {}
                Err(Trap::Sim(f)) => return Err(f.into()),
                Err(Trap::Exc(_)) => {
                    return Err(MachineError::DoubleFault {
                        vector,
                        cycle: self.cycles,
                        reason: "fault while pushing the interrupt frame",
                    })
                }
            }
        }
        let entry = mem.cpu_read(self.intc.iv_base + vector as u32)?;
        if entry & 1 != 0 {
            // direct-address mode: 8-word aligned entry point
            self.pc = (entry as u32) & !7;
        } else {
            self.s[0] = entry;
            self.pc = 0;
        }
        self.flags.set_i(false);
        self.cpl = 0;
        self.halted = false;
        self.intc.in_service.push(vector);
        Ok(())
    }
}
