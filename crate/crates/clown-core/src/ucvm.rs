//! The DMA controller, implemented as a tiny microcontroller (the μCVM)
//! running firmware out of a 64-word program store.
//!
//! μCVM instruction encoding (one 32-bit word, immediates in a second
//! word): opcode in bits 31-28, register field `a` in bits 27-25, register
//! field `b` in bits 24-22, and the port / jump-target / displacement in
//! the low 16 bits. Opcodes: 0 NOP, 1 JEQ, 2 JMP, 3 END, 4 xMOVI,
//! 5 xADDI, 6 xCMPI, 8 OUT, 9 IN, A ST, B LD, C xOUTI; 7, D, E and F are
//! reserved and fault the VM.
//!
//! Bus rule: LD, ST, IN, OUT and xOUTI are bus instructions and stall
//! (pc unchanged) in any cycle where the main CPU is using the bus; all
//! other instructions always execute. LD/ST address physical memory
//! through the snooping DMA path, keeping the cache coherent.
//!
//! Port space seen by the firmware: ports 0x00-0x0F are the engine's own
//! mailbox (0x00 direction, 0x01 memory address, 0x02 track, 0x03 sector,
//! 0x05 error-out, 0x06 completion: writing 1 marks the transfer done and
//! raises the host IRQ if enabled); ports 0x10 and up pass through to the
//! system I/O bus, so the firmware talks to the disk controller at its
//! configured base.
//!
//! Host-visible engine registers (default base 0x40): +0 direction
//! (0 disk to memory, 1 memory to disk), +1 memory word address, +2 track,
//! +3 sector, +4 command (writing 1 starts the firmware at pc 0; the
//! engine also latches track/sector into the disk controller and resets
//! its buffer cursor), +5 status (read: bit0 busy, bit1 done, bit2 error,
//! done/error clear on read; write: bit0 enables the completion IRQ).

use thiserror::Error;

use crate::devices::{Devices, IrqSink};
use crate::memory::MemorySystem;
use crate::word::Word;

pub const UCVM_STORE_WORDS: usize = 64;
/// The shipped firmware must fit in 132 bytes.
pub const FIRMWARE_LIMIT_WORDS: usize = 33;

/// First pass-through port; lower ports are the internal mailbox.
pub const INTERNAL_PORT_LIMIT: u16 = 0x10;
pub const MBOX_DIRECTION: u16 = 0x00;
pub const MBOX_MEM_ADDR: u16 = 0x01;
pub const MBOX_TRACK: u16 = 0x02;
pub const MBOX_SECTOR: u16 = 0x03;
pub const MBOX_ERROR: u16 = 0x05;
pub const MBOX_COMPLETE: u16 = 0x06;

pub const DIR_DISK_TO_MEM: Word = 0;
pub const DIR_MEM_TO_DISK: Word = 1;

#[derive(Debug, Error)]
pub enum FirmwareError {
    #[error("firmware is {0} words; the program store holds {UCVM_STORE_WORDS}")]
    Oversize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UcvmOp {
    Nop,
    Jeq,
    Jmp,
    End,
    Movi,
    Addi,
    Cmpi,
    Out,
    In,
    St,
    Ld,
    Outi,
}

impl UcvmOp {
    pub fn code(self) -> u32 {
        match self {
            UcvmOp::Nop => 0x0,
            UcvmOp::Jeq => 0x1,
            UcvmOp::Jmp => 0x2,
            UcvmOp::End => 0x3,
            UcvmOp::Movi => 0x4,
            UcvmOp::Addi => 0x5,
            UcvmOp::Cmpi => 0x6,
            UcvmOp::Out => 0x8,
            UcvmOp::In => 0x9,
            UcvmOp::St => 0xA,
            UcvmOp::Ld => 0xB,
            UcvmOp::Outi => 0xC,
        }
    }

    pub fn from_code(code: u32) -> Option<UcvmOp> {
        Some(match code {
            0x0 => UcvmOp::Nop,
            0x1 => UcvmOp::Jeq,
            0x2 => UcvmOp::Jmp,
            0x3 => UcvmOp::End,
            0x4 => UcvmOp::Movi,
            0x5 => UcvmOp::Addi,
            0x6 => UcvmOp::Cmpi,
            0x8 => UcvmOp::Out,
            0x9 => UcvmOp::In,
            0xA => UcvmOp::St,
            0xB => UcvmOp::Ld,
            0xC => UcvmOp::Outi,
            _ => return None,
        })
    }

    /// Double-word instructions carry their immediate in the next word.
    pub fn has_imm(self) -> bool {
        matches!(self, UcvmOp::Movi | UcvmOp::Addi | UcvmOp::Cmpi | UcvmOp::Outi)
    }

    /// Bus instructions execute only in cycles where the main CPU leaves
    /// the bus free.
    pub fn is_bus(self) -> bool {
        matches!(self, UcvmOp::Out | UcvmOp::In | UcvmOp::St | UcvmOp::Ld | UcvmOp::Outi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UcvmInstruction {
    pub op: UcvmOp,
    pub a: u8,
    pub b: u8,
    pub low: u16,
    pub imm: Option<Word>,
}

/// Assemble one instruction word (no immediate).
pub fn enc(op: UcvmOp, a: u8, b: u8, low: u16) -> Word {
    ((op.code() << 28) | ((a as u32 & 7) << 25) | ((b as u32 & 7) << 22) | low as u32) as Word
}

pub fn ucvm_decode(store: &[Word], at: usize) -> Result<UcvmInstruction, ()> {
    let w = *store.get(at).ok_or(())?;
    let op = UcvmOp::from_code((w as u32) >> 28).ok_or(())?;
    let imm = if op.has_imm() { Some(*store.get(at + 1).ok_or(())?) } else { None };
    Ok(UcvmInstruction {
        op,
        a: ((w as u32 >> 25) & 7) as u8,
        b: ((w as u32 >> 22) & 7) as u8,
        low: (w as u32 & 0xFFFF) as u16,
        imm,
    })
}

#[derive(Debug, Clone)]
pub struct UcvmState {
    pub r: [Word; 8],
    pub flag: bool,
    pub pc: usize,
    pub store: [Word; UCVM_STORE_WORDS],
    pub running: bool,
}

impl Default for UcvmState {
    fn default() -> UcvmState {
        UcvmState { r: [0; 8], flag: false, pc: 0, store: [0; UCVM_STORE_WORDS], running: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UcvmOutcome {
    Idle,
    Stalled,
    Executed,
    /// A bus transaction (memory or I/O) was consumed.
    ExecutedBus,
    Faulted,
    Ended,
}

/// The host-visible DMA engine: mailbox registers plus the μCVM.
pub struct DmaEngine {
    pub iobase: u16,
    pub irq: u8,
    pub vm: UcvmState,
    firmware: Vec<Word>,
    pub direction: Word,
    pub mem_addr: Word,
    pub track: Word,
    pub sector: Word,
    busy: bool,
    done: bool,
    error: bool,
    irq_enabled: bool,
}

impl DmaEngine {
    pub fn new(iobase: u16, irq: u8, firmware: Vec<Word>) -> Result<DmaEngine, FirmwareError> {
        if firmware.len() > UCVM_STORE_WORDS {
            return Err(FirmwareError::Oversize(firmware.len()));
        }
        Ok(DmaEngine {
            iobase,
            irq,
            vm: UcvmState::default(),
            firmware,
            direction: 0,
            mem_addr: 0,
            track: 0,
            sector: 0,
            busy: false,
            done: false,
            error: false,
            irq_enabled: false,
        })
    }

    pub fn owns(&self, port: u16) -> bool {
        (self.iobase..self.iobase + 6).contains(&port)
    }

    pub fn busy(&self) -> bool {
        self.busy
    }

    pub fn host_read(&mut self, port: u16) -> Word {
        match port - self.iobase {
            0 => self.direction,
            1 => self.mem_addr,
            2 => self.track,
            3 => self.sector,
            5 => {
                let s = self.busy as Word | (self.done as Word) << 1 | (self.error as Word) << 2;
                self.done = false;
                self.error = false;
                s
            }
            _ => 0,
        }
    }

    pub fn host_write(
        &mut self,
        port: u16,
        value: Word,
        disk: &mut crate::devices::Disk,
        _irqs: &mut IrqSink,
    ) {
        match port - self.iobase {
            0 => self.direction = value,
            1 => self.mem_addr = value,
            2 => self.track = value,
            3 => self.sector = value,
            4 => {
                if value != 1 {
                    return;
                }
                if self.busy {
                    self.error = true;
                    return;
                }
                // hardware assist: hand the target to the disk controller
                // and start the block at cursor 0
                disk.set_target(self.track, self.sector);
                disk.reset_cursor();
                self.vm.r = [0; 8];
                self.vm.flag = false;
                self.vm.pc = 0;
                self.vm.store = [0; UCVM_STORE_WORDS];
                self.vm.store[..self.firmware.len()].copy_from_slice(&self.firmware);
                self.vm.running = true;
                self.busy = true;
                self.done = false;
            }
            5 => self.irq_enabled = value & 1 != 0,
            _ => {}
        }
    }

    /// One μCVM cycle. `bus_free` is the arbiter's verdict for this cycle;
    /// the engine performs at most one bus transaction when granted.
    pub fn step(
        &mut self,
        bus_free: bool,
        mem: &mut MemorySystem,
        devices: &mut Devices,
        irqs: &mut IrqSink,
    ) -> UcvmOutcome {
        if !self.vm.running {
            return UcvmOutcome::Idle;
        }
        let inst = match ucvm_decode(&self.vm.store, self.vm.pc) {
            Ok(i) => i,
            Err(()) => return self.fault(),
        };
        if inst.op.is_bus() && !bus_free {
            return UcvmOutcome::Stalled;
        }
        let next = self.vm.pc + 1 + inst.op.has_imm() as usize;
        let mut bus_used = false;
        match inst.op {
            UcvmOp::Nop => {}
            UcvmOp::Jeq => {
                if self.vm.flag {
                    self.vm.pc = inst.low as usize;
                    return UcvmOutcome::Executed;
                }
            }
            UcvmOp::Jmp => {
                self.vm.pc = inst.low as usize;
                return UcvmOutcome::Executed;
            }
            UcvmOp::End => {
                self.vm.running = false;
                self.busy = false;
                return UcvmOutcome::Ended;
            }
            UcvmOp::Movi => self.vm.r[inst.a as usize] = inst.imm.unwrap(),
            UcvmOp::Addi => {
                let a = inst.a as usize;
                self.vm.r[a] = self.vm.r[a].wrapping_add(inst.imm.unwrap());
            }
            UcvmOp::Cmpi => self.vm.flag = self.vm.r[inst.a as usize] == inst.imm.unwrap(),
            UcvmOp::Out | UcvmOp::Outi => {
                let value = if inst.op == UcvmOp::Outi {
                    inst.imm.unwrap()
                } else {
                    self.vm.r[inst.a as usize]
                };
                self.port_write(inst.low, value, devices, irqs);
                bus_used = true;
            }
            UcvmOp::In => {
                self.vm.r[inst.a as usize] = self.port_read(inst.low, devices);
                bus_used = true;
            }
            UcvmOp::St => {
                mem.grant_dma(true);
                let addr = self.vm.r[inst.a as usize] as u32;
                let r = mem.dma_write(addr, self.vm.r[inst.b as usize]);
                mem.grant_dma(false);
                if r.is_err() {
                    return self.fault();
                }
                bus_used = true;
            }
            UcvmOp::Ld => {
                mem.grant_dma(true);
                let addr = self.vm.r[inst.a as usize] as u32;
                let r = mem.dma_read(addr);
                mem.grant_dma(false);
                match r {
                    Ok(v) => self.vm.r[inst.b as usize] = v,
                    Err(_) => return self.fault(),
                }
                bus_used = true;
            }
        }
        self.vm.pc = next;
        if bus_used {
            UcvmOutcome::ExecutedBus
        } else {
            UcvmOutcome::Executed
        }
    }

    fn fault(&mut self) -> UcvmOutcome {
        self.vm.running = false;
        self.busy = false;
        self.error = true;
        UcvmOutcome::Faulted
    }

    fn port_read(&mut self, port: u16, devices: &mut Devices) -> Word {
        if port < INTERNAL_PORT_LIMIT {
            match port {
                MBOX_DIRECTION => self.direction,
                MBOX_MEM_ADDR => self.mem_addr,
                MBOX_TRACK => self.track,
                MBOX_SECTOR => self.sector,
                _ => 0,
            }
        } else {
            devices.io_read(port)
        }
    }

    fn port_write(&mut self, port: u16, value: Word, devices: &mut Devices, irqs: &mut IrqSink) {
        if port < INTERNAL_PORT_LIMIT {
            match port {
                MBOX_DIRECTION => self.direction = value,
                MBOX_MEM_ADDR => self.mem_addr = value,
                MBOX_ERROR => {
                    if value != 0 {
                        self.error = true;
                    }
                }
                MBOX_COMPLETE => {
                    if value != 0 {
                        self.done = true;
                        if self.irq_enabled {
                            irqs.raise(self.irq);
                        }
                    }
                }
                _ => {}
            }
        } else {
            devices.io_write(port, value, irqs);
        }
    }
}

/// The shipped firmware: moves one 128-word block between the disk buffer
/// and main memory, in the direction given by the mailbox, and signals
/// completion. 33 words.
///
/// Loop bounds come from the disk status port: it reads 0 while the
/// buffer cursor is mid-block, so `xCMPI 0 / JEQ` keeps the word loop
/// going and falls through at the block boundary (or while busy/done bits
/// are up). The read path raises its IRQ after the disk READ completes;
/// the write path raises it right after filling the buffer, before the
/// mechanical WRITE finishes.
pub fn default_firmware(disk_iobase: u16) -> Vec<Word> {
    use UcvmOp::*;
    let cmd = disk_iobase;
    let status = disk_iobase + 3;
    let data = disk_iobase + 4;
    let fw = vec![
        // -- setup ---------------------------------------------------
        enc(In, 0, 0, MBOX_DIRECTION),  //  0: r0 := direction
        enc(In, 1, 0, MBOX_MEM_ADDR),   //  1: r1 := memory pointer
        enc(Cmpi, 0, 0, 0),             //  2: flag := (r0 == 0)
        0,                              //  3:   (imm)
        enc(Jeq, 0, 0, 18),             //  4: disk -> memory path
        // -- memory -> disk ------------------------------------------
        enc(Ld, 1, 3, 0),               //  5: r3 := mem[r1]
        enc(Out, 3, 0, data),           //  6: buffer push, cursor++
        enc(Addi, 1, 0, 0),             //  7: r1 += 1
        1,                              //  8:   (imm)
        enc(In, 3, 0, status),          //  9: r3 := disk status
        enc(Cmpi, 3, 0, 0),             // 10: 0 while block unfinished
        0,                              // 11:   (imm)
        enc(Jeq, 0, 0, 5),              // 12
        enc(Outi, 0, 0, cmd),           // 13: issue WRITE
        3,                              // 14:   (imm)
        enc(Outi, 0, 0, MBOX_COMPLETE), // 15: completion signal
        1,                              // 16:   (imm)
        enc(End, 0, 0, 0),              // 17
        // -- disk -> memory ------------------------------------------
        enc(Outi, 0, 0, cmd),           // 18: issue READ
        2,                              // 19:   (imm)
        enc(In, 3, 0, status),          // 20: poll
        enc(Cmpi, 3, 0, 0),             // 21: busy?
        1,                              // 22:   (imm)
        enc(Jeq, 0, 0, 20),             // 23
        enc(In, 3, 0, data),            // 24: r3 := buffer word, cursor++
        enc(St, 1, 3, 0),               // 25: mem[r1] := r3
        enc(Addi, 1, 0, 0),             // 26: r1 += 1
        1,                              // 27:   (imm)
        enc(In, 3, 0, status),          // 28
        enc(Cmpi, 3, 0, 0),             // 29: 0 while block unfinished
        0,                              // 30:   (imm)
        enc(Jeq, 0, 0, 24),             // 31
        enc(Jmp, 0, 0, 15),             // 32: shared completion tail
    ];
    debug_assert!(fw.len() <= FIRMWARE_LIMIT_WORDS);
    fw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{
        Devices, Disk, Terminal, Timer, DISK_IOBASE, DISK_IRQ, DMA_IOBASE, DMA_IRQ, TIMER_IOBASE,
        TIMER_IRQ, TTY_IOBASE, TTY_IRQ,
    };
    use crate::diskimg::{DiskGeometry, DiskImage, DiskTiming};

    fn rig(image: DiskImage) -> (DmaEngine, MemorySystem, Devices, IrqSink) {
        let dma = DmaEngine::new(DMA_IOBASE, DMA_IRQ, default_firmware(DISK_IOBASE)).unwrap();
        let mem = MemorySystem::new(1 << 16);
        let devices = Devices::new(
            Timer::new(TIMER_IOBASE, TIMER_IRQ),
            Terminal::new(TTY_IOBASE, TTY_IRQ),
            Disk::new(DISK_IOBASE, DISK_IRQ, image),
        );
        (dma, mem, devices, IrqSink::default())
    }

    fn image_with_pattern() -> DiskImage {
        let mut img = DiskImage::new(DiskGeometry::default(), DiskTiming::default());
        for (i, w) in img.block_mut(2, 5).unwrap().iter_mut().enumerate() {
            *w = (i as Word) * 3 - 7;
        }
        img
    }

    fn start(dma: &mut DmaEngine, devices: &mut Devices, irqs: &mut IrqSink, dir: Word, addr: Word) {
        dma.host_write(DMA_IOBASE, dir, &mut devices.disk, irqs);
        dma.host_write(DMA_IOBASE + 1, addr, &mut devices.disk, irqs);
        dma.host_write(DMA_IOBASE + 2, 2, &mut devices.disk, irqs);
        dma.host_write(DMA_IOBASE + 3, 5, &mut devices.disk, irqs);
        dma.host_write(DMA_IOBASE + 5, 1, &mut devices.disk, irqs); // IRQ enable
        dma.host_write(DMA_IOBASE + 4, 1, &mut devices.disk, irqs); // go
    }

    /// Run until the engine goes idle; the bus is always free. Returns
    /// (cycles elapsed, cycle of the completion IRQ, cycle the disk went idle).
    fn run_transfer(
        dma: &mut DmaEngine,
        mem: &mut MemorySystem,
        devices: &mut Devices,
        irqs: &mut IrqSink,
    ) -> (u64, u64, u64) {
        let mut cycle = 0u64;
        let mut irq_at = 0u64;
        let mut disk_idle_at = 0u64;
        let mut disk_was_busy = false;
        while dma.vm.running {
            cycle += 1;
            assert!(cycle < 100_000, "transfer did not complete");
            dma.step(true, mem, devices, irqs);
            devices.tick(irqs);
            for ch in irqs.drain() {
                if ch == DMA_IRQ {
                    irq_at = cycle;
                }
            }
            if devices.disk.busy() {
                disk_was_busy = true;
            } else if disk_was_busy && disk_idle_at == 0 {
                disk_idle_at = cycle;
            }
        }
        // drain trailing disk activity (write transfers end before the disk)
        while devices.disk.busy() {
            cycle += 1;
            devices.tick(irqs);
            irqs.raised.clear();
            if !devices.disk.busy() {
                disk_idle_at = cycle;
            }
        }
        (cycle, irq_at, disk_idle_at)
    }

    #[test]
    fn decode_examples() {
        let store = [enc(UcvmOp::Movi, 0, 0, 0), 5, enc(UcvmOp::End, 0, 0, 0)];
        let i = ucvm_decode(&store, 0).unwrap();
        assert_eq!((i.op, i.a, i.imm), (UcvmOp::Movi, 0, Some(5)));
        assert_eq!(ucvm_decode(&store, 2).unwrap().op, UcvmOp::End);
        assert!(ucvm_decode(&[(0x7u32 << 28) as Word], 0).is_err());
    }

    #[test]
    fn conformance_movi_addi_cmpi_jeq() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        let prog = vec![
            enc(UcvmOp::Movi, 2, 0, 0),
            5,
            enc(UcvmOp::Addi, 2, 0, 0),
            -3,
            enc(UcvmOp::Cmpi, 2, 0, 0),
            2,
            enc(UcvmOp::Jeq, 0, 0, 8),
            enc(UcvmOp::Nop, 0, 0, 0), // skipped
            enc(UcvmOp::End, 0, 0, 0),
        ];
        dma = DmaEngine::new(DMA_IOBASE, DMA_IRQ, prog).unwrap();
        dma.host_write(DMA_IOBASE + 4, 1, &mut devices.disk, &mut irqs);
        let mut steps = 0;
        while dma.vm.running {
            dma.step(true, &mut mem, &mut devices, &mut irqs);
            steps += 1;
            assert!(steps < 100);
        }
        assert_eq!(dma.vm.r[2], 2);
        assert!(dma.vm.flag);
        assert_eq!(steps, 5); // movi, addi, cmpi, jeq, end
    }

    #[test]
    fn bus_instructions_stall_without_grant() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        let prog = vec![
            enc(UcvmOp::Addi, 0, 0, 0),
            1,
            enc(UcvmOp::In, 1, 0, MBOX_DIRECTION),
            enc(UcvmOp::End, 0, 0, 0),
        ];
        dma = DmaEngine::new(DMA_IOBASE, DMA_IRQ, prog).unwrap();
        dma.host_write(DMA_IOBASE + 4, 1, &mut devices.disk, &mut irqs);
        // non-bus instruction executes even without the bus
        assert_eq!(dma.step(false, &mut mem, &mut devices, &mut irqs), UcvmOutcome::Executed);
        // bus instruction stalls until granted
        assert_eq!(dma.step(false, &mut mem, &mut devices, &mut irqs), UcvmOutcome::Stalled);
        assert_eq!(dma.step(false, &mut mem, &mut devices, &mut irqs), UcvmOutcome::Stalled);
        assert_eq!(dma.step(true, &mut mem, &mut devices, &mut irqs), UcvmOutcome::ExecutedBus);
        assert_eq!(dma.step(true, &mut mem, &mut devices, &mut irqs), UcvmOutcome::Ended);
    }

    #[test]
    fn reserved_opcode_faults() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        dma = DmaEngine::new(DMA_IOBASE, DMA_IRQ, vec![(0xDu32 << 28) as Word]).unwrap();
        dma.host_write(DMA_IOBASE + 4, 1, &mut devices.disk, &mut irqs);
        assert_eq!(dma.step(true, &mut mem, &mut devices, &mut irqs), UcvmOutcome::Faulted);
        assert_eq!(dma.host_read(DMA_IOBASE + 5) & 0b100, 0b100);
    }

    #[test]
    fn firmware_fits_the_budget() {
        let fw = default_firmware(DISK_IOBASE);
        assert!(fw.len() <= FIRMWARE_LIMIT_WORDS, "{} words", fw.len());
        // and still decodes end to end
        let mut at = 0;
        while at < fw.len() {
            let i = ucvm_decode(&fw, at).unwrap();
            at += 1 + i.op.has_imm() as usize;
        }
    }

    #[test]
    fn read_transfer_lands_block_in_memory() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        start(&mut dma, &mut devices, &mut irqs, DIR_DISK_TO_MEM, 0x4000);
        let (_, irq_at, disk_idle_at) = run_transfer(&mut dma, &mut mem, &mut devices, &mut irqs);
        let expect: Vec<Word> = (0..128).map(|i| i * 3 - 7).collect();
        assert_eq!(&mem.ram()[0x4000..0x4080], &expect[..]);
        assert!(irq_at >= disk_idle_at, "read IRQ at {irq_at}, disk done at {disk_idle_at}");
        assert!(!dma.busy());
        assert_eq!(dma.host_read(DMA_IOBASE + 5) & 0b10, 0b10);
    }

    #[test]
    fn write_transfer_and_early_irq() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        for i in 0..128u32 {
            mem.load(0x2000 + i, &[!(i as Word)]).unwrap();
        }
        start(&mut dma, &mut devices, &mut irqs, DIR_MEM_TO_DISK, 0x2000);
        let (_, irq_at, disk_idle_at) = run_transfer(&mut dma, &mut mem, &mut devices, &mut irqs);
        let block = devices.disk.image.block(2, 5).unwrap();
        for i in 0..128 {
            assert_eq!(block[i], !(i as Word));
        }
        assert!(irq_at > 0 && irq_at <= disk_idle_at, "write IRQ at {irq_at}, disk done at {disk_idle_at}");
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        let original = devices.disk.image.block(2, 5).unwrap().to_vec();
        start(&mut dma, &mut devices, &mut irqs, DIR_DISK_TO_MEM, 0x4000);
        run_transfer(&mut dma, &mut mem, &mut devices, &mut irqs);
        // scramble the image copy, then write back from memory
        devices.disk.image.block_mut(2, 5).unwrap().fill(0);
        start(&mut dma, &mut devices, &mut irqs, DIR_MEM_TO_DISK, 0x4000);
        run_transfer(&mut dma, &mut mem, &mut devices, &mut irqs);
        assert_eq!(devices.disk.image.block(2, 5).unwrap(), &original[..]);
    }

    #[test]
    fn go_while_busy_is_an_error() {
        let (mut dma, mut mem, mut devices, mut irqs) = rig(image_with_pattern());
        start(&mut dma, &mut devices, &mut irqs, DIR_DISK_TO_MEM, 0x4000);
        dma.step(true, &mut mem, &mut devices, &mut irqs);
        dma.host_write(DMA_IOBASE + 4, 1, &mut devices.disk, &mut irqs);
        assert_eq!(dma.host_read(DMA_IOBASE + 5) & 0b101, 0b101); // busy + error
        run_transfer(&mut dma, &mut mem, &mut devices, &mut irqs);
    }
}
