//! The whole machine: CPU, memory and cache, MMU, devices, and the DMA
//! engine composed into one deterministic per-cycle scheduler.
//!
//! Order within a cycle: (1) the CPU executes (or idles if halted);
//! (2) the arbiter decides whether the bus is free; (3) the μCVM runs one
//! step with that verdict; (4) devices tick; (5) keystrokes due this cycle
//! are injected; (6) the interrupt dispatch decision. Identical
//! configuration, images and input script therefore produce an identical
//! event log, summarized by a stable 64-bit hash.

use std::collections::VecDeque;
use std::time::Instant;

use crate::devices::{Devices, Disk, IrqSink, Terminal, Timer};
use crate::devices::{
    DISK_IOBASE, DISK_IRQ, DMA_IOBASE, DMA_IRQ, TIMER_IOBASE, TIMER_IRQ, TTY_IOBASE, TTY_IRQ,
};
use crate::diskimg::{DiskGeometry, DiskImage, DiskTiming};
use crate::isa::BusClass;
use crate::machine::{Cpu, CycleReport, IoPorts, MachineError};
use crate::memory::{BusMode, CacheStats, MemorySystem, DEFAULT_MEM_WORDS};
use crate::mmu::Mmu;
use crate::ucvm::{default_firmware, DmaEngine, UcvmOutcome};
use crate::word::Word;

#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub mem_words: u32,
    pub bus_mode: BusMode,
    pub timer_iobase: u16,
    pub timer_irq: u8,
    pub tty_iobase: u16,
    pub tty_irq: u8,
    pub disk_iobase: u16,
    pub disk_irq: u8,
    pub dma_iobase: u16,
    pub dma_irq: u8,
    /// Replacement DMA firmware; the embedded default otherwise.
    pub dma_firmware: Option<Vec<Word>>,
}

impl Default for SystemConfig {
    fn default() -> SystemConfig {
        SystemConfig {
            mem_words: DEFAULT_MEM_WORDS,
            bus_mode: BusMode::CacheAware,
            timer_iobase: TIMER_IOBASE,
            timer_irq: TIMER_IRQ,
            tty_iobase: TTY_IOBASE,
            tty_irq: TTY_IRQ,
            disk_iobase: DISK_IOBASE,
            disk_irq: DISK_IRQ,
            dma_iobase: DMA_IOBASE,
            dma_irq: DMA_IRQ,
            dma_firmware: None,
        }
    }
}

/// Generate the `config.h` preprocessor header describing the live port
/// and IRQ assignment, for inclusion from assembly sources.
pub fn emit_config_header(config: &SystemConfig) -> String {
    format!(
        "// Generated machine configuration. Do not edit.\n\
         #define IOBASE_TIMER 0x{:02X}\n\
         #define IOBASE_TTY 0x{:02X}\n\
         #define IOBASE_DISK 0x{:02X}\n\
         #define IOBASE_DMA 0x{:02X}\n\
         #define IRQ_TIMER {}\n\
         #define IRQ_TTY {}\n\
         #define IRQ_DISK {}\n\
         #define IRQ_DMA {}\n",
        config.timer_iobase,
        config.tty_iobase,
        config.disk_iobase,
        config.dma_iobase,
        config.timer_irq,
        config.tty_irq,
        config.disk_irq,
        config.dma_irq,
    )
}

/// Scripted input: (cycle, key) pairs with nondecreasing cycles.
#[derive(Debug, Clone, Default)]
pub struct InputScript {
    pub events: Vec<(u64, Word)>,
}

impl InputScript {
    /// Parse the "cycle key-code" line format. Blank lines and `#`
    /// comments are skipped; key codes accept decimal or 0x-hex.
    pub fn parse(text: &str) -> Result<InputScript, String> {
        let mut events: Vec<(u64, Word)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(c), Some(k), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected \"cycle key-code\"", ln + 1));
            };
            let cycle: u64 = c.parse().map_err(|_| format!("line {}: bad cycle", ln + 1))?;
            let key = parse_word(k).ok_or_else(|| format!("line {}: bad key code", ln + 1))?;
            if let Some(&(prev, _)) = events.last() {
                if cycle < prev {
                    return Err(format!("line {}: cycles must be nondecreasing", ln + 1));
                }
            }
            events.push((cycle, key));
        }
        Ok(InputScript { events })
    }
}

fn parse_word(s: &str) -> Option<Word> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u32::from_str_radix(hex, 16).ok().map(|v| v as Word)
    } else {
        s.parse().ok()
    }
}

/// What one system cycle did (for tracing).
#[derive(Debug, Clone, Copy)]
pub struct TickReport {
    pub cycle: u64,
    pub cpu: CycleReport,
    pub bus_free: bool,
    pub dma: UcvmOutcome,
    pub dispatched: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub cycles: u64,
    pub instructions: u64,
    pub wall_secs: f64,
    pub mips: f64,
    pub cache: CacheStats,
    pub event_hash: u64,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    Stopped,
    MaxCycles,
    Breakpoint(u32),
    DoubleFault(String),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunLimits {
    pub max_cycles: Option<u64>,
    pub breakpoint: Option<u32>,
    /// Target simulated MIPS for real-time pacing; None = full speed.
    pub throttle_mips: Option<f64>,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

struct SystemBus<'a> {
    devices: &'a mut Devices,
    dma: &'a mut DmaEngine,
    irqs: &'a mut IrqSink,
}

impl IoPorts for SystemBus<'_> {
    fn io_read(&mut self, port: u16) -> Word {
        if self.dma.owns(port) {
            self.dma.host_read(port)
        } else {
            self.devices.io_read(port)
        }
    }

    fn io_write(&mut self, port: u16, value: Word) {
        if self.dma.owns(port) {
            self.dma.host_write(port, value, &mut self.devices.disk, self.irqs);
        } else {
            self.devices.io_write(port, value, self.irqs);
        }
    }
}

pub struct System {
    pub cpu: Cpu,
    pub mem: MemorySystem,
    pub mmu: Mmu,
    pub devices: Devices,
    pub dma: DmaEngine,
    pub bus_mode: BusMode,
    pub config: SystemConfig,
    irqs: IrqSink,
    script: VecDeque<(u64, Word)>,
    host_keys: VecDeque<Word>,
    /// FNV-1a over the event stream: output words, dispatches, injected
    /// keys, disk write completions.
    event_hash: u64,
    tx_seen: usize,
    disk_writes_seen: u64,
    loaded: Vec<(u32, u32, String)>,
}

impl System {
    pub fn new(config: SystemConfig, disk_image: Option<DiskImage>) -> System {
        let image = disk_image
            .unwrap_or_else(|| DiskImage::new(DiskGeometry::default(), DiskTiming::default()));
        let firmware =
            config.dma_firmware.clone().unwrap_or_else(|| default_firmware(config.disk_iobase));
        let devices = Devices::new(
            Timer::new(config.timer_iobase, config.timer_irq),
            Terminal::new(config.tty_iobase, config.tty_irq),
            Disk::new(config.disk_iobase, config.disk_irq, image),
        );
        let dma = DmaEngine::new(config.dma_iobase, config.dma_irq, firmware)
            .expect("firmware exceeds the program store");
        System {
            cpu: Cpu::reset(),
            mem: MemorySystem::new(config.mem_words),
            mmu: Mmu::new(),
            devices,
            dma,
            bus_mode: config.bus_mode,
            config,
            irqs: IrqSink::default(),
            script: VecDeque::new(),
            host_keys: VecDeque::new(),
            event_hash: FNV_OFFSET,
            tx_seen: 0,
            disk_writes_seen: 0,
            loaded: Vec::new(),
        }
    }

    pub fn set_script(&mut self, script: InputScript) {
        self.script = script.events.into();
    }

    /// Queue a host keystroke; it enters the machine at the next cycle
    /// boundary, exactly like a scripted one.
    pub fn push_key(&mut self, key: Word) {
        self.host_keys.push_back(key);
    }

    /// Copy a raw word image into physical memory, refusing overlaps with
    /// previously loaded images.
    pub fn load_bin(&mut self, base: u32, words: &[Word], label: &str) -> Result<(), String> {
        if words.is_empty() {
            return Ok(());
        }
        let end = base as u64 + words.len() as u64;
        if end > self.mem.size() as u64 {
            return Err(format!(
                "{label}: image [{base:#x}, {end:#x}) does not fit in {:#x} words of memory",
                self.mem.size()
            ));
        }
        let end = end as u32;
        for (b, e, l) in &self.loaded {
            if base < *e && *b < end {
                return Err(format!(
                    "{label}: image [{base:#x}, {end:#x}) overlaps {l} [{b:#x}, {e:#x})"
                ));
            }
        }
        self.mem.load(base, words).map_err(|f| f.to_string())?;
        self.loaded.push((base, end, label.to_string()));
        Ok(())
    }

    pub fn event_hash(&self) -> u64 {
        self.event_hash
    }

    fn log_event(&mut self, kind: u64, a: u64, b: u64) {
        for v in [kind, a, b] {
            let mut h = self.event_hash;
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(FNV_PRIME);
            }
            self.event_hash = h;
        }
    }

    /// Run one machine cycle.
    pub fn tick(&mut self) -> Result<TickReport, MachineError> {
        self.mem.begin_cycle();
        // (1) CPU
        let mut bus = SystemBus {
            devices: &mut self.devices,
            dma: &mut self.dma,
            irqs: &mut self.irqs,
        };
        let cpu_report = self.cpu.step(&mut self.mem, &mut self.mmu, &mut bus)?;
        let cycle = self.cpu.cycles;
        // (2) arbitration
        let bus_free = match self.bus_mode {
            BusMode::CacheAware => !self.mem.cpu_used_bus(),
            BusMode::StrictLiteral => cpu_report.bus_class == BusClass::None,
        };
        // (3) μCVM
        let dma_outcome = self.dma.step(bus_free, &mut self.mem, &mut self.devices, &mut self.irqs);
        // (4) devices
        self.devices.tick(&mut self.irqs);
        // (5) keystrokes due at this boundary
        while self.script.front().is_some_and(|&(c, _)| c <= cycle) {
            let (_, key) = self.script.pop_front().unwrap();
            self.devices.tty.inject_keystroke(key, &mut self.irqs);
            self.log_event(3, cycle, key as u64);
        }
        while let Some(key) = self.host_keys.pop_front() {
            self.devices.tty.inject_keystroke(key, &mut self.irqs);
            self.log_event(3, cycle, key as u64);
        }
        // (6) dispatch decision
        for ch in self.irqs.drain() {
            self.cpu.raise_irq(ch);
        }
        let dispatched = self.cpu.end_of_cycle(&mut self.mem, &mut self.mmu)?;
        // event log upkeep
        if let Some(v) = dispatched {
            self.log_event(1, cycle, v as u64);
        }
        while self.tx_seen < self.devices.tty.tx_stream.len() {
            let w = self.devices.tty.tx_stream[self.tx_seen];
            self.tx_seen += 1;
            self.log_event(2, cycle, w as u64);
        }
        if self.devices.disk.writes_done != self.disk_writes_seen {
            self.disk_writes_seen = self.devices.disk.writes_done;
            self.log_event(4, cycle, self.disk_writes_seen);
        }
        Ok(TickReport { cycle, cpu: cpu_report, bus_free, dma: dma_outcome, dispatched })
    }

    /// Run to completion (or a limit), collecting the performance summary.
    pub fn run(&mut self, limits: RunLimits) -> Result<RunSummary, MachineError> {
        let start = Instant::now();
        let start_cycles = self.cpu.cycles;
        let throttle_chunk = 10_000u64;
        let mut next_pace = start_cycles + throttle_chunk;
        let stop_reason = loop {
            if self.cpu.stopped {
                break StopReason::Stopped;
            }
            if limits.max_cycles.is_some_and(|m| self.cpu.cycles >= m) {
                break StopReason::MaxCycles;
            }
            match self.tick() {
                Ok(_) => {}
                Err(MachineError::DoubleFault { vector, cycle, reason }) => {
                    break StopReason::DoubleFault(format!(
                        "double fault: vector {vector} at cycle {cycle}: {reason}"
                    ));
                }
                Err(e) => return Err(e),
            }
            if limits.breakpoint.is_some_and(|bp| self.cpu.pc == bp && !self.cpu.halted) {
                break StopReason::Breakpoint(self.cpu.pc);
            }
            if let Some(mips) = limits.throttle_mips {
                if self.cpu.cycles >= next_pace && mips > 0.0 {
                    next_pace += throttle_chunk;
                    let due = (self.cpu.cycles - start_cycles) as f64 / (mips * 1e6);
                    let elapsed = start.elapsed().as_secs_f64();
                    if due > elapsed {
                        std::thread::sleep(std::time::Duration::from_secs_f64(due - elapsed));
                    }
                }
            }
        };
        let wall_secs = start.elapsed().as_secs_f64();
        let cycles = self.cpu.cycles - start_cycles;
        Ok(RunSummary {
            cycles,
            instructions: self.cpu.instructions,
            wall_secs,
            mips: self.cpu.instructions as f64 / wall_secs.max(1e-9) / 1e6,
            cache: self.mem.stats,
            event_hash: self.event_hash,
            stop_reason,
        })
    }
}
