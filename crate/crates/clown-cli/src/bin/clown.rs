//! clown — the machine runner.
//!
//! `clown [--mem N] [--disk img] [--load file[@hexbase]]... [--pc N]
//! [--strict-bus] [--throttle MIPS] [--max-cycles N] [--trace[=mmu,bus]]
//! [--script file] [--cache-stats] [--emit-config out.h]`
//!
//! Images are raw bins (loaded at the `@hexbase` suffix, default 0) or
//! linked exe files (segments laid out from `@hexbase`, entry sets the
//! initial PC unless --pc overrides it). `--console` attaches the host
//! terminal to the simulated one; Ctrl-] detaches.

use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use clown_cli::{die, looks_like_exe, parse_u16, parse_u32, parse_u64, parse_u8, read_words};
use clown_core::diskimg::DiskImage;
use clown_core::memory::BusMode;
use clown_core::system::{
    emit_config_header, InputScript, RunLimits, RunSummary, StopReason, System, SystemConfig,
};
use clown_core::word::Word;
use clown_toolchain::disasm::render;
use clown_toolchain::exe::read_exe;
use clown_toolchain::link::{layout_bin, require_resolved};

#[derive(Parser)]
#[command(name = "clown", about = "Full-system simulator for the Clown machine", version)]
struct Args {
    /// Physical memory size in words.
    #[arg(long, value_parser = parse_u32, default_value = "0x100000")]
    mem: u32,

    /// Disk image (written back on shutdown).
    #[arg(long, value_name = "IMG")]
    disk: Option<PathBuf>,

    /// Load an image: raw bin or linked exe, optionally at a hex base.
    #[arg(long = "load", value_name = "FILE[@HEXBASE]")]
    load: Vec<String>,

    /// Initial program counter (overrides any exe entry point).
    #[arg(long, value_parser = parse_u32)]
    pc: Option<u32>,

    /// Literal bus arbitration: the DMA engine gets the bus only on
    /// cycles whose instruction class does not use it.
    #[arg(long)]
    strict_bus: bool,

    /// Pace execution to this many simulated MIPS (default: max speed).
    #[arg(long, value_name = "MIPS")]
    throttle: Option<f64>,

    #[arg(long, value_parser = parse_u64)]
    max_cycles: Option<u64>,

    /// Stop when the PC reaches this address.
    #[arg(long, value_parser = parse_u32)]
    breakpoint: Option<u32>,

    /// Per-cycle trace; add mmu and/or bus detail: --trace=mmu,bus
    #[arg(long, num_args = 0..=1, require_equals = true, value_delimiter = ',',
          default_missing_value = "cpu")]
    trace: Option<Vec<String>>,

    /// Keystroke script: text lines "cycle key-code".
    #[arg(long, value_name = "FILE")]
    script: Option<PathBuf>,

    #[arg(long)]
    cache_stats: bool,

    /// Write a config.h with the live IOBASE_*/IRQ_* macros.
    #[arg(long, value_name = "OUT_H")]
    emit_config: Option<PathBuf>,

    /// Attach the host terminal to the simulated one (Ctrl-] detaches).
    #[arg(long)]
    console: bool,

    /// Pin an exe segment at a fixed address: --base data=0x8000.
    #[arg(long, value_name = "SEG=ADDR", value_parser = parse_base)]
    base: Vec<(String, u32)>,

    /// Replace the built-in DMA firmware with this raw word image.
    #[arg(long, value_name = "FILE")]
    dma_firmware: Option<PathBuf>,

    #[arg(long, value_parser = parse_u16)]
    timer_iobase: Option<u16>,
    #[arg(long, value_parser = parse_u16)]
    tty_iobase: Option<u16>,
    #[arg(long, value_parser = parse_u16)]
    disk_iobase: Option<u16>,
    #[arg(long, value_parser = parse_u16)]
    dma_iobase: Option<u16>,
    #[arg(long, value_parser = parse_u8)]
    timer_irq: Option<u8>,
    #[arg(long, value_parser = parse_u8)]
    tty_irq: Option<u8>,
    #[arg(long, value_parser = parse_u8)]
    disk_irq: Option<u8>,
    #[arg(long, value_parser = parse_u8)]
    dma_irq: Option<u8>,
}

fn parse_base(s: &str) -> Result<(String, u32), String> {
    let (seg, addr) = s.split_once('=').ok_or("expected SEG=ADDR")?;
    Ok((seg.to_string(), parse_u32(addr)?))
}

fn main() {
    let args = Args::parse();
    let mut config = SystemConfig {
        mem_words: args.mem,
        bus_mode: if args.strict_bus { BusMode::StrictLiteral } else { BusMode::CacheAware },
        ..SystemConfig::default()
    };
    macro_rules! apply {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    apply!(timer_iobase, tty_iobase, disk_iobase, dma_iobase, timer_irq, tty_irq, disk_irq, dma_irq);
    if let Some(path) = &args.dma_firmware {
        match read_words(path) {
            Ok(words) => config.dma_firmware = Some(words),
            Err(e) => die(e),
        }
    }

    if let Some(out) = &args.emit_config {
        if let Err(e) = fs::write(out, emit_config_header(&config)) {
            die(format!("{}: {e}", out.display()));
        }
        if args.load.is_empty() {
            return;
        }
    }
    if args.load.is_empty() {
        die("nothing to run: no --load image given");
    }

    let disk_image = args.disk.as_ref().map(|path| {
        let file = fs::File::open(path).unwrap_or_else(|e| die(format!("{}: {e}", path.display())));
        DiskImage::read_from(&mut std::io::BufReader::new(file))
            .unwrap_or_else(|e| die(format!("{}: {e}", path.display())))
    });
    let mut sys = System::new(config, disk_image);

    if let Some(path) = &args.script {
        let text =
            fs::read_to_string(path).unwrap_or_else(|e| die(format!("{}: {e}", path.display())));
        match InputScript::parse(&text) {
            Ok(script) => sys.set_script(script),
            Err(e) => die(format!("{}: {e}", path.display())),
        }
    }

    let mut entry_pc: Option<u32> = None;
    for spec in &args.load {
        let (file, base) = match spec.rsplit_once('@') {
            Some((f, b)) => {
                let b = u32::from_str_radix(b.trim_start_matches("0x"), 16)
                    .unwrap_or_else(|_| die(format!("bad hex base in {spec:?}")));
                (f.to_string(), b)
            }
            None => (spec.clone(), 0),
        };
        let path = PathBuf::from(&file);
        let bytes = fs::read(&path).unwrap_or_else(|e| die(format!("{file}: {e}")));
        if looks_like_exe(&bytes) {
            let module = read_exe(&bytes).unwrap_or_else(|e| die(format!("{file}: {e}")));
            require_resolved(&module).unwrap_or_else(|e| die(format!("{file}: {e}")));
            let img = layout_bin(&module, base, &args.base)
                .unwrap_or_else(|e| die(format!("{file}: {e}")));
            sys.load_bin(img.base, &img.words, &file).unwrap_or_else(|e| die(e));
            if let Some(e) = img.entry {
                entry_pc = Some(e);
            }
        } else {
            if bytes.len() % 4 != 0 {
                die(format!("{file}: raw image length is not a whole number of words"));
            }
            let words: Vec<Word> =
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
            sys.load_bin(base, &words, &file).unwrap_or_else(|e| die(e));
        }
    }
    sys.cpu.pc = args.pc.or(entry_pc).unwrap_or(0);

    let limits = RunLimits {
        max_cycles: args.max_cycles,
        breakpoint: args.breakpoint,
        throttle_mips: args.throttle,
    };
    let summary = if args.console {
        console_session(&mut sys, &limits)
    } else if let Some(flags) = &args.trace {
        run_traced(&mut sys, &limits, flags)
    } else {
        match sys.run(limits) {
            Ok(s) => s,
            Err(e) => die(e),
        }
    };

    if !args.console {
        // replay the simulated terminal's output stream to the host
        let out: Vec<u8> = sys.devices.tty.tx_stream.iter().map(|&w| w as u8).collect();
        std::io::stdout().write_all(&out).ok();
        if !out.is_empty() && out.last() != Some(&b'\n') {
            println!();
        }
    }
    print_summary(&summary, args.cache_stats);

    if let Some(path) = &args.disk {
        let file =
            fs::File::create(path).unwrap_or_else(|e| die(format!("{}: {e}", path.display())));
        sys.devices
            .disk
            .image
            .write_to(&mut std::io::BufWriter::new(file))
            .unwrap_or_else(|e| die(format!("{}: {e}", path.display())));
    }
}

fn print_summary(summary: &RunSummary, cache_stats: bool) {
    let reason = match &summary.stop_reason {
        StopReason::Stopped => "stop instruction".to_string(),
        StopReason::MaxCycles => "cycle limit".to_string(),
        StopReason::Breakpoint(pc) => format!("breakpoint at {pc:#x}"),
        StopReason::DoubleFault(msg) => msg.clone(),
    };
    println!("halted: {reason}");
    println!("cycles: {}", summary.cycles);
    println!("instructions: {}", summary.instructions);
    println!("mips: {:.2} ({:.3}s)", summary.mips, summary.wall_secs);
    println!("event-hash: {:#018x}", summary.event_hash);
    if cache_stats {
        let c = &summary.cache;
        println!("cache: hits {} misses {} writebacks {}", c.hits, c.misses, c.writebacks);
    }
}

fn finish(sys: &System, start: Instant, reason: StopReason) -> RunSummary {
    let wall_secs = start.elapsed().as_secs_f64();
    RunSummary {
        cycles: sys.cpu.cycles,
        instructions: sys.cpu.instructions,
        wall_secs,
        mips: sys.cpu.instructions as f64 / wall_secs.max(1e-9) / 1e6,
        cache: sys.mem.stats,
        event_hash: sys.event_hash(),
        stop_reason: reason,
    }
}

fn run_traced(sys: &mut System, limits: &RunLimits, flags: &[String]) -> RunSummary {
    let mmu = flags.iter().any(|f| f == "mmu");
    let bus = flags.iter().any(|f| f == "bus");
    let start = Instant::now();
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let reason = loop {
        if sys.cpu.stopped {
            break StopReason::Stopped;
        }
        if limits.max_cycles.is_some_and(|m| sys.cpu.cycles >= m) {
            break StopReason::MaxCycles;
        }
        let report = match sys.tick() {
            Ok(r) => r,
            Err(e) => break StopReason::DoubleFault(e.to_string()),
        };
        let text = match &report.cpu.inst {
            Some(inst) => render(inst),
            None => "(idle)".to_string(),
        };
        let mut line = format!(
            "{:>10}  pc={:08x}  {:<28} bus={:?}",
            report.cycle, report.cpu.pc, text, report.cpu.bus_class
        );
        if bus {
            line.push_str(&format!("  free={} dma={:?}", report.bus_free, report.dma));
        }
        if mmu {
            line.push_str(&format!(
                "  mmu=seg:{}/pg:{} walks={}",
                sys.mmu.segmentation_on as u8, sys.mmu.paging_on as u8, sys.mmu.walk_count
            ));
        }
        if let Some(v) = report.dispatched {
            line.push_str(&format!("  irq={v}"));
        }
        writeln!(out, "{line}").ok();
        if limits.breakpoint.is_some_and(|bp| sys.cpu.pc == bp && !sys.cpu.halted) {
            break StopReason::Breakpoint(sys.cpu.pc);
        }
    };
    drop(out);
    finish(sys, start, reason)
}

/// Put the host terminal in raw, non-blocking mode until dropped.
struct RawTerminal {
    orig: libc::termios,
    orig_flags: i32,
}

impl RawTerminal {
    fn new() -> Option<RawTerminal> {
        unsafe {
            if libc::isatty(0) == 0 {
                return None;
            }
            let mut orig: libc::termios = std::mem::zeroed();
            if libc::tcgetattr(0, &mut orig) != 0 {
                return None;
            }
            let mut raw = orig;
            raw.c_lflag &= !(libc::ICANON | libc::ECHO);
            raw.c_cc[libc::VMIN] = 0;
            raw.c_cc[libc::VTIME] = 0;
            if libc::tcsetattr(0, libc::TCSANOW, &raw) != 0 {
                return None;
            }
            let orig_flags = libc::fcntl(0, libc::F_GETFL);
            libc::fcntl(0, libc::F_SETFL, orig_flags | libc::O_NONBLOCK);
            Some(RawTerminal { orig, orig_flags })
        }
    }
}

impl Drop for RawTerminal {
    fn drop(&mut self) {
        unsafe {
            libc::tcsetattr(0, libc::TCSANOW, &self.orig);
            libc::fcntl(0, libc::F_SETFL, self.orig_flags);
        }
    }
}

const DETACH_KEY: u8 = 0x1D; // Ctrl-]

fn console_session(sys: &mut System, limits: &RunLimits) -> RunSummary {
    let raw = RawTerminal::new();
    if raw.is_none() {
        eprintln!("note: stdin is not a terminal; running without raw input");
    }
    eprintln!("console attached; Ctrl-] detaches");
    let start = Instant::now();
    let mut shown = 0usize; // tx words already echoed to the host
    let slice = 4096u64;
    let mut stdin = std::io::stdin();
    let reason = 'outer: loop {
        for _ in 0..slice {
            if sys.cpu.stopped {
                break 'outer StopReason::Stopped;
            }
            if limits.max_cycles.is_some_and(|m| sys.cpu.cycles >= m) {
                break 'outer StopReason::MaxCycles;
            }
            if let Err(e) = sys.tick() {
                break 'outer StopReason::DoubleFault(e.to_string());
            }
            if limits.breakpoint.is_some_and(|bp| sys.cpu.pc == bp && !sys.cpu.halted) {
                break 'outer StopReason::Breakpoint(sys.cpu.pc);
            }
        }
        // simulated terminal -> host display (low 8 bits per word)
        let tx = &sys.devices.tty.tx_stream;
        if shown < tx.len() {
            let bytes: Vec<u8> = tx[shown..].iter().map(|&w| w as u8).collect();
            shown = tx.len();
            let mut out = std::io::stdout();
            out.write_all(&bytes).ok();
            out.flush().ok();
        }
        // host keys -> boundary queue; never blocks
        let mut buf = [0u8; 64];
        if let Ok(n) = stdin.read(&mut buf) {
            for &b in &buf[..n] {
                if b == DETACH_KEY {
                    break 'outer StopReason::MaxCycles;
                }
                sys.push_key(b as Word);
            }
        }
        if let Some(mips) = limits.throttle_mips {
            if mips > 0.0 {
                let due = sys.cpu.cycles as f64 / (mips * 1e6);
                let elapsed = start.elapsed().as_secs_f64();
                if due > elapsed {
                    std::thread::sleep(std::time::Duration::from_secs_f64(due - elapsed));
                }
            }
        }
    };
    drop(raw);
    println!();
    eprintln!("console detached");
    finish(sys, start, reason)
}
