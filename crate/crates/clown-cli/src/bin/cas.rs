//! cas — assembler front end.
//!
//! `cas [-I dir] [-o out] [--format bin|exe] [--base N] [--entry-disp N]
//! [--listing out.lst] file.s`

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use clown_cli::{die, parse_u32, write_words};
use clown_toolchain::assemble::{assemble, emit_bin};
use clown_toolchain::exe::write_exe;
use clown_toolchain::preprocess::preprocess;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Bin,
    Exe,
}

#[derive(Parser)]
#[command(name = "cas", about = "Assembler for the Clown machine", version)]
struct Args {
    /// Additional #include search directories.
    #[arg(short = 'I', value_name = "DIR")]
    include: Vec<PathBuf>,

    /// Output file (default: input with .exe / .bin extension).
    #[arg(short = 'o', value_name = "OUT")]
    output: Option<PathBuf>,

    /// Output container.
    #[arg(long, value_enum, default_value_t = Format::Exe)]
    format: Format,

    /// Load address for --format bin.
    #[arg(long, value_parser = parse_u32, default_value = "0")]
    base: u32,

    /// Require the entry point at base + this displacement (bin only).
    #[arg(long, value_parser = parse_u32)]
    entry_disp: Option<u32>,

    /// Write an address/words/source listing here.
    #[arg(long, value_name = "OUT")]
    listing: Option<PathBuf>,

    /// Assembly source file.
    input: PathBuf,
}

fn main() {
    let args = Args::parse();
    let source = match fs::read_to_string(&args.input) {
        Ok(s) => s,
        Err(e) => die(format!("{}: {e}", args.input.display())),
    };

    let mut search = vec![args
        .input
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))];
    search.extend(args.include.iter().cloned());
    let resolver = |name: &str| {
        search
            .iter()
            .map(|dir| dir.join(name))
            .find_map(|p| fs::read_to_string(p).ok())
    };

    let file_name = args.input.display().to_string();
    let expanded = match preprocess(&source, &file_name, &resolver) {
        Ok(t) => t,
        Err(e) => die(e),
    };
    let assembly = match assemble(&expanded, &file_name) {
        Ok(a) => a,
        Err(e) => die(e),
    };
    if let Some(path) = &args.listing {
        if let Err(e) = fs::write(path, &assembly.listing) {
            die(format!("{}: {e}", path.display()));
        }
    }

    let output = args.output.clone().unwrap_or_else(|| {
        args.input.with_extension(match args.format {
            Format::Bin => "bin",
            Format::Exe => "exe",
        })
    });
    let result = match args.format {
        Format::Exe => fs::write(&output, write_exe(&assembly.module)),
        Format::Bin => match emit_bin(&assembly.module, args.base, args.entry_disp) {
            Ok(img) => write_words(&output, &img.words),
            Err(e) => die(e),
        },
    };
    if let Err(e) = result {
        die(format!("{}: {e}", output.display()));
    }
}
