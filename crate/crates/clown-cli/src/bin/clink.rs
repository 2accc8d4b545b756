//! clink — linker front end.
//!
//! `clink [-o out] [--format bin|exe] [--base seg=N]... file.exe...`

use std::fs;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use clown_cli::{die, parse_u32, write_words};
use clown_toolchain::exe::{read_exe, write_exe};
use clown_toolchain::link::{layout_bin, link};
use clown_toolchain::object::ObjectModule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Bin,
    Exe,
}

#[derive(Parser)]
#[command(name = "clink", about = "Linker for Clown exe modules", version)]
struct Args {
    /// Output file.
    #[arg(short = 'o', value_name = "OUT", default_value = "a.out")]
    output: PathBuf,

    /// Output container.
    #[arg(long, value_enum, default_value_t = Format::Exe)]
    format: Format,

    /// Pin a segment at a fixed address: --base data=0x8000 (bin only).
    #[arg(long, value_name = "SEG=ADDR", value_parser = parse_base)]
    base: Vec<(String, u32)>,

    /// Packed layout starts here for segments without --base (bin only).
    #[arg(long, value_parser = parse_u32, default_value = "0")]
    org: u32,

    /// Input exe modules, linked in order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn parse_base(s: &str) -> Result<(String, u32), String> {
    let (seg, addr) = s.split_once('=').ok_or("expected SEG=ADDR")?;
    Ok((seg.to_string(), parse_u32(addr)?))
}

fn main() {
    let args = Args::parse();
    let mut modules: Vec<(String, ObjectModule)> = Vec::new();
    for path in &args.inputs {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) => die(format!("{}: {e}", path.display())),
        };
        match read_exe(&bytes) {
            Ok(m) => modules.push((path.display().to_string(), m)),
            Err(e) => die(format!("{}: {e}", path.display())),
        }
    }
    let linked = match link(&modules) {
        Ok(m) => m,
        Err(e) => die(e),
    };
    let result = match args.format {
        Format::Exe => fs::write(&args.output, write_exe(&linked)),
        Format::Bin => match layout_bin(&linked, args.org, &args.base) {
            Ok(img) => write_words(&args.output, &img.words),
            Err(e) => die(e),
        },
    };
    if let Err(e) = result {
        die(format!("{}: {e}", args.output.display()));
    }
}
