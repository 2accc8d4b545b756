//! Shared plumbing for the command-line front ends: number parsing in the
//! assembler's notations, raw word-image file IO, and object detection.

use std::fs;
use std::io;
use std::path::Path;

use clown_core::word::Word;
use clown_toolchain::assemble::parse_number;

/// Parse a CLI integer in any of the assembler's notations (0x1F, 1Fh,
/// 017, 17q, 255, 255d).
pub fn parse_int(s: &str) -> Result<i64, String> {
    parse_number(s.trim()).ok_or_else(|| format!("bad number {s:?}"))
}

pub fn parse_u32(s: &str) -> Result<u32, String> {
    u32::try_from(parse_int(s)?).map_err(|_| format!("{s:?} out of range"))
}

pub fn parse_u16(s: &str) -> Result<u16, String> {
    u16::try_from(parse_int(s)?).map_err(|_| format!("{s:?} out of range"))
}

pub fn parse_u8(s: &str) -> Result<u8, String> {
    u8::try_from(parse_int(s)?).map_err(|_| format!("{s:?} out of range"))
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    u64::try_from(parse_int(s)?).map_err(|_| format!("{s:?} out of range"))
}

/// Read a raw little-endian word image.
pub fn read_words(path: &Path) -> io::Result<Vec<Word>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: length {} is not a whole number of words", path.display(), bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write a raw little-endian word image.
pub fn write_words(path: &Path, words: &[Word]) -> io::Result<()> {
    let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    fs::write(path, bytes)
}

/// True when the file starts with the exe container magic.
pub fn looks_like_exe(bytes: &[u8]) -> bool {
    bytes.len() >= 4
        && u32::from_le_bytes(bytes[..4].try_into().unwrap()) == clown_toolchain::exe::EXE_MAGIC
}

/// Print an error and exit nonzero — uniform failure path for the tools.
pub fn die(msg: impl std::fmt::Display) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(1);
}
