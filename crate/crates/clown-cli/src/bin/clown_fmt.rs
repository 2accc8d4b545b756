//! clown-fmt — disk image formatter.
//!
//! `clown-fmt new|install|dump` with geometry flags (--tracks, --sectors,
//! --t2t, --max-seek, --sector-time, --gap).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use clown_cli::{die, parse_u32, read_words};
use clown_core::diskimg::{DiskGeometry, DiskImage, DiskTiming, BLOCK_WORDS};

#[derive(Parser)]
#[command(name = "clown-fmt", about = "Disk image formatter for the Clown machine", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a freshly formatted (all-zero) image.
    New {
        image: PathBuf,
        #[arg(long, value_parser = parse_u32, default_value = "64")]
        tracks: u32,
        #[arg(long, value_parser = parse_u32, default_value = "16")]
        sectors: u32,
        /// Cycles for one sector to pass under the head.
        #[arg(long, value_parser = parse_u32, default_value = "128")]
        sector_time: u32,
        /// Cycles of gap between consecutive sectors.
        #[arg(long, value_parser = parse_u32, default_value = "16")]
        gap: u32,
        /// Track-to-track seek time.
        #[arg(long, value_parser = parse_u32, default_value = "100")]
        t2t: u32,
        /// Full-stroke seek time.
        #[arg(long, value_parser = parse_u32, default_value = "2000")]
        max_seek: u32,
    },
    /// Copy a raw bin file into consecutive sectors, zero-padded to whole
    /// blocks.
    Install {
        image: PathBuf,
        file: PathBuf,
        #[arg(long, value_parser = parse_u32, default_value = "0")]
        track: u32,
        #[arg(long, value_parser = parse_u32, default_value = "0")]
        sector: u32,
    },
    /// Print the header and hex-dump blocks.
    Dump {
        image: PathBuf,
        #[arg(long, value_parser = parse_u32)]
        track: Option<u32>,
        #[arg(long, value_parser = parse_u32, default_value = "0")]
        sector: u32,
        /// Number of blocks to dump.
        #[arg(long, value_parser = parse_u32, default_value = "1")]
        count: u32,
    },
}

fn load(path: &Path) -> DiskImage {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => die(format!("{}: {e}", path.display())),
    };
    match DiskImage::read_from(&mut BufReader::new(file)) {
        Ok(img) => img,
        Err(e) => die(format!("{}: {e}", path.display())),
    }
}

fn store(path: &Path, img: &DiskImage) {
    let file = match File::create(path) {
        Ok(f) => f,
        Err(e) => die(format!("{}: {e}", path.display())),
    };
    if let Err(e) = img.write_to(&mut BufWriter::new(file)) {
        die(format!("{}: {e}", path.display()));
    }
}

fn main() {
    match Args::parse().cmd {
        Cmd::New { image, tracks, sectors, sector_time, gap, t2t, max_seek } => {
            let img = DiskImage::new(
                DiskGeometry { tracks, sectors },
                DiskTiming { sector_time, gap, t2t, max_seek },
            );
            store(&image, &img);
        }
        Cmd::Install { image, file, track, sector } => {
            let mut img = load(&image);
            let words = match read_words(&file) {
                Ok(w) => w,
                Err(e) => die(e),
            };
            let geom = img.geometry;
            let (mut t, mut s) = (track, sector);
            for chunk in words.chunks(BLOCK_WORDS as usize) {
                let Ok(block) = img.block_mut(t, s) else {
                    die(format!(
                        "{}: file runs past block ({t}, {s}) of a {}x{} image",
                        file.display(),
                        geom.tracks,
                        geom.sectors
                    ));
                };
                block.fill(0);
                block[..chunk.len()].copy_from_slice(chunk);
                s += 1;
                if s == geom.sectors {
                    s = 0;
                    t += 1;
                }
            }
            store(&image, &img);
            let blocks = words.len().div_ceil(BLOCK_WORDS as usize);
            println!(
                "installed {} words ({blocks} blocks) at track {track}, sector {sector}",
                words.len()
            );
        }
        Cmd::Dump { image, track, sector, count } => {
            let img = load(&image);
            let g = img.geometry;
            let t = img.timing;
            println!(
                "geometry: {} tracks x {} sectors, {} words/block",
                g.tracks, g.sectors, BLOCK_WORDS
            );
            println!(
                "timing: sector {} gap {} t2t {} max-seek {} (rotation {})",
                t.sector_time,
                t.gap,
                t.t2t,
                t.max_seek,
                t.rotation(g.sectors)
            );
            let Some(track) = track else { return };
            let (mut t, mut s) = (track, sector);
            for _ in 0..count {
                let Ok(block) = img.block(t, s) else {
                    die(format!("block ({t}, {s}) outside geometry"));
                };
                println!("track {t}, sector {s}:");
                for (i, row) in block.chunks(8).enumerate() {
                    let hex: Vec<String> =
                        row.iter().map(|w| format!("{:08X}", *w as u32)).collect();
                    println!("  {:04X}: {}", i * 8, hex.join(" "));
                }
                s += 1;
                if s == g.sectors {
                    s = 0;
                    t += 1;
                }
            }
        }
    }
}
