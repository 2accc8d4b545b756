//! On-host disk image container: a small header describing the geometry
//! and timing, followed by the raw blocks.
//!
//! Layout (little-endian 32-bit words): magic, version, tracks, sectors,
//! words per block (always 128), sector time, inter-sector gap, track-to-
//! track seek time, maximum seek time; then `tracks * sectors` blocks of
//! 128 words each. Geometry is fixed at format time.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::word::{Word, PAGE_WORDS};

pub const DISK_MAGIC: Word = 0x434C4457;
pub const DISK_VERSION: Word = 1;
pub const HEADER_WORDS: usize = 9;
/// Words per disk block; equal to the virtual-memory page size.
pub const BLOCK_WORDS: u32 = PAGE_WORDS;

#[derive(Debug, Error)]
pub enum DiskImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: Word, expected: Word },
    #[error("unsupported version {0}")]
    BadVersion(Word),
    #[error("bad geometry: tracks={tracks}, sectors={sectors}, block={block}")]
    BadGeometry { tracks: Word, sectors: Word, block: Word },
    #[error("truncated image: expected {expected} words, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("block ({track}, {sector}) outside geometry {tracks}x{sectors}")]
    BlockRange { track: u32, sector: u32, tracks: u32, sectors: u32 },
}

/// Rotational and seek timing, in simulated cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiskTiming {
    /// Cycles for one sector to pass under the head.
    pub sector_time: u32,
    /// Cycles of gap between consecutive sectors.
    pub gap: u32,
    /// Track-to-track seek time (adjacent tracks).
    pub t2t: u32,
    /// Full-stroke seek time (track 0 to the last track).
    pub max_seek: u32,
}

impl Default for DiskTiming {
    fn default() -> DiskTiming {
        DiskTiming { sector_time: 128, gap: 16, t2t: 100, max_seek: 2000 }
    }
}

impl DiskTiming {
    /// One full rotation: every sector plus its trailing gap.
    pub fn rotation(&self, sectors: u32) -> u32 {
        sectors * (self.sector_time + self.gap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiskGeometry {
    pub tracks: u32,
    pub sectors: u32,
}

impl Default for DiskGeometry {
    fn default() -> DiskGeometry {
        DiskGeometry { tracks: 64, sectors: 16 }
    }
}

impl DiskGeometry {
    pub fn blocks(&self) -> u32 {
        self.tracks * self.sectors
    }
}

#[derive(Debug, Clone)]
pub struct DiskImage {
    pub geometry: DiskGeometry,
    pub timing: DiskTiming,
    data: Vec<Word>,
}

impl DiskImage {
    /// A freshly formatted (all-zero) image.
    pub fn new(geometry: DiskGeometry, timing: DiskTiming) -> DiskImage {
        let words = (geometry.blocks() * BLOCK_WORDS) as usize;
        DiskImage { geometry, timing, data: vec![0; words] }
    }

    fn block_base(&self, track: u32, sector: u32) -> Result<usize, DiskImageError> {
        if track >= self.geometry.tracks || sector >= self.geometry.sectors {
            return Err(DiskImageError::BlockRange {
                track,
                sector,
                tracks: self.geometry.tracks,
                sectors: self.geometry.sectors,
            });
        }
        Ok(((track * self.geometry.sectors + sector) * BLOCK_WORDS) as usize)
    }

    pub fn block(&self, track: u32, sector: u32) -> Result<&[Word], DiskImageError> {
        let base = self.block_base(track, sector)?;
        Ok(&self.data[base..base + BLOCK_WORDS as usize])
    }

    pub fn block_mut(&mut self, track: u32, sector: u32) -> Result<&mut [Word], DiskImageError> {
        let base = self.block_base(track, sector)?;
        Ok(&mut self.data[base..base + BLOCK_WORDS as usize])
    }

    /// Copy `words` into the image starting at block (track, sector),
    /// spilling into subsequent blocks in linear order.
    pub fn write_span(
        &mut self,
        track: u32,
        sector: u32,
        words: &[Word],
    ) -> Result<(), DiskImageError> {
        let base = self.block_base(track, sector)?;
        if base + words.len() > self.data.len() {
            return Err(DiskImageError::Truncated {
                expected: base + words.len(),
                found: self.data.len(),
            });
        }
        self.data[base..base + words.len()].copy_from_slice(words);
        Ok(())
    }

    pub fn data(&self) -> &[Word] {
        &self.data
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DiskImageError> {
        let header = [
            DISK_MAGIC,
            DISK_VERSION,
            self.geometry.tracks as Word,
            self.geometry.sectors as Word,
            BLOCK_WORDS as Word,
            self.timing.sector_time as Word,
            self.timing.gap as Word,
            self.timing.t2t as Word,
            self.timing.max_seek as Word,
        ];
        for word in header.iter().chain(self.data.iter()) {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<DiskImage, DiskImageError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 < HEADER_WORDS {
            return Err(DiskImageError::Truncated {
                expected: HEADER_WORDS,
                found: bytes.len() / 4,
            });
        }
        let words: Vec<Word> =
            bytes.chunks_exact(4).map(|c| Word::from_le_bytes(c.try_into().unwrap())).collect();
        if words[0] != DISK_MAGIC {
            return Err(DiskImageError::BadMagic { found: words[0], expected: DISK_MAGIC });
        }
        if words[1] != DISK_VERSION {
            return Err(DiskImageError::BadVersion(words[1]));
        }
        let (tracks, sectors, block) = (words[2], words[3], words[4]);
        if tracks <= 0 || sectors <= 0 || block != BLOCK_WORDS as Word {
            return Err(DiskImageError::BadGeometry { tracks, sectors, block });
        }
        let geometry = DiskGeometry { tracks: tracks as u32, sectors: sectors as u32 };
        let timing = DiskTiming {
            sector_time: words[5] as u32,
            gap: words[6] as u32,
            t2t: words[7] as u32,
            max_seek: words[8] as u32,
        };
        let expected = HEADER_WORDS + (geometry.blocks() * BLOCK_WORDS) as usize;
        if words.len() != expected {
            return Err(DiskImageError::Truncated { expected, found: words.len() });
        }
        Ok(DiskImage { geometry, timing, data: words[HEADER_WORDS..].to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_and_rotation() {
        let img = DiskImage::new(DiskGeometry::default(), DiskTiming::default());
        assert_eq!(img.geometry.blocks(), 1024);
        assert_eq!(img.data().len(), 1024 * 128);
        assert_eq!(img.timing.rotation(img.geometry.sectors), 2304);
    }

    #[test]
    fn roundtrip() {
        let mut img = DiskImage::new(DiskGeometry { tracks: 3, sectors: 2 }, DiskTiming::default());
        img.block_mut(2, 1).unwrap()[0] = -5;
        img.block_mut(0, 0).unwrap()[127] = 77;
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 * (9 + 3 * 2 * 128));
        let back = DiskImage::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.geometry, img.geometry);
        assert_eq!(back.block(2, 1).unwrap()[0], -5);
        assert_eq!(back.block(0, 0).unwrap()[127], 77);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        DiskImage::new(DiskGeometry { tracks: 1, sectors: 1 }, DiskTiming::default())
            .write_to(&mut buf)
            .unwrap();
        buf[0] ^= 0xFF;
        assert!(matches!(
            DiskImage::read_from(&mut buf.as_slice()),
            Err(DiskImageError::BadMagic { .. })
        ));
    }

    #[test]
    fn range_checked() {
        let img = DiskImage::new(DiskGeometry { tracks: 2, sectors: 4 }, DiskTiming::default());
        assert!(img.block(2, 0).is_err());
        assert!(img.block(0, 4).is_err());
    }
}
