//! The `.sgic` container.
//!
//! Byte layout (all integers big-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGIC"
//! 4       1     version (1)
//! 5       4     width
//! 9       4     height
//! 13      1     flags (bit0: grid map payload present)
//! 14      4+n   semantics payload (u32 length prefix)
//! ..      4+m   grid map payload, only when flags bit0 is set
//! ..      4+k   latent payload
//! ```
//!
//! The packed length is the single source of truth for the bit rate.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SGIC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 14;
pub const FLAG_GRID_MAP: u8 = 0x01;
const LENGTH_PREFIX: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("invalid dimensions {width}x{height}: both must be even and at least 16")]
    DimensionInvalid { width: u32, height: u32 },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated stream")]
    Truncated,
    #[error("flags declare {expected} payloads but the stream holds {found}")]
    FlagPayloadMismatch { expected: usize, found: usize },
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
    #[error("payload of {0} bytes does not fit a u32 length prefix")]
    PayloadTooLarge(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedImage {
    pub width: u32,
    pub height: u32,
    pub semantics: Vec<u8>,
    pub grid_map: Option<Vec<u8>>,
    pub latent: Vec<u8>,
}

/// Per-payload bit accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BitBudget {
    pub header_bits: u64,
    pub semantics_bits: u64,
    pub grid_map_bits: u64,
    pub latent_bits: u64,
}

impl BitBudget {
    pub fn total(&self) -> u64 {
        self.header_bits + self.semantics_bits + self.grid_map_bits + self.latent_bits
    }
}

pub fn check_dimensions(width: u32, height: u32) -> Result<(), BitstreamError> {
    if width < 16 || height < 16 || width % 2 != 0 || height % 2 != 0 {
        return Err(BitstreamError::DimensionInvalid { width, height });
    }
    Ok(())
}

impl CompressedImage {
    pub fn flags(&self) -> u8 {
        if self.grid_map.is_some() {
            FLAG_GRID_MAP
        } else {
            0
        }
    }

    /// Bit cost of each payload, length prefixes included.
    pub fn budget(&self) -> BitBudget {
        let payload = |n: usize| 8 * (LENGTH_PREFIX + n) as u64;
        BitBudget {
            header_bits: 8 * HEADER_BYTES as u64,
            semantics_bits: payload(self.semantics.len()),
            grid_map_bits: self.grid_map.as_ref().map_or(0, |g| payload(g.len())),
            latent_bits: payload(self.latent.len()),
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.budget().total()
    }

    pub fn total_bytes(&self) -> usize {
        (self.total_bits() / 8) as usize
    }

    /// Bits per pixel of the packed stream.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.width as f64 * self.height as f64)
    }

    pub fn pack(&self) -> Result<Vec<u8>, BitstreamError> {
        check_dimensions(self.width, self.height)?;
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.push(self.flags());
        put_payload(&mut out, &self.semantics)?;
        if let Some(grid) = &self.grid_map {
            put_payload(&mut out, grid)?;
        }
        put_payload(&mut out, &self.latent)?;
        debug_assert_eq!(out.len(), self.total_bytes());
        Ok(out)
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self, BitstreamError> {
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                BitstreamError::Truncated
            } else {
                BitstreamError::BadMagic
            });
        }
        if bytes[..4] != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        if bytes.len() < HEADER_BYTES {
            return Err(BitstreamError::Truncated);
        }
        if bytes[4] != VERSION {
            return Err(BitstreamError::UnsupportedVersion(bytes[4]));
        }
        let width = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
        let height = u32::from_be_bytes(bytes[9..13].try_into().unwrap());
        let flags = bytes[13];
        if flags & !FLAG_GRID_MAP != 0 {
            return Err(BitstreamError::ReservedFlags(flags));
        }
        check_dimensions(width, height)?;

        let mut payloads = Vec::with_capacity(3);
        let mut rest = &bytes[HEADER_BYTES..];
        while !rest.is_empty() {
            if rest.len() < LENGTH_PREFIX {
                return Err(BitstreamError::Truncated);
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            if rest.len() - LENGTH_PREFIX < len {
                return Err(BitstreamError::Truncated);
            }
            payloads.push(rest[LENGTH_PREFIX..LENGTH_PREFIX + len].to_vec());
            rest = &rest[LENGTH_PREFIX + len..];
        }
        let expected = if flags & FLAG_GRID_MAP != 0 { 3 } else { 2 };
        if payloads.len() < 2 {
            return Err(BitstreamError::Truncated);
        }
        if payloads.len() != expected {
            return Err(BitstreamError::FlagPayloadMismatch {
                expected,
                found: payloads.len(),
            });
        }
        let latent = payloads.pop().unwrap();
        let grid_map = if expected == 3 { payloads.pop() } else { None };
        let semantics = payloads.pop().unwrap();
        Ok(Self {
            width,
            height,
            semantics,
            grid_map,
            latent,
        })
    }
}

fn put_payload(out: &mut Vec<u8>, payload: &[u8]) -> Result<(), BitstreamError> {
    let len = u32::try_from(payload.len()).map_err(|_| BitstreamError::PayloadTooLarge(payload.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(grid: Option<Vec<u8>>) -> CompressedImage {
        CompressedImage {
            width: 64,
            height: 64,
            semantics: vec![7; 10],
            grid_map: grid,
            latent: vec![3; 100],
        }
    }

    #[test]
    fn pack_layout_size() {
        let bytes = sample(None).pack().unwrap();
        assert_eq!(bytes.len(), 14 + 4 + 10 + 4 + 100);
        assert_eq!(bytes.len(), 132);
        assert_eq!(&bytes[..4], b"SGIC");
        assert_eq!(bytes[13], 0);
        assert_eq!(sample(None).pack().unwrap(), bytes);
    }

    #[test]
    fn bpp_matches_packed_bits() {
        let c = sample(None);
        assert_eq!(c.bpp(), 1056.0 / 4096.0);
        assert!((c.bpp() - 0.2578).abs() < 1e-4);
        let mut bigger = c.clone();
        bigger.latent = vec![0; 200];
        assert!(bigger.bpp() > c.bpp());
    }

    #[test]
    fn odd_width_rejected() {
        let mut c = sample(None);
        c.width = 65;
        assert_eq!(
            c.pack(),
            Err(BitstreamError::DimensionInvalid { width: 65, height: 64 })
        );
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = sample(None).pack().unwrap();
        bytes[0] ^= 0xff;
        assert_eq!(CompressedImage::unpack(&bytes), Err(BitstreamError::BadMagic));
    }

    #[test]
    fn flag_without_grid_payload() {
        let mut bytes = sample(None).pack().unwrap();
        bytes[13] |= FLAG_GRID_MAP;
        assert_eq!(
            CompressedImage::unpack(&bytes),
            Err(BitstreamError::FlagPayloadMismatch { expected: 3, found: 2 })
        );
    }

    #[test]
    fn grid_payload_without_flag() {
        let mut bytes = sample(Some(vec![1; 8])).pack().unwrap();
        bytes[13] = 0;
        assert_eq!(
            CompressedImage::unpack(&bytes),
            Err(BitstreamError::FlagPayloadMismatch { expected: 2, found: 3 })
        );
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = sample(None).pack().unwrap();
        bytes[4] = 2;
        assert_eq!(CompressedImage::unpack(&bytes), Err(BitstreamError::UnsupportedVersion(2)));
        let bytes = sample(None).pack().unwrap();
        for cut in [0, 3, 13, 20, bytes.len() - 1] {
            assert_eq!(CompressedImage::unpack(&bytes[..cut]), Err(BitstreamError::Truncated), "cut {cut}");
        }
    }

    #[test]
    fn grid_payload_is_charged() {
        let plain = sample(None);
        let with_grid = sample(Some(vec![0; 8]));
        assert_eq!(with_grid.total_bits() - plain.total_bits(), 8 * (4 + 8));
        assert_eq!(with_grid.budget().grid_map_bits, 96);
        assert_eq!(with_grid.flags(), FLAG_GRID_MAP);
    }

    proptest! {
        #[test]
        fn round_trip(
            w in 8u32..600, h in 8u32..600,
            sem in prop::collection::vec(any::<u8>(), 0..300),
            grid in prop::option::of(prop::collection::vec(any::<u8>(), 0..40)),
            latent in prop::collection::vec(any::<u8>(), 0..500),
        ) {
            let c = CompressedImage { width: w * 2, height: h * 2, semantics: sem, grid_map: grid, latent };
            let bytes = c.pack().unwrap();
            prop_assert_eq!(bytes.len() as u64 * 8, c.total_bits());
            prop_assert_eq!(CompressedImage::unpack(&bytes).unwrap(), c);
        }
    }
}
