//! On-disk compressed representation.
//!
//! Layout (little-endian throughout):
//!   magic "RDCL" | version u8 | model_id u8 | gain f32 | width u32 | height u32
//! followed by length-prefixed byte segments in coding-schedule order
//! (hyper-latent first, then one segment per latent coding unit).

use std::io::{Read, Write};

use super::EntropyError;

pub const MAGIC: [u8; 4] = *b"RDCL";
pub const VERSION: u8 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u8,
    pub model_id: u8,
    pub gain: f32,
    /// True pre-padding image dimensions.
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct Bitstream {
    pub header: Header,
    pub segments: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn new(model_id: u8, gain: f32, width: u32, height: u32) -> Self {
        Bitstream {
            header: Header { version: VERSION, model_id, gain, width, height },
            segments: Vec::new(),
        }
    }

    /// Bytes charged to the image rate: everything except the fixed header
    /// (segment length prefixes included, since they scale with content).
    pub fn payload_bytes(&self) -> usize {
        self.segments.iter().map(|s| 4 + s.len()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.payload_bytes()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&[self.header.version, self.header.model_id])?;
        w.write_all(&self.header.gain.to_le_bytes())?;
        w.write_all(&self.header.width.to_le_bytes())?;
        w.write_all(&self.header.height.to_le_bytes())?;
        for seg in &self.segments {
            w.write_all(&(seg.len() as u32).to_le_bytes())?;
            w.write_all(seg)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        self.write_to(&mut out).unwrap();
        out
    }

    /// Parse a stream, expecting exactly `expected_segments` segments.
    pub fn read_from(r: &mut impl Read, expected_segments: usize) -> Result<Self, EntropyError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, 0)?;
        if magic != MAGIC {
            return Err(EntropyError::BadMagic);
        }
        let mut fixed = [0u8; HEADER_LEN - 4];
        read_exact(r, &mut fixed, 4)?;
        let version = fixed[0];
        if version != VERSION {
            return Err(EntropyError::VersionMismatch { found: version, expected: VERSION });
        }
        let model_id = fixed[1];
        let gain = f32::from_le_bytes(fixed[2..6].try_into().unwrap());
        let width = u32::from_le_bytes(fixed[6..10].try_into().unwrap());
        let height = u32::from_le_bytes(fixed[10..14].try_into().unwrap());
        if !(gain.is_finite() && gain > 0.0) {
            return Err(EntropyError::InvalidHeader(format!("gain {gain} not positive")));
        }
        if width == 0 || height == 0 {
            return Err(EntropyError::InvalidHeader("zero image dimension".into()));
        }
        let mut segments = Vec::with_capacity(expected_segments);
        let mut pos = HEADER_LEN;
        for unit in 0..expected_segments {
            let mut lenb = [0u8; 4];
            if read_exact(r, &mut lenb, pos).is_err() {
                return Err(EntropyError::MissingSegment {
                    unit,
                    expected: expected_segments,
                    found: segments.len(),
                });
            }
            let len = u32::from_le_bytes(lenb) as usize;
            pos += 4;
            let mut seg = vec![0u8; len];
            read_exact(r, &mut seg, pos)?;
            pos += len;
            segments.push(seg);
        }
        Ok(Bitstream {
            header: Header { version, model_id, gain, width, height },
            segments,
        })
    }

    pub fn from_bytes(bytes: &[u8], expected_segments: usize) -> Result<Self, EntropyError> {
        Self::read_from(&mut std::io::Cursor::new(bytes), expected_segments)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], pos: usize) -> Result<(), EntropyError> {
    r.read_exact(buf).map_err(|_| EntropyError::Truncated { pos })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        let mut bs = Bitstream::new(0x31, 2.5, 768, 512);
        bs.segments.push(vec![1, 2, 3]);
        bs.segments.push(vec![]);
        bs.segments.push(vec![9; 100]);
        bs
    }

    #[test]
    fn roundtrip() {
        let bs = sample();
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), bs.total_bytes());
        assert_eq!(bs.payload_bytes(), 3 * 4 + 3 + 100);
        let back = Bitstream::from_bytes(&bytes, 3).unwrap();
        assert_eq!(back.header, bs.header);
        assert_eq!(back.segments, bs.segments);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bytes, 3), Err(EntropyError::BadMagic)));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Bitstream::from_bytes(&bytes, 3),
            Err(EntropyError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_segment_list_names_missing_unit() {
        let bs = sample();
        let bytes = bs.to_bytes();
        // drop the last segment entirely
        let cut = HEADER_LEN + 4 + 3 + 4;
        match Bitstream::from_bytes(&bytes[..cut], 3) {
            Err(EntropyError::MissingSegment { unit: 2, expected: 3, found: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn truncated_mid_segment_is_an_error() {
        let bytes = sample().to_bytes();
        let res = Bitstream::from_bytes(&bytes[..bytes.len() - 10], 3);
        assert!(matches!(res, Err(EntropyError::Truncated { .. })));
    }
}
