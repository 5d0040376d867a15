//! FTSR tensor files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FTSR"
//!      4     1  version (1)
//!      5     1  dtype (0 = f32, 1 = u8)
//!      6     2  reserved (0)
//!      8     4  height
//!     12     4  width
//!     16     4  channels
//!     20     -  payload, row-major (y, x, c)
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{FeatureTensor, Shape};

pub const FTSR_MAGIC: [u8; 4] = *b"FTSR";
pub const FTSR_VERSION: u8 = 1;
pub const FTSR_HEADER_LEN: usize = 20;
/// Upper bound on element count accepted when reading.
pub const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum FtsrError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype {0}")]
    UnknownDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension overflow: {height}x{width}x{channels}")]
    DimensionOverflow {
        height: u32,
        width: u32,
        channels: u32,
    },
    #[error("zero-sized dimension")]
    EmptyDimension,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("expected f32 payload, file holds u8")]
    NotFloat,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Decoded contents of an FTSR file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    F32(FeatureTensor),
    U8 { shape: Shape, data: Vec<u8> },
}

fn header(dtype: Dtype, shape: Shape) -> Vec<u8> {
    let mut out = Vec::with_capacity(FTSR_HEADER_LEN + shape.len() * dtype.size());
    out.extend_from_slice(&FTSR_MAGIC);
    out.push(FTSR_VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in [shape.height, shape.width, shape.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_f32(t: &FeatureTensor) -> Vec<u8> {
    let mut out = header(Dtype::F32, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(shape: Shape, data: &[u8]) -> Vec<u8> {
    assert_eq!(shape.len(), data.len(), "payload does not match shape");
    let mut out = header(Dtype::U8, shape);
    out.extend_from_slice(data);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile, FtsrError> {
    if bytes.len() < 4 || bytes[..4] != FTSR_MAGIC {
        return Err(FtsrError::BadMagic);
    }
    if bytes.len() < FTSR_HEADER_LEN {
        return Err(FtsrError::Truncated {
            expected: FTSR_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[4] != FTSR_VERSION {
        return Err(FtsrError::UnsupportedVersion(bytes[4]));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        other => return Err(FtsrError::UnknownDtype(other)),
    };
    let (height, width, channels) = (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    if height == 0 || width == 0 || channels == 0 {
        return Err(FtsrError::EmptyDimension);
    }
    let count = (height as u64)
        .checked_mul(width as u64)
        .and_then(|n| n.checked_mul(channels as u64));
    if count.is_none_or(|n| n > MAX_ELEMENTS) {
        return Err(FtsrError::DimensionOverflow {
            height,
            width,
            channels,
        });
    }
    let shape = Shape::new(height as usize, width as usize, channels as usize);
    let payload = &bytes[FTSR_HEADER_LEN..];
    let expected = shape.len() * dtype.size();
    if payload.len() < expected {
        return Err(FtsrError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FtsrError::TrailingBytes(payload.len() - expected));
    }
    Ok(match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorFile::F32(FeatureTensor::new(shape, data).expect("shape checked"))
        }
        Dtype::U8 => TensorFile::U8 {
            shape,
            data: payload.to_vec(),
        },
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &FeatureTensor) -> Result<(), FtsrError> {
    fs::write(path, encode_f32(t))?;
    Ok(())
}

/// Read an f32 FTSR file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor, FtsrError> {
    match decode(&fs::read(path)?)? {
        TensorFile::F32(t) => Ok(t),
        TensorFile::U8 { .. } => Err(FtsrError::NotFloat),
    }
}

pub fn read_any(path: impl AsRef<Path>) -> Result<TensorFile, FtsrError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_element_layout() {
        let t = FeatureTensor::new(Shape::new(1, 1, 1), vec![3.5]).unwrap();
        let bytes = encode_f32(&t);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"FTSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..], &3.5f32.to_le_bytes());
    }

    #[test]
    fn error_cases_are_distinct() {
        let t = FeatureTensor::filled(Shape::new(2, 2, 2), 1.0);
        let good = encode_f32(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err().to_string(), "bad magic");

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(FtsrError::Truncated { .. })
        ));
        assert!(matches!(
            decode(&good[..10]),
            Err(FtsrError::Truncated { .. })
        ));

        let mut huge = good.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode(&huge),
            Err(FtsrError::DimensionOverflow { .. })
        ));

        let mut dtype = good.clone();
        dtype[5] = 9;
        assert!(matches!(decode(&dtype), Err(FtsrError::UnknownDtype(9))));

        let mut version = good;
        version[4] = 2;
        assert!(matches!(
            decode(&version),
            Err(FtsrError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn u8_round_trip_and_file() {
        let shape = Shape::new(2, 3, 1);
        let data = vec![0, 1, 2, 253, 254, 255];
        let bytes = encode_u8(shape, &data);
        assert_eq!(bytes.len(), FTSR_HEADER_LEN + 6);
        assert_eq!(decode(&bytes).unwrap(), TensorFile::U8 { shape, data });

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftsr");
        let t = FeatureTensor::from_fn(Shape::new(3, 2, 2), |y, x, c| {
            (y * 7 + x * 3 + c) as f32 * 0.25
        });
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_identical(
            h in 1usize..5, w in 1usize..5, c in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::XorShift64Star::new(seed);
            let t = FeatureTensor::from_fn(Shape::new(h, w, c), |_, _, _| {
                f32::from_bits(rng.next_u64() as u32 & 0x7F7F_FFFF) * if rng.chance(0.5) { 1.0 } else { -1.0 }
            });
            let back = match decode(&encode_f32(&t)).unwrap() {
                TensorFile::F32(b) => b,
                _ => unreachable!(),
            };
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
