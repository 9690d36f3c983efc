//! IDX container format (the MNIST distribution format).
//!
//! Layout: two zero bytes, an element-type code, the rank, then `rank`
//! big-endian u32 dimensions, then the row-major payload in big-endian.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("truncated stream: need {needed} header bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown magic number {0:02x?}")]
    UnknownMagic([u8; 4]),
    #[error("payload size mismatch: header declares {expected} bytes, stream has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn type_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => 0x08,
            IdxData::I8(_) => 0x09,
            IdxData::I16(_) => 0x0B,
            IdxData::I32(_) => 0x0C,
            IdxData::F32(_) => 0x0D,
            IdxData::F64(_) => 0x0E,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::I8(v) => v.len(),
            IdxData::I16(v) => v.len(),
            IdxData::I32(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn element_width(code: u8) -> Option<usize> {
    match code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, self.data.type_code(), self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        match &self.data {
            IdxData::U8(v) => out.extend_from_slice(v),
            IdxData::I8(v) => out.extend(v.iter().map(|x| *x as u8)),
            IdxData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
            IdxData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        }
        out
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let width = match (magic[0], magic[1], element_width(magic[2])) {
        (0, 0, Some(w)) => w,
        _ => return Err(IdxError::UnknownMagic(magic)),
    };
    let rank = magic[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            needed: header,
            available: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count.and_then(|c| c.checked_mul(width)).unwrap_or(usize::MAX);
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(IdxError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = match magic[2] {
        0x08 => IdxData::U8(payload.to_vec()),
        0x09 => IdxData::I8(payload.iter().map(|b| *b as i8).collect()),
        0x0B => IdxData::I16(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_be_bytes([c[0], c[1]]))
                .collect(),
        ),
        0x0C => IdxData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        0x0D => IdxData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        0x0E => IdxData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        _ => unreachable!("element width checked above"),
    };
    Ok(IdxTensor { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_image() -> Vec<u8> {
        let mut b = vec![0, 0, 0x08, 3];
        for d in [1u32, 2, 2] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(&[0, 128, 255, 64]);
        b
    }

    #[test]
    fn parses_hand_built_image() {
        let t = parse_idx(&tiny_image()).unwrap();
        assert_eq!(t.dims, vec![1, 2, 2]);
        assert_eq!(t.data, IdxData::U8(vec![0, 128, 255, 64]));
        assert_eq!(t.to_bytes(), tiny_image());
    }

    #[test]
    fn empty_stream_is_truncated() {
        assert_eq!(
            parse_idx(&[]),
            Err(IdxError::Truncated {
                needed: 4,
                available: 0
            })
        );
    }

    #[test]
    fn short_dims_are_truncated() {
        let b = &tiny_image()[..9];
        assert_eq!(
            parse_idx(b),
            Err(IdxError::Truncated {
                needed: 16,
                available: 9
            })
        );
    }

    #[test]
    fn payload_one_short_is_size_mismatch() {
        let mut b = tiny_image();
        b.pop();
        assert_eq!(
            parse_idx(&b),
            Err(IdxError::SizeMismatch {
                expected: 4,
                actual: 3
            })
        );
        let mut b = tiny_image();
        b.push(1);
        assert!(matches!(parse_idx(&b), Err(IdxError::SizeMismatch { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut b = tiny_image();
        b[2] = 0x07;
        assert_eq!(parse_idx(&b), Err(IdxError::UnknownMagic([0, 0, 7, 3])));
        let mut b = tiny_image();
        b[0] = 1;
        assert!(matches!(parse_idx(&b), Err(IdxError::UnknownMagic(_))));
    }

    fn tensor_strategy() -> impl Strategy<Value = IdxTensor> {
        let dims = proptest::collection::vec(1usize..5, 0..4);
        (dims, 0u8..6).prop_flat_map(|(dims, kind)| {
            let n: usize = dims.iter().product();
            let dims2 = dims.clone();
            let data = match kind {
                0 => proptest::collection::vec(any::<u8>(), n).prop_map(IdxData::U8).boxed(),
                1 => proptest::collection::vec(any::<i8>(), n).prop_map(IdxData::I8).boxed(),
                2 => proptest::collection::vec(any::<i16>(), n).prop_map(IdxData::I16).boxed(),
                3 => proptest::collection::vec(any::<i32>(), n).prop_map(IdxData::I32).boxed(),
                4 => proptest::collection::vec(-1e6f32..1e6, n).prop_map(IdxData::F32).boxed(),
                _ => proptest::collection::vec(-1e6f64..1e6, n).prop_map(IdxData::F64).boxed(),
            };
            data.prop_map(move |data| IdxTensor {
                dims: dims2.clone(),
                data,
            })
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(t in tensor_strategy()) {
            let bytes = t.to_bytes();
            let back = parse_idx(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
