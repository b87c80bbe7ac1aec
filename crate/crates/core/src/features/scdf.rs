//! `SCDF` binary matrices: magic, version, T, D (u32 LE), then T·D f32 LE values, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"SCDF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.rows() * m.cols());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format("SCDF file", "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format("SCDF file", format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::format(
            "SCDF file",
            format!("expected {expected} bytes for {t}x{d}, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Mat::from_vec(t, d, data))
}

pub fn write(path: &Path, m: &Mat) -> Result<()> {
    fsio::write_atomic(path, &encode(m))
}

pub fn read(path: &Path) -> Result<Mat> {
    decode(&fsio::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Mat::from_rows(&[vec![1.0, -2.5]]);
        let b = encode(&m);
        assert_eq!(&b[..4], b"SCDF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_truncated() {
        let mut b = encode(&Mat::zeros(3, 2));
        b.pop();
        assert!(decode(&b).is_err());
        assert!(decode(b"SCDX").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_f32_rounding(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10_000) as f64 - 5000.0) / 37.0)
                .collect();
            let m = Mat::from_vec(rows, cols, data);
            let back = decode(&encode(&m)).unwrap();
            for (a, b) in m.data().iter().zip(back.data()) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
        }
    }
}
