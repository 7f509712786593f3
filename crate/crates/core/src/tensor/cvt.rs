//! `CVT1` tensor files.
//!
//! Layout: the magic bytes `CVT1`, a `u8` dtype (`0` = f64, `1` = f32), a
//! `u8` rank, `rank` little-endian `u32` dims, then the row-major payload in
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F64 => t
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed. Errors are plain strings; callers attach the path.
pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err("missing CVT1 magic".into());
    }
    let dtype = match bytes[4] {
        0 => DType::F64,
        1 => DType::F32,
        d => return Err(format!("unknown dtype {d}")),
    };
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or("truncated header")?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let payload = bytes
        .get(pos..pos + n * width)
        .ok_or_else(|| format!("payload truncated: need {} bytes", n * width))?;
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos + n * width))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t, DType::F64))
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, DType::F64);
        assert_eq!(&b[..4], b"CVT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(b.len(), 14 + 16);
    }

    #[test]
    fn f32_payload_decodes_to_f64() {
        let t = Tensor::new(&[3], vec![0.5, 1.25, -3.0]).unwrap();
        let b = encode(&t, DType::F32);
        assert_eq!(b.len(), 6 + 4 + 12);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"CVT2\0\0").is_err());
        let t = Tensor::ones(&[4]);
        let b = encode(&t, DType::F64);
        assert!(decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            prop_assert_eq!(decode(&encode(&t, DType::F64)).unwrap(), t);
        }
    }
}
