use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DCNT";
const VERSION: u8 = 1;

/// Serializes as `DCNT | u8 version | u8 ndim | u32 dims.. | f32 payload..`,
/// all little-endian.
pub fn encode_tensor(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::Format("refusing to write non-finite values".into()));
    }
    let ndim = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(ndim);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| {
        Error::Format(format!("truncated tensor: need {n} bytes at offset {pos}"))
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad magic, expected DCNT".into()));
    }
    let version = take(bytes, &mut pos, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let ndim = take(bytes, &mut pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
        shape.push(d as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let payload = take(
        bytes,
        &mut pos,
        n.checked_mul(4)
            .ok_or_else(|| Error::Format("payload too large".into()))?,
    )?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("tensor contains non-finite values".into()));
    }
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, pos))
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) =
        decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn round_trip_small_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dcnt");
        let t = Tensor::new(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor_file(&p, &t).unwrap();
        assert_eq!(read_tensor_file(&p).unwrap(), t);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"DCNT\x01\x02");
        assert_eq!(bytes.len(), 6 + 8 + 24);
    }

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::scalar(-2.5f32);
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(decode_tensor(&bytes).unwrap(), (t, 10));
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new(&[2, 2], vec![1.0f32; 4]).unwrap();
        let good = encode_tensor(&t).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_tensor(&good[..good.len() - 1]).is_err());
        assert!(decode_tensor(&good[..3]).is_err());
        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_tensor(&nan).is_err());
        let mut version = good.clone();
        version[4] = 9;
        assert!(decode_tensor(&version).is_err());
        let mut zero_dim = good;
        zero_dim[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode_tensor(&zero_dim).is_err());
        assert!(encode_tensor(&Tensor::new(&[1], vec![f32::INFINITY]).unwrap()).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_tensor_file("/nonexistent/x.dcnt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.dcnt"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in prop::collection::vec(any::<u32>(), 64),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed[i % 64].wrapping_mul(i as u32 + 1)))
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let bytes = encode_tensor(&t).unwrap();
            let (back, used) = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
