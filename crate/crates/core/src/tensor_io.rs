//! Binary tensor files.
//!
//! Layout: magic `STHT`, u32 LE rank, `rank` × u32 LE dims, then the payload
//! as little-endian f32 in row-major order. Values are narrowed to f32 on
//! write and widened back to f64 on read.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STHT";
/// Ranks above this are rejected as corrupt headers.
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let dims = t.dims();
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let parse = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    let read_u32 = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| parse(bytes.len(), "unexpected end of header"))
    };
    if bytes.len() < 4 {
        return Err(parse(bytes.len(), "file shorter than magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let rank = read_u32(4)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(parse(4, &format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = read_u32(8 + 4 * i)? as usize;
        if d == 0 {
            return Err(parse(8 + 4 * i, "zero dimension"));
        }
        dims.push(d);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::DimOverflow {
            path: path.to_path_buf(),
            msg: format!("dims {dims:?}"),
        })?;
    let start = 8 + 4 * rank;
    let expected = start + 4 * numel;
    if bytes.len() < expected {
        return Err(parse(
            bytes.len(),
            &format!("payload truncated, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(parse(expected, "trailing bytes after payload"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if t.dims().iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::DimOverflow {
            path: path.to_path_buf(),
            msg: format!("dims {:?} exceed u32", t.dims()),
        });
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"STHT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.stht");
        assert!(matches!(read_tensor(&missing), Err(Error::MissingFile { .. })));

        let t = Tensor::random_uniform(&[3, 4], 1, 0.0, 1.0).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes.truncate(bytes.len() - 3);
        match decode_tensor(&bytes, Path::new("x")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = encode_tensor(&t);
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad, Path::new("x")), Err(Error::BadMagic { .. })));

        let mut huge = Vec::new();
        huge.extend_from_slice(MAGIC);
        huge.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_tensor(&huge, Path::new("x")), Err(Error::DimOverflow { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_f32_exact(seed in 0u64..500, a in 1usize..5, b in 1usize..6) {
            let t = Tensor::random_uniform(&[a, b, 2], seed, -10.0, 10.0).unwrap();
            let back = decode_tensor(&encode_tensor(&t), Path::new("mem")).unwrap();
            let quant = t.map(|v| v as f32 as f64);
            prop_assert_eq!(back, quant);
        }
    }
}
