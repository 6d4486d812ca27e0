//! `TNS1` binary tensor files.
//!
//! Layout, all little-endian: magic `TNS1`, `u8` rank, `rank` x `u32`
//! dimensions, then `product(dims)` x `f32` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Error)]
pub enum TnsError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected TNS1")]
    Magic([u8; 4]),
    #[error("invalid header: {0}")]
    Header(String),
}

pub fn write<T: Element, W: Write>(mut w: W, t: &Tensor<T>) -> Result<(), TnsError> {
    let rank = u8::try_from(t.rank()).map_err(|_| TnsError::Header(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TnsError::Header(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<T: Element, R: Read>(mut r: R) -> Result<Tensor<T>, TnsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TnsError::Magic(magic));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| TnsError::Header(e.to_string()))
}

pub fn save<T: Element>(path: &Path, t: &Tensor<T>) -> Result<(), TnsError> {
    let mut buf = Vec::new();
    write(&mut buf, t)?;
    let tmp = path.with_extension("tns.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Tensor<T>, TnsError> {
    let bytes = fs::read(path)?;
    read(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &t).unwrap();
        let mut want = b"TNS1".to_vec();
        want.push(2);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
        assert_eq!(read::<f32, _>(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read::<f32, _>(&b"TNS2\x00"[..]), Err(TnsError::Magic(_))));
        let t = Tensor::<f32>::ones(&[3]);
        let mut buf = Vec::new();
        write(&mut buf, &t).unwrap();
        buf.pop();
        assert!(matches!(read::<f32, _>(buf.as_slice()), Err(TnsError::Io(_))));
    }
}
