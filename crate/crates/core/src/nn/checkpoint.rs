//! `DCK1` parameter checkpoints.
//!
//! Layout, all little-endian: magic `DCK1`, `u32` entry count, then per
//! parameter a `u16` name length, the UTF-8 name, `u8` rank, `rank` x `u32`
//! dimensions and the `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dcml_tensor::{Element, Tensor};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"DCK1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<T: Element>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * store.numel());
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.len()).map_err(|_| bad("too many parameters"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {}", store.name(id))))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let t = store.get(id);
        out.push(u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write<T: Element, W: Write>(mut w: W, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode(store)?;
    w.write_all(&bytes).map_err(|e| bad(e.to_string()))
}

fn take<'a, R: Read>(r: &mut R, buf: &'a mut [u8]) -> Result<&'a [u8]> {
    r.read_exact(buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

pub fn read<T: Element, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    let mut b1 = [0u8; 1];
    if take(&mut r, &mut b4)? != MAGIC {
        return Err(bad(format!("bad magic {b4:?}")));
    }
    let count = u32::from_le_bytes(*take(&mut r, &mut b4)?.first_chunk().expect("4 bytes"));
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(*take(&mut r, &mut b2)?.first_chunk().expect("2 bytes")) as usize;
        let mut name = vec![0u8; len];
        take(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = take(&mut r, &mut b1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(*take(&mut r, &mut b4)?.first_chunk().expect("4 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; 4 * n];
        take(&mut r, &mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        store.add(name, t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(store)
}

pub fn save<T: Element>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode(store)?)
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read(bytes.as_slice()).map_err(|e| bad(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        s.add("a.bias", Tensor::from_fn(&[3], |i| i as f32));
        s
    }

    #[test]
    fn roundtrip_and_layout() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        let header = 4 + 4;
        let e1 = 2 + 8 + 1 + 8 + 24;
        let e2 = 2 + 6 + 1 + 4 + 12;
        assert_eq!(bytes.len(), header + e1 + e2);
        assert_eq!(&bytes[..4], b"DCK1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        let back: ParamStore<f32> = read(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(read::<f32, _>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read::<f32, _>(extra.as_slice()).is_err());
        assert!(read::<f32, _>(&b"TNS1\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dck");
        save(&path, &sample()).unwrap();
        assert_eq!(load::<f32>(&path).unwrap(), sample());
    }
}
