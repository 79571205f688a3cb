//! Flat binary parameter snapshots.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic  b"SATP"
//! version  1
//! count
//! count x { name_len, name bytes (utf-8), rank, rank x dim, prod(dims) x f32 LE }
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SATP";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Data("parameter file truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data("parameter file truncated".into()))?;
    if &magic != MAGIC {
        return Err(Error::Data("not a parameter file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported parameter file version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Data("parameter file truncated in a name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|_| Error::Data(format!("parameter file truncated in tensor {name}")))?;
            data.push(T::of(f32::from_le_bytes(b) as f64));
        }
        let t = Tensor::new(&dims, data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))?;
        store.insert(&name, t).map_err(|e| Error::Data(e.to_string()))?;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Data("trailing bytes after parameter records".into()));
    }
    Ok(store)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
