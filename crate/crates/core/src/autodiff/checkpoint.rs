//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"NOPS"
//! format   u32
//! repeated until EOF:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, rank × dim u32
//!   product(dims) × f64
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NOPS";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamStore) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, p) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(&mut buf, params).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<ParamStore> {
    let bad = |detail: &str| Error::Format {
        path: origin.to_string(),
        detail: detail.to_string(),
    };
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("missing header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).ok_or_else(|| bad("missing format version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut params = ParamStore::new();
    while !r.is_empty() {
        let len = read_u32(&mut r).ok_or_else(|| bad("truncated name length"))? as usize;
        if r.len() < len {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        r = &r[len..];
        let rank = read_u32(&mut r).ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        if r.len() < numel * 8 {
            return Err(bad(&format!("truncated values for `{name}`")));
        }
        let data = r[..numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        r = &r[numel * 8..];
        params.insert(
            name,
            Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?,
        );
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_params(&mut f, params)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path)?, &path.display().to_string())
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let (head, tail) = r.split_first_chunk::<4>()?;
    *r = tail;
    Some(u32::from_le_bytes(*head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap());
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"NOPS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'w');
        // rank, dims, two f64 values
        assert_eq!(bytes.len(), 13 + 4 + 8 + 16);
        assert_eq!(decode(&bytes, "mem").unwrap(), p);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::scalar(3.0));
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, "mem").is_err());
    }
}
