//! Binary tensor serialisation.
//!
//! A tensor is written as `rank: u64`, `dims: [u64; rank]`, then the data as
//! row-major little-endian `f64`. Named records prefix that with
//! `name_len: u64` and the UTF-8 name.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

/// Guards against absurd allocations when reading corrupt files.
const MAX_ELEMENTS: u64 = 1 << 32;
const MAX_NAME: u64 = 4096;

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Load("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_u64(w, t.rank() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u64(r)?;
    if rank > 8 {
        return Err(Error::Load(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        total = total.saturating_mul(d);
        shape.push(d as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::Load(format!("implausible tensor size {total}")));
    }
    let mut bytes = vec![0u8; total as usize * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t)
}

pub fn read_named<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let len = read_u64(r)?;
    if len > MAX_NAME {
        return Err(Error::Load(format!("implausible record name length {len}")));
    }
    let mut name = vec![0u8; len as usize];
    r.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name).map_err(|_| Error::Load("record name is not UTF-8".into()))?;
    let t = read_tensor(r)?;
    Ok((name, t))
}

/// Write `count` followed by the named records.
pub fn write_records<'a, W: Write>(
    w: &mut W,
    records: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_u64(w, records.len() as u64)?;
    for (name, t) in records {
        write_named(w, name, t)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let count = read_u64(r)?;
    if count > 1 << 20 {
        return Err(Error::Load(format!("implausible record count {count}")));
    }
    (0..count).map(|_| read_named(r)).collect()
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
